"""Feature-space k-NN retrieval and the F1@k metric.

An index is the pooled embedding of every archive record (target encoder
by default) plus the records' label sets. Search is exact: all N distances
are computed and sorted, with ties broken by ascending id so results are
deterministic. Queries drawn from the archive exclude themselves.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import ArchiveRecord
from .errors import ConfigError, ContractError, EvaluationError
from .model import ModelState, pooled_embeddings_batch

INDEX_VERSION = 1
METRICS = ("euclidean", "cosine")


@dataclass(frozen=True)
class FeatureIndex:
    ids: tuple[str, ...]
    matrix: np.ndarray                 # (N, d) pooled embeddings
    metric: str
    labels: tuple[frozenset, ...]      # label set per row

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ConfigError([{"field": "retrieval.metric",
                                "message": f"must be one of {METRICS}"}])
        n = len(self.ids)
        if n < 1:
            raise ConfigError([{"field": "index", "message": "empty index"}])
        if self.matrix.shape[0] != n or len(self.labels) != n:
            raise ContractError("ids, matrix rows, and labels must align")
        if not np.all(np.isfinite(self.matrix)):
            raise ContractError("index matrix contains non-finite values")


def build_index(state: ModelState, archive: list[ArchiveRecord],
                metric: str = "euclidean", which: str = "target",
                batch_size: int = 256) -> FeatureIndex:
    """Embed every record in archive order (deterministic)."""
    if not archive:
        raise ConfigError([{"field": "archive", "message": "empty archive"}])
    images = np.stack([r.image for r in archive])
    matrix = pooled_embeddings_batch(state, images, which=which,
                                     batch_size=batch_size)
    return FeatureIndex(ids=tuple(r.id for r in archive), matrix=matrix,
                        metric=metric, labels=tuple(r.labels for r in archive))


def _distances(index: FeatureIndex, query_vector: np.ndarray) -> np.ndarray:
    q = np.asarray(query_vector, dtype=np.float64)
    if q.shape != (index.matrix.shape[1],):
        raise ContractError(
            f"query vector shape {q.shape} does not match index width "
            f"{index.matrix.shape[1]}"
        )
    if index.metric == "euclidean":
        diff = index.matrix - q
        return np.sqrt((diff * diff).sum(axis=1))
    # cosine distance; zero-norm rows are clamped rather than NaN
    norms = np.linalg.norm(index.matrix, axis=1)
    qn = np.linalg.norm(q)
    denom = np.maximum(norms * qn, 1e-30)
    return 1.0 - (index.matrix @ q) / denom


def query(index: FeatureIndex, query_vector: np.ndarray, k: int,
          exclude_id: str | None = None) -> list[tuple[str, float]]:
    """Exact k nearest neighbors; ties broken by ascending id."""
    n = len(index.ids)
    excluded = int(exclude_id is not None and exclude_id in index.ids)
    if not 1 <= k <= n - excluded:
        raise ContractError(f"k={k} out of range for index of {n} "
                            f"({excluded} excluded)")
    dist = _distances(index, query_vector)
    if excluded:
        dist = dist.copy()
        for i, rid in enumerate(index.ids):
            if rid == exclude_id:
                dist[i] = np.inf
    id_rank = np.empty(n, dtype=np.int64)
    id_rank[np.argsort(np.array(index.ids))] = np.arange(n)
    order = np.lexsort((id_rank, dist))[:k]
    return [(index.ids[i], float(dist[i])) for i in order]


def f1_at_k(query_labels: frozenset, neighbor_labels: list[frozenset],
            k: int) -> float:
    """Mean over the k retrieved images of per-pair label-set F1."""
    if not query_labels:
        raise EvaluationError("query has an empty label set")
    if len(neighbor_labels) != k:
        raise ContractError(f"expected {k} neighbor label sets, "
                            f"got {len(neighbor_labels)}")
    total = 0.0
    for r_labels in neighbor_labels:
        inter = len(query_labels & r_labels)
        if inter == 0:
            continue
        p = inter / len(r_labels)
        r = inter / len(query_labels)
        total += 2.0 * p * r / (p + r)
    return total / k


@dataclass(frozen=True)
class RetrievalResult:
    query_id: str
    neighbors: tuple[tuple[str, float], ...]
    f1: float


def evaluate_archive(state: ModelState, index: FeatureIndex,
                     eval_records: list[ArchiveRecord], k: int = 10,
                     which: str = "target") -> dict:
    """F1@k for every eval record queried against the index, self-excluded."""
    if not eval_records:
        raise EvaluationError("no evaluation records")
    images = np.stack([r.image for r in eval_records])
    vectors = pooled_embeddings_batch(state, images, which=which)
    labels_by_id = dict(zip(index.ids, index.labels))
    per_query = []
    for rec, vec in zip(eval_records, vectors):
        neighbors = query(index, vec, k, exclude_id=rec.id)
        neighbor_labels = [labels_by_id[nid] for nid, _ in neighbors]
        score = f1_at_k(rec.labels, neighbor_labels, k)
        per_query.append(RetrievalResult(query_id=rec.id,
                                         neighbors=tuple(neighbors),
                                         f1=score))
    mean_f1 = float(np.mean([r.f1 for r in per_query]))
    return {"mean_f1": mean_f1, "k": k, "metric": index.metric,
            "per_query": per_query}


def evaluation_to_json(result: dict) -> dict:
    """JSON-ready form: {mean_f1, k, metric, per_query: [...]}."""
    return {
        "mean_f1": result["mean_f1"],
        "k": result["k"],
        "metric": result["metric"],
        "per_query": [
            {"query_id": r.query_id,
             "neighbors": [[nid, nd] for nid, nd in r.neighbors],
             "f1": r.f1}
            for r in result["per_query"]
        ],
    }


def save_index(index: FeatureIndex, path: str) -> None:
    meta = {
        "format_version": INDEX_VERSION,
        "metric": index.metric,
        "ids": list(index.ids),
        "labels": [sorted(s) for s in index.labels],
    }
    try:
        with open(path, "wb") as fh:
            np.savez(fh, matrix=index.matrix, meta=np.array(json.dumps(meta)))
    except OSError as e:
        raise OSError(f"cannot write index {path}: {e}") from e


def load_index(path: str) -> FeatureIndex:
    try:
        data = np.load(path, allow_pickle=False)
    except OSError as e:
        raise OSError(f"cannot read index {path}: {e}") from e
    with data:
        meta = json.loads(str(data["meta"][()]))
        if meta.get("format_version") != INDEX_VERSION:
            raise ConfigError([{
                "field": "index",
                "message": f"unsupported format_version {meta.get('format_version')}",
            }])
        return FeatureIndex(
            ids=tuple(meta["ids"]),
            matrix=data["matrix"],
            metric=meta["metric"],
            labels=tuple(frozenset(ls) for ls in meta["labels"]),
        )
