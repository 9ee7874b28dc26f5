"""Disjoint context/target token masking.

Two strategies: `random_disjoint` draws the target indices uniformly
without replacement and hands everything else to the context;
`multi_block` carves rectangular target blocks out of the patch grid.
Both guarantee context and targets never overlap and target groups are
pairwise disjoint. All sampling is a pure function of the generator the
caller passes in.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError

STRATEGIES = ("random_disjoint", "multi_block")


@dataclass(frozen=True)
class MaskConfig:
    strategy: str = "random_disjoint"
    target_ratio: float = 0.25
    # None resolves per strategy: 1 for random_disjoint, 4 for multi_block
    n_target_groups: int | None = None
    block_scale: tuple[float, float] = (0.05, 0.15)
    block_aspect: tuple[float, float] = (0.75, 1.5)
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError([{"field": "mask.strategy",
                                "message": f"must be one of {STRATEGIES}"}])
        if self.n_target_groups is None:
            object.__setattr__(
                self, "n_target_groups",
                4 if self.strategy == "multi_block" else 1,
            )
        if not 0.0 < self.target_ratio < 1.0:
            raise ConfigError([{"field": "mask.target_ratio",
                                "message": "must be in (0, 1)"}])
        if self.n_target_groups < 1:
            raise ConfigError([{"field": "mask.n_target_groups",
                                "message": "must be >= 1"}])

    def make_rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


@dataclass(frozen=True)
class MaskPair:
    """Indices the context encoder sees, plus the target index groups."""

    context_indices: np.ndarray          # sorted int64, non-empty
    target_groups: tuple[np.ndarray, ...]  # each sorted int64, non-empty
    n_tokens: int

    def target_indices(self) -> np.ndarray:
        return np.concatenate(self.target_groups)

    def validate(self) -> None:
        tgt = self.target_indices()
        all_idx = np.concatenate([self.context_indices, tgt])
        if self.context_indices.size == 0:
            raise ContractError("context is empty")
        if any(g.size == 0 for g in self.target_groups):
            raise ContractError("empty target group")
        if all_idx.min() < 0 or all_idx.max() >= self.n_tokens:
            raise ContractError("token index out of range")
        if len(np.unique(all_idx)) != all_idx.size:
            raise ContractError("context/target sets overlap")


def _partition_even(indices: np.ndarray, m: int) -> tuple[np.ndarray, ...]:
    # earlier groups take the extra index when len % m != 0
    sizes = [len(indices) // m + (1 if i < len(indices) % m else 0) for i in range(m)]
    groups, at = [], 0
    for s in sizes:
        groups.append(np.sort(indices[at:at + s]))
        at += s
    return tuple(groups)


def target_count(n_tokens: int, config: MaskConfig) -> int:
    return int(round(config.target_ratio * n_tokens))


def sample_random_disjoint(
    n_tokens: int, config: MaskConfig, rng: np.random.Generator
) -> MaskPair:
    """Uniform target indices without replacement; context = the rest."""
    t = target_count(n_tokens, config)
    m = config.n_target_groups
    if t < m or t >= n_tokens:
        raise ConfigError([{
            "field": "mask.target_ratio",
            "message": f"needs n_target_groups <= round(ratio*n_tokens) < n_tokens, "
                       f"got {t} targets for {m} groups over {n_tokens} tokens",
        }])
    targets = rng.choice(n_tokens, size=t, replace=False)
    targets = np.sort(targets)
    mask = np.ones(n_tokens, dtype=bool)
    mask[targets] = False
    context = np.flatnonzero(mask)
    return MaskPair(
        context_indices=context,
        target_groups=_partition_even(targets, m),
        n_tokens=n_tokens,
    )


def rect_indices(grid_shape: tuple[int, int], top: int, left: int,
                 height: int, width: int) -> np.ndarray:
    """Row-major token indices of a rectangle in the patch grid."""
    rows, cols = grid_shape
    if not (0 <= top and top + height <= rows and 0 <= left and left + width <= cols):
        raise ContractError(f"rectangle {(top, left, height, width)} exceeds grid {grid_shape}")
    rr = np.arange(top, top + height)
    cc = np.arange(left, left + width)
    return (rr[:, None] * cols + cc[None, :]).ravel()


def _rect_for_quota(quota: int, aspect: float, rows: int, cols: int) -> tuple[int, int]:
    # nearest feasible (h, w) to the requested area at the drawn aspect
    h = int(np.clip(round(np.sqrt(quota * aspect)), 1, rows))
    w = int(np.clip(round(quota / h), 1, cols))
    return h, w


def sample_multi_block(
    n_tokens: int,
    grid_shape: tuple[int, int],
    config: MaskConfig,
    rng: np.random.Generator,
    placement_tries: int = 32,
) -> MaskPair:
    """Rectangular target blocks; realized total tracks round(ratio * n_tokens).

    The configured block_scale range sets the *relative* spread of block
    sizes; absolute sizes are normalized so the group total matches the
    masking ratio (a running carry absorbs rectangle quantization).
    Placement retries avoid overlap between blocks; residual overlap is
    kept by the earlier group.
    """
    rows, cols = grid_shape
    if rows * cols != n_tokens:
        raise ConfigError([{"field": "grid_shape",
                            "message": f"{grid_shape} inconsistent with n_tokens={n_tokens}"}])
    t = target_count(n_tokens, config)
    m = config.n_target_groups
    if t < m or t >= n_tokens:
        raise ConfigError([{
            "field": "mask.target_ratio",
            "message": f"needs n_target_groups <= round(ratio*n_tokens) < n_tokens, "
                       f"got {t} targets for {m} groups over {n_tokens} tokens",
        }])

    lo, hi = config.block_scale
    raw = rng.uniform(lo, hi, size=m)
    quotas = np.maximum(1, np.floor(raw / raw.sum() * t).astype(int))
    # largest-remainder top-up so quotas sum to t
    order = np.argsort(-(raw / raw.sum() * t - quotas))
    for i in range(m):
        if quotas.sum() >= t:
            break
        quotas[order[i % m]] += 1

    claimed = np.zeros(n_tokens, dtype=bool)
    groups: list[np.ndarray] = []
    carry = 0
    for i in range(m):
        quota = max(1, quotas[i] + carry)
        aspect = rng.uniform(*config.block_aspect)
        h, w = _rect_for_quota(quota, aspect, rows, cols)
        best = None
        for _ in range(placement_tries):
            top = int(rng.integers(0, rows - h + 1))
            left = int(rng.integers(0, cols - w + 1))
            idx = rect_indices(grid_shape, top, left, h, w)
            fresh = idx[~claimed[idx]]
            if fresh.size == idx.size:
                best = fresh
                break
            if best is None or fresh.size > best.size:
                best = fresh
        if best is None or best.size == 0:
            # grid too crowded for another rectangle: fall back to one free cell
            free = np.flatnonzero(~claimed)
            if free.size == 0:
                raise ConfigError([{"field": "mask",
                                    "message": "no free cells left for target block"}])
            best = free[:1]
        claimed[best] = True
        groups.append(np.sort(best))
        carry = quota - best.size

    context = np.flatnonzero(~claimed)
    if context.size == 0:
        raise ConfigError([{"field": "mask.target_ratio",
                            "message": "blocks covered the whole grid; no context left"}])
    return MaskPair(
        context_indices=context,
        target_groups=tuple(groups),
        n_tokens=n_tokens,
    )


def sample_mask(
    n_tokens: int,
    grid_shape: tuple[int, int],
    config: MaskConfig,
    rng: np.random.Generator,
) -> MaskPair:
    if config.strategy == "random_disjoint":
        return sample_random_disjoint(n_tokens, config, rng)
    return sample_multi_block(n_tokens, grid_shape, config, rng)


def sample_batch(
    batch_size: int,
    n_tokens: int,
    grid_shape: tuple[int, int],
    config: MaskConfig,
    rng: np.random.Generator,
) -> list[MaskPair]:
    """Independent per-sample masks, drawn sequentially from one stream."""
    return [sample_mask(n_tokens, grid_shape, config, rng) for _ in range(batch_size)]
