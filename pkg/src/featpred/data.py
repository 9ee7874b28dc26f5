"""Synthetic multi-band archives, raw-tensor ingestion, and patch tokenization.

Images are plain float64 arrays of shape (bands, height, width). An archive
is a list of `ArchiveRecord`s; records are immutable after construction and
safe to share across threads.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, IngestionError, ShapeError


@dataclass(frozen=True)
class ArchiveRecord:
    """One archive entry: unique id, image tensor, and its label set."""

    id: str
    image: np.ndarray  # (C, H, W) float64
    labels: frozenset[str] = field(default_factory=frozenset)


@dataclass(frozen=True)
class PatchSequence:
    """Row-major patch tokens of one image.

    tokens[r * cols + c] is the flattened (band-major, then row, then column
    within the patch) content of the patch at grid position (r, c).
    """

    tokens: np.ndarray  # (n_tokens, C * p * p)
    grid_shape: tuple[int, int]


def patchify(image: np.ndarray, patch_size: int) -> PatchSequence:
    """Cut an image into non-overlapping patches, row-major over the grid."""
    if image.ndim != 3:
        raise ShapeError(f"expected (C, H, W) image, got shape {image.shape}")
    c, h, w = image.shape
    p = patch_size
    if p < 1 or h % p != 0 or w % p != 0:
        raise ShapeError(
            f"image {h}x{w} not divisible by patch_size {p}"
        )
    rows, cols = h // p, w // p
    tokens = (
        image.reshape(c, rows, p, cols, p)
        .transpose(1, 3, 0, 2, 4)
        .reshape(rows * cols, c * p * p)
    )
    return PatchSequence(tokens=tokens, grid_shape=(rows, cols))


def unpatchify(seq: PatchSequence, bands: int, patch_size: int) -> np.ndarray:
    """Inverse of :func:`patchify`; reconstructs the image exactly."""
    rows, cols = seq.grid_shape
    p = patch_size
    return (
        seq.tokens.reshape(rows, cols, bands, p, p)
        .transpose(2, 0, 3, 1, 4)
        .reshape(bands, rows * p, cols * p)
    )


def tokenize_batch(images: np.ndarray, patch_size: int) -> np.ndarray:
    """Patchify a (B, C, H, W) stack into (B, n_tokens, C*p*p)."""
    b, c, h, w = images.shape
    p = patch_size
    if h % p != 0 or w % p != 0:
        raise ShapeError(f"images {h}x{w} not divisible by patch_size {p}")
    rows, cols = h // p, w // p
    return (
        images.reshape(b, c, rows, p, cols, p)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(b, rows * cols, c * p * p)
    )


_GOLDEN = 0.6180339887498949
# class k textures the k-th pair of image quadrants (quadrant ids: 0 TL,
# 1 TR, 2 BL, 3 BR); every pair covers two quadrants so per-image total
# signal energy is class-independent
_QUADRANT_PAIRS = ((0, 1), (2, 3), (0, 2), (1, 3), (0, 3), (1, 2))
_PHASE_JITTER = np.pi / 3


def _quadrant_wave_tables(n_cells: int, bands: int):
    """Fixed per-(cell, band) plane-wave parameters shared by all classes.

    Frequencies cycle through {2,...,5} periods per side; orientations and
    base phases are spread with a golden-ratio lattice so no two cells
    look alike. Class identity never touches these tables: it only picks
    WHICH cells are textured.
    """
    qb = np.arange(n_cells * bands, dtype=np.float64)
    freqs = (2.0 + (qb % 4)).reshape(n_cells, bands)
    thetas = (np.pi * np.modf(_GOLDEN * (1.0 + qb))[0]).reshape(n_cells, bands)
    phases = (2.0 * np.pi * np.modf(_GOLDEN * (3.0 + qb))[0]).reshape(n_cells, bands)
    return freqs, thetas, phases


def generate_synthetic_archive(
    n_images: int,
    n_classes: int,
    bands: int,
    side: int,
    seed: int,
    noise_scale: float = 1.25,
    standardize: bool = True,
) -> list[ArchiveRecord]:
    """Layout-texture archive where only spatial arrangement carries class.

    Class k activates two of the four image quadrants (top row, bottom
    row, left column, right column); the other two hold pure noise. Each
    active quadrant gets a plane wave from a fixed per-(quadrant, band)
    table of frequency/orientation/phase that is identical for all
    classes, a per-image amplitude from U(0.8, 1.2), and a per-image
    phase jitter shared across bands (uniform on +-pi/3). Gaussian pixel
    noise with sigma = noise_scale covers everything; with
    standardize=True every band is then normalized to zero mean / unit
    variance.

    The construction separates the observers on purpose. Raw pixels of
    same-class images correlate (shared active cells, bounded jitter), so
    nearest-neighbor lookup on pixels beats chance. A randomly-initialized
    pooled encoder sees only weak per-region statistics (equal energy
    split, identical wave tables across classes), so its retrieval sits
    far below a trained one. A trained feature-predictive encoder must
    model position-conditioned content to predict masked tokens, which is
    exactly the class signal.

    Four quadrants admit six two-quadrant layouts, so at most 6 classes
    stay distinguishable. Classes are assigned round-robin (record i gets
    class i mod n_classes); labels are singleton sets {"class_k"}.
    Deterministic given the seed.
    """
    if n_classes < 2 or n_images < n_classes:
        raise ConfigError(
            [{"field": "n_images/n_classes",
              "message": f"need n_images >= n_classes >= 2, got {n_images}, {n_classes}"}]
        )
    if n_classes > len(_QUADRANT_PAIRS):
        raise ConfigError(
            [{"field": "n_classes",
              "message": f"layout family supports at most {len(_QUADRANT_PAIRS)} "
                         f"distinct classes, got {n_classes}"}]
        )
    if bands < 1 or side < 2:
        raise ConfigError(
            [{"field": "bands/side",
              "message": "bands must be positive and side at least 2"}]
        )
    rng = np.random.default_rng(seed)
    half = side // 2
    cells = (
        (slice(0, half), slice(0, half)),
        (slice(0, half), slice(half, side)),
        (slice(half, side), slice(0, half)),
        (slice(half, side), slice(half, side)),
    )
    freqs, thetas, phases = _quadrant_wave_tables(len(cells), bands)

    coords = np.arange(side) / side
    yy, xx = np.meshgrid(coords, coords, indexing="ij")

    records = []
    for i in range(n_images):
        k = i % n_classes
        layout = _QUADRANT_PAIRS[k]
        jitter = rng.uniform(-_PHASE_JITTER, _PHASE_JITTER)
        img = np.empty((bands, side, side))
        for b in range(bands):
            sig = rng.normal(0.0, noise_scale, size=(side, side))
            for q in layout:
                amp = rng.uniform(0.8, 1.2)
                u = 2.0 * np.pi * freqs[q, b] * (
                    xx * np.cos(thetas[q, b]) + yy * np.sin(thetas[q, b]))
                sig[cells[q]] += amp * np.sin(u + phases[q, b] + jitter)[cells[q]]
            if standardize:
                sig -= sig.mean()
                std = sig.std()
                sig /= std if std > 0 else 1.0
            img[b] = sig
        records.append(
            ArchiveRecord(id=f"syn{i:05d}", image=img, labels=frozenset({f"class_{k}"}))
        )
    return records


def standardize_archive(records: list[ArchiveRecord]) -> list[ArchiveRecord]:
    """Per-band standardization to zero mean / unit variance over the archive."""
    if not records:
        return records
    stack = np.stack([r.image for r in records])  # (N, C, H, W)
    mean = stack.mean(axis=(0, 2, 3), keepdims=True)
    std = stack.std(axis=(0, 2, 3), keepdims=True)
    std = np.where(std == 0.0, 1.0, std)
    stack = (stack - mean) / std
    return [
        ArchiveRecord(id=r.id, image=stack[i], labels=r.labels)
        for i, r in enumerate(records)
    ]


def split_archive(
    records: list[ArchiveRecord], n_eval: int
) -> tuple[list[ArchiveRecord], list[ArchiveRecord]]:
    """Deterministic train/eval split: the last n_eval records are held out.

    With round-robin class assignment the split stays balanced whenever
    n_eval is a multiple of n_classes.
    """
    if not 0 <= n_eval < len(records):
        raise ConfigError([{"field": "n_eval", "message": "must be in [0, len(records))"}])
    cut = len(records) - n_eval
    return records[:cut], records[cut:]


# --- raw-tensor archive format -------------------------------------------
#
# A directory holding `manifest.json`, an array of
#   {"id": str, "file": str, "labels": [str, ...]}
# plus one raw file per image: header of three little-endian uint32
# (C, H, W) followed by C*H*W little-endian float32 in band-major order.

_HEADER = struct.Struct("<III")


def write_image_raw(path: Path, image: np.ndarray) -> None:
    c, h, w = image.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(c, h, w))
        f.write(image.astype("<f4").tobytes())


def read_image_raw(path: Path, record_id: str = "?") -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise IngestionError(f"record {record_id}: {path} shorter than header")
    c, h, w = _HEADER.unpack_from(raw)
    expected = _HEADER.size + 4 * c * h * w
    if len(raw) != expected:
        raise IngestionError(
            f"record {record_id}: {path} has {len(raw)} bytes, expected {expected} "
            f"for shape ({c},{h},{w})"
        )
    img = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(c, h, w)
    return img.astype(np.float64)


def save_archive(records: list[ArchiveRecord], path: Path) -> None:
    """Write records to the manifest + raw-file format under `path`."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = []
    for r in records:
        fname = f"{r.id}.raw"
        write_image_raw(path / fname, r.image)
        manifest.append({"id": r.id, "file": fname, "labels": sorted(r.labels)})
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_archive(path: Path, standardize: bool = False) -> list[ArchiveRecord]:
    """Load an archive directory; rejects duplicate ids and non-finite pixels.

    Images come back exactly as stored (float32 precision); pass
    standardize=True to apply archive-level per-band standardization for
    raw archives that were never normalized.
    """
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise IngestionError(f"no manifest.json under {path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise IngestionError(f"manifest.json is not valid JSON: {e}") from e
    if not isinstance(manifest, list):
        raise IngestionError("manifest.json must be a JSON array of records")

    records = []
    seen = set()
    for entry in manifest:
        try:
            rid = entry["id"]
            fname = entry["file"]
            labels = frozenset(entry["labels"])
        except (TypeError, KeyError) as e:
            raise IngestionError(f"manifest entry {entry!r} missing field {e}") from e
        if rid in seen:
            raise IngestionError(f"record {rid}: duplicate id in manifest")
        seen.add(rid)
        img = read_image_raw(path / fname, record_id=rid)
        if not np.isfinite(img).all():
            raise IngestionError(f"record {rid}: non-finite pixel values")
        records.append(ArchiveRecord(id=rid, image=img, labels=labels))
    if standardize:
        records = standardize_archive(records)
    return records
