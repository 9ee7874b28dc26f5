"""Run configuration: a single schema-versioned JSON document that pins
every knob of a training-plus-evaluation run.

Validation is strict and total: unknown keys and out-of-range values are
collected across the whole document and reported together, one
field-level message each, rather than failing on the first problem.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

from .data import generate_synthetic_archive, split_archive
from .errors import ConfigError
from .losses import VicregConfig
from .masking import MaskConfig
from .model import EncoderConfig, PredictorConfig
from .training import TrainConfig

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class DataConfig:
    n_images: int = 640
    n_classes: int = 4
    bands: int = 2
    side: int = 32
    n_eval: int = 128
    noise_scale: float = 1.5
    standardize: bool = True

    def __post_init__(self):
        bad = []
        if self.n_images < 2:
            bad.append({"field": "data.n_images", "message": "must be >= 2"})
        if self.n_classes < 1:
            bad.append({"field": "data.n_classes", "message": "must be >= 1"})
        if self.bands < 1:
            bad.append({"field": "data.bands", "message": "must be >= 1"})
        if self.side < 1:
            bad.append({"field": "data.side", "message": "must be >= 1"})
        if not 0 < self.n_eval < self.n_images:
            bad.append({"field": "data.n_eval",
                        "message": "must satisfy 0 < n_eval < n_images"})
        if self.noise_scale < 0:
            bad.append({"field": "data.noise_scale", "message": "must be >= 0"})
        if bad:
            raise ConfigError(bad)


@dataclass(frozen=True)
class RetrievalConfig:
    metric: str = "euclidean"
    k: int = 10
    which: str = "target"

    def __post_init__(self):
        bad = []
        if self.metric not in ("euclidean", "cosine"):
            bad.append({"field": "retrieval.metric",
                        "message": "must be 'euclidean' or 'cosine'"})
        if self.k < 1:
            bad.append({"field": "retrieval.k", "message": "must be >= 1"})
        if self.which not in ("target", "context"):
            bad.append({"field": "retrieval.which",
                        "message": "must be 'target' or 'context'"})
        if bad:
            raise ConfigError(bad)


@dataclass(frozen=True)
class RunConfig:
    schema_version: int
    seed: int
    data: DataConfig
    encoder: EncoderConfig
    predictor: PredictorConfig
    train: TrainConfig          # carries mask, vicreg, and the seed
    retrieval: RetrievalConfig


# JSON section layout: section name -> (field name -> default). The mask
# section's seed and the train section's mask/vicreg/seed are composed
# from the top-level seed, not spelled in the file.
_SECTION_FIELDS = {
    "data": DataConfig(),
    "encoder": EncoderConfig(),
    "predictor": PredictorConfig(),
    "retrieval": RetrievalConfig(),
}
_MASK_DEFAULTS = {
    "strategy": "random_disjoint",
    "target_ratio": 0.25,
    "n_target_groups": None,
    "block_scale": (0.05, 0.15),
    "block_aspect": (0.75, 1.5),
}
_VICREG_DEFAULTS = {k: v for k, v in asdict(VicregConfig()).items()}
_TRAIN_DEFAULTS = {
    k: v for k, v in asdict(TrainConfig()).items()
    if k not in ("mask", "vicreg", "seed")
}
_TOP_KEYS = ("schema_version", "seed", "data", "encoder", "predictor",
             "mask", "vicreg", "train", "retrieval")


def _check_value(section: str, key: str, value, default, violations) -> object:
    """Type-check one scalar against its default's type; None means 'keep'."""
    where = f"{section}.{key}"
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            violations.append({"field": where, "message": "expected a boolean"})
            return default
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            violations.append({"field": where, "message": "expected an integer"})
            return default
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            violations.append({"field": where, "message": "expected a number"})
            return default
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            violations.append({"field": where, "message": "expected a string"})
            return default
        return value
    if isinstance(default, tuple):
        if (not isinstance(value, (list, tuple)) or len(value) != 2
                or any(isinstance(v, bool) or not isinstance(v, (int, float))
                       for v in value)):
            violations.append({"field": where,
                               "message": "expected a pair of numbers"})
            return default
        return (float(value[0]), float(value[1]))
    return value


def _merge_section(name: str, defaults: dict, given, violations) -> dict:
    out = dict(defaults)
    if given is None:
        return out
    if not isinstance(given, dict):
        violations.append({"field": name, "message": "expected an object"})
        return out
    for key, value in given.items():
        if key not in defaults:
            violations.append({"field": f"{name}.{key}",
                               "message": "unknown key"})
            continue
        out[key] = _check_value(name, key, value, defaults[key], violations)
    return out


def build_run_config(doc: dict) -> RunConfig:
    """Validate a parsed JSON document, collecting every violation."""
    violations: list[dict] = []
    if not isinstance(doc, dict):
        raise ConfigError([{"field": "$", "message": "top level must be an object"}])
    for key in doc:
        if key not in _TOP_KEYS:
            violations.append({"field": key, "message": "unknown key"})
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        violations.append({"field": "schema_version",
                           "message": f"must be {SCHEMA_VERSION}, got {version!r}"})
    seed = doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        violations.append({"field": "seed",
                           "message": "must be a non-negative integer"})
        seed = 0

    sections: dict[str, dict] = {}
    for name, proto in _SECTION_FIELDS.items():
        sections[name] = _merge_section(name, asdict(proto), doc.get(name),
                                        violations)
    mask_d = _merge_section("mask", _MASK_DEFAULTS, doc.get("mask"), violations)
    vic_d = _merge_section("vicreg", _VICREG_DEFAULTS, doc.get("vicreg"),
                           violations)
    train_d = _merge_section("train", _TRAIN_DEFAULTS, doc.get("train"),
                             violations)

    def build(factory, kwargs):
        try:
            return factory(**kwargs)
        except ConfigError as e:
            violations.extend(e.violations)
            return None

    data = build(DataConfig, sections["data"])
    encoder = build(EncoderConfig, sections["encoder"])
    predictor = build(PredictorConfig, sections["predictor"])
    retrieval = build(RetrievalConfig, sections["retrieval"])
    mask = build(MaskConfig, {**mask_d, "seed": seed})
    vicreg = build(VicregConfig, vic_d)
    train = None
    if mask is not None and vicreg is not None:
        train = build(TrainConfig, {**train_d, "seed": seed, "mask": mask,
                                    "vicreg": vicreg})

    # cross-section constraints
    if data is not None and encoder is not None:
        if encoder.input_bands != data.bands:
            violations.append({"field": "encoder.input_bands",
                               "message": f"must equal data.bands ({data.bands})"})
        if data.side % encoder.patch_size != 0:
            violations.append({"field": "encoder.patch_size",
                               "message": f"must divide data.side ({data.side})"})
    if data is not None and train is not None:
        if data.n_images - data.n_eval < train.batch_size:
            violations.append({
                "field": "train.batch_size",
                "message": f"exceeds training split size "
                           f"({data.n_images - data.n_eval})",
            })
    if data is not None and retrieval is not None:
        if retrieval.k >= data.n_images:
            violations.append({"field": "retrieval.k",
                               "message": "must be < data.n_images "
                                          "(self-exclusion needs k <= N-1)"})

    if violations:
        raise ConfigError(violations)
    return RunConfig(schema_version=SCHEMA_VERSION, seed=seed, data=data,
                     encoder=encoder, predictor=predictor, train=train,
                     retrieval=retrieval)


def default_run_config() -> RunConfig:
    # Training recipe tuned for the desk-scale default archive: smaller
    # batches buy more optimizer steps per epoch, a flat weight-decay
    # schedule and a lower starting teacher momentum suit the short run.
    # Schedule-endpoint defaults on TrainConfig itself are reference
    # values and stay untouched.
    return build_run_config({
        "schema_version": SCHEMA_VERSION,
        "train": {"batch_size": 16, "warmup_epochs": 10,
                  "wd_final": 0.04, "ema_init": 0.99},
    })


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as e:
        raise ConfigError([{"field": "$file",
                            "message": f"cannot read {path}: {e}"}]) from e
    except json.JSONDecodeError as e:
        raise ConfigError([{"field": "$file",
                            "message": f"invalid JSON in {path}: {e}"}]) from e
    return build_run_config(doc)


def run_config_to_dict(run: RunConfig) -> dict:
    """Canonical JSON-shaped dict (inverse of build_run_config)."""
    train = asdict(run.train)
    mask = train.pop("mask")
    vicreg = train.pop("vicreg")
    train.pop("seed")
    mask.pop("seed")
    mask["block_scale"] = list(mask["block_scale"])
    mask["block_aspect"] = list(mask["block_aspect"])
    return {
        "schema_version": run.schema_version,
        "seed": run.seed,
        "data": asdict(run.data),
        "encoder": asdict(run.encoder),
        "predictor": asdict(run.predictor),
        "mask": mask,
        "vicreg": vicreg,
        "train": train,
        "retrieval": asdict(run.retrieval),
    }


def archive_from_config(data: DataConfig, seed: int):
    """Generate the synthetic archive and return (all, train, eval) records."""
    records = generate_synthetic_archive(
        n_images=data.n_images, n_classes=data.n_classes, bands=data.bands,
        side=data.side, seed=seed, noise_scale=data.noise_scale,
        standardize=data.standardize,
    )
    train, eval_ = split_archive(records, data.n_eval)
    return records, train, eval_
