"""Scripted ablation matrix over the four studied axes: predictor depth,
masking strategy, masking ratio, and the variance/covariance regularizer.

Each (setting, trial) pair is one full training run followed by retrieval
evaluation. Trials within a setting differ only in seed; settings differ
only in the swept field. Failed trials are warned about and excluded from
the summary, never silently dropped.
"""

from __future__ import annotations

import csv
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig, archive_from_config, build_run_config, \
    run_config_to_dict
from .data import ArchiveRecord, split_archive
from .errors import ConfigError
from .retrieval import build_index, evaluate_archive
from .training import fit

AXES = ("predictor_depth", "masking_strategy", "masking_ratio", "vicreg")


@dataclass(frozen=True)
class AblationSpec:
    axis: str
    values: tuple
    base: RunConfig
    trials: int = 3

    def __post_init__(self):
        bad = []
        if self.axis not in AXES:
            bad.append({"field": "ablation.axis",
                        "message": f"must be one of {AXES}"})
        if not self.values:
            bad.append({"field": "ablation.values", "message": "must be non-empty"})
        if self.trials < 1:
            bad.append({"field": "ablation.trials", "message": "must be >= 1"})
        if bad:
            raise ConfigError(bad)


def apply_setting(base: RunConfig, axis: str, value, seed: int) -> RunConfig:
    """Substitute one swept value (and the trial seed) into a run config.

    Goes through the JSON form so the combined document is revalidated.
    """
    doc = run_config_to_dict(base)
    doc["seed"] = seed
    if axis == "predictor_depth":
        doc["predictor"]["depth"] = value
    elif axis == "masking_ratio":
        doc["mask"]["target_ratio"] = value
    elif axis == "masking_strategy":
        doc["mask"]["strategy"] = value
        doc["mask"]["n_target_groups"] = None  # re-resolve per strategy
    elif axis == "vicreg":
        if _vicreg_off(value):
            doc["vicreg"]["lambda_v"] = 0.0
            doc["vicreg"]["lambda_c"] = 0.0
            doc["vicreg"]["lambda_i"] = 0.0
    else:
        raise ConfigError([{"field": "ablation.axis",
                            "message": f"unknown axis {axis!r}"}])
    return build_run_config(doc)


def _vicreg_off(value) -> bool:
    if isinstance(value, str):
        return value.lower() in ("off", "false", "0", "no")
    return not bool(value)


def setting_label(axis: str, value) -> str:
    if axis == "vicreg":
        return "off" if _vicreg_off(value) else "on"
    return str(value)


def train_and_evaluate(run: RunConfig, records: list[ArchiveRecord] | None = None,
                       out_dir: str | None = None, quiet: bool = True) -> dict:
    """One full run: train on the train split, index the whole archive,
    query every eval record with self-exclusion."""
    if records is None:
        records, train_recs, eval_recs = archive_from_config(run.data, run.seed)
    else:
        train_recs, eval_recs = split_archive(records, run.data.n_eval)
    state = fit(run.encoder, run.predictor, run.train, train_recs,
                out_dir=out_dir, quiet=quiet,
                extra_meta=run_config_to_dict(run))
    index = build_index(state.model, records, metric=run.retrieval.metric,
                        which=run.retrieval.which)
    evaluation = evaluate_archive(state.model, index, eval_recs,
                                  k=run.retrieval.k, which=run.retrieval.which)
    return {"state": state, "index": index, "evaluation": evaluation,
            "mean_f1": evaluation["mean_f1"]}


@dataclass
class AblationRow:
    setting: str
    mean_f1: float
    std: float
    n_trials: int
    scores: tuple[float, ...]


@dataclass
class AblationResult:
    axis: str
    rows: list[AblationRow]
    failures: list[dict] = field(default_factory=list)

    def ranked(self) -> list[AblationRow]:
        return sorted(self.rows, key=lambda r: -r.mean_f1)


def run_ablation(spec: AblationSpec, records: list[ArchiveRecord],
                 out_dir: str | None = None, quiet: bool = True) -> AblationResult:
    """|values| x trials training runs; summary row per setting."""
    rows = []
    failures = []
    for value in spec.values:
        label = setting_label(spec.axis, value)
        scores = []
        for trial in range(spec.trials):
            seed = spec.base.seed + trial
            run_dir = None
            if out_dir is not None:
                run_dir = os.path.join(out_dir,
                                       f"{spec.axis}_{label}_t{trial}")
            try:
                run = apply_setting(spec.base, spec.axis, value, seed)
                result = train_and_evaluate(run, records=records,
                                            out_dir=run_dir, quiet=quiet)
                scores.append(result["mean_f1"])
            except Exception as e:  # record and move on, never hide
                failures.append({"setting": label, "trial": trial,
                                 "error": f"{type(e).__name__}: {e}"})
                warnings.warn(f"ablation run {label} trial {trial} failed: {e}")
        n = len(scores)
        mean = float(np.mean(scores)) if n else float("nan")
        std = float(np.std(scores, ddof=1)) if n >= 2 else 0.0
        rows.append(AblationRow(setting=label, mean_f1=mean, std=std,
                                n_trials=n, scores=tuple(scores)))
    result = AblationResult(axis=spec.axis, rows=rows, failures=failures)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_ablation_csv(result,
                           os.path.join(out_dir, f"ablation_{spec.axis}.csv"))
    return result


def write_ablation_csv(result: AblationResult, path: str) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["setting", "mean_f1", "std", "n_trials"])
            for row in result.ranked():
                writer.writerow([row.setting, f"{row.mean_f1:.6f}",
                                 f"{row.std:.6f}", row.n_trials])
    except OSError as e:
        raise OSError(f"cannot write ablation table {path}: {e}") from e
