"""Optimization loop: schedules, decoupled-weight-decay Adam, EMA ramp,
checkpointing, and collapse/divergence monitoring.

All three schedules are per-step and written as convex combinations
u*b + (1-u)*a so their endpoints are exact in floating point. The target
encoder never enters the optimizer registry; it moves only through
`model.ema_update`. Checkpoints are .npz containers with a JSON metadata
member and round-trip bit-exactly, including generator states, so an
interrupted run resumed at an epoch boundary reproduces the uninterrupted
run bit for bit.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import model as model_mod
from .data import ArchiveRecord, tokenize_batch
from .errors import ConfigError, ContractError, DivergenceError
from .losses import VicregConfig, covariance_term
from .masking import MaskConfig, sample_batch
from .model import (EncoderConfig, ModelState, PredictorConfig, ema_update,
                    init_model, step_backward, step_forward)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    lr_init: float = 1e-4
    lr_peak: float = 1e-3
    lr_final: float = 1e-6
    warmup_epochs: int = 15
    wd_init: float = 0.04
    wd_final: float = 0.4
    ema_init: float = 0.996
    seed: int = 0
    mask: MaskConfig = field(default_factory=MaskConfig)
    vicreg: VicregConfig = field(default_factory=VicregConfig)

    def __post_init__(self):
        bad = []
        if self.epochs < 1:
            bad.append({"field": "train.epochs", "message": "must be >= 1"})
        if self.batch_size < 2:
            bad.append({"field": "train.batch_size",
                        "message": "must be >= 2 (batch statistics need n >= 2)"})
        if not (self.lr_init > 0 and self.lr_peak >= self.lr_init):
            bad.append({"field": "train.lr_peak",
                        "message": "need lr_peak >= lr_init > 0"})
        if self.lr_final > self.lr_peak:
            bad.append({"field": "train.lr_final",
                        "message": "must be <= lr_peak"})
        if not 0.0 <= self.ema_init <= 1.0:
            bad.append({"field": "train.ema_init", "message": "must be in [0, 1]"})
        if self.warmup_epochs < 0 or self.warmup_epochs > self.epochs:
            bad.append({"field": "train.warmup_epochs",
                        "message": "must satisfy 0 <= warmup_epochs <= epochs"})
        if self.wd_init < 0 or self.wd_final < 0:
            bad.append({"field": "train.wd_init", "message": "must be >= 0"})
        if bad:
            raise ConfigError(bad)


# --- schedules ---------------------------------------------------------------


def warmup_steps(config: TrainConfig, total_steps: int) -> int:
    return round(total_steps * config.warmup_epochs / config.epochs)


def lr_schedule(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warmup to the peak, then half-cosine decay to the floor."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    warm = warmup_steps(config, total_steps)
    if step < warm:
        u = step / warm
        return (1.0 - u) * config.lr_init + u * config.lr_peak
    if step >= total_steps:
        return config.lr_final
    span = total_steps - warm
    progress = (step - warm) / span
    w = 0.5 * (1.0 + math.cos(math.pi * progress))
    return w * config.lr_peak + (1.0 - w) * config.lr_final


def wd_schedule(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear ramp across the whole run."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    u = step / total_steps
    return (1.0 - u) * config.wd_init + u * config.wd_final


def ema_schedule(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear ramp from the initial momentum to 1."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    u = step / total_steps
    return (1.0 - u) * config.ema_init + u * 1.0


# --- optimizer ---------------------------------------------------------------


def trainable_params(model: ModelState) -> dict[str, np.ndarray]:
    """Optimizer registry: context encoder, predictor, mask token.

    The target encoder is deliberately absent; it is updated only by EMA.
    """
    reg = {f"ctx.{k}": v for k, v in model.ctx.items()}
    reg.update({f"pred.{k}": v for k, v in model.pred.items()})
    reg["mask_token"] = model.mask_token
    return reg


def init_opt_state(model: ModelState) -> dict[str, dict[str, np.ndarray]]:
    return {k: {"m": np.zeros_like(v), "v": np.zeros_like(v)}
            for k, v in trainable_params(model).items()}


def adamw_update(params: dict[str, np.ndarray],
                 grads: dict[str, np.ndarray],
                 opt: dict[str, dict[str, np.ndarray]],
                 lr: float, wd: float, t: int) -> None:
    """In-place decoupled-weight-decay adaptive-moment update; t is 1-based."""
    if params.keys() != grads.keys():
        missing = sorted(set(params) ^ set(grads))
        raise ContractError(f"gradient registry mismatch: {missing}")
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for k, p in params.items():
        g = grads[k]
        st = opt[k]
        st["m"] *= ADAM_BETA1
        st["m"] += (1.0 - ADAM_BETA1) * g
        st["v"] *= ADAM_BETA2
        st["v"] += (1.0 - ADAM_BETA2) * (g * g)
        mhat = st["m"] / c1
        vhat = st["v"] / c2
        p -= lr * (mhat / (np.sqrt(vhat) + ADAM_EPS) + wd * p)


def flatten_grads(grads: dict) -> dict[str, np.ndarray]:
    flat = {f"ctx.{k}": v for k, v in grads["ctx"].items()}
    flat.update({f"pred.{k}": v for k, v in grads["pred"].items()})
    flat["mask_token"] = grads["mask_token"]
    return flat


# --- train state -------------------------------------------------------------


@dataclass
class TrainState:
    model: ModelState
    config: TrainConfig
    opt: dict[str, dict[str, np.ndarray]]
    step: int
    epoch: int
    total_steps: int
    data_rng: np.random.Generator
    mask_rng: np.random.Generator
    history: list[dict] = field(default_factory=list)
    extra_meta: dict = field(default_factory=dict)  # free-form, checkpointed


def init_train_state(encoder: EncoderConfig, predictor: PredictorConfig,
                     config: TrainConfig, side: int, steps_per_epoch: int,
                     extra_meta: dict | None = None) -> TrainState:
    model = model_mod.model_for_archive(encoder, predictor, side, config.seed)
    return TrainState(
        model=model,
        config=config,
        opt=init_opt_state(model),
        step=0,
        epoch=0,
        total_steps=config.epochs * steps_per_epoch,
        data_rng=np.random.default_rng([config.seed, 1]),
        mask_rng=np.random.default_rng([config.seed, 2]),
        extra_meta=dict(extra_meta or {}),
    )


def collapse_monitor(embeddings: np.ndarray) -> dict[str, float]:
    """Diagnostics only: mean per-dim std, off-diagonal covariance mass,
    and effective rank = exp(entropy of normalized singular values)."""
    z = np.asarray(embeddings, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ContractError("collapse_monitor needs an (n >= 2, d) matrix")
    mean_std = float(np.std(z, axis=0, ddof=1).mean())
    offdiag = covariance_term(z)
    s = np.linalg.svd(z, compute_uv=False)
    total = s.sum()
    if total == 0.0:
        eff_rank = 1.0  # zero matrix: treat as the fully degenerate case
    else:
        p = s / total
        p = p[p > 0]
        eff_rank = float(np.exp(-(p * np.log(p)).sum()))
    return {"mean_std": mean_std, "offdiag_cov_mass": offdiag,
            "eff_rank": eff_rank}


def _step_on_tokens(state: TrainState, tokens: np.ndarray) -> dict:
    cfg = state.config
    t = state.step
    lr = lr_schedule(t, state.total_steps, cfg)
    wd = wd_schedule(t, state.total_steps, cfg)
    m = ema_schedule(t, state.total_steps, cfg)

    masks = sample_batch(tokens.shape[0], state.model.n_tokens,
                         tuple(state.model.grid), cfg.mask, state.mask_rng)
    last = state.history[-1] if state.history else None
    try:
        fwd = step_forward(state.model, tokens, masks, cfg.vicreg,
                           with_cache=True)
    except DivergenceError as e:
        raise DivergenceError(f"step {t}: {e}", last_metrics=last) from e
    if not math.isfinite(fwd.total):
        raise DivergenceError(
            f"non-finite loss at step {t}: total={fwd.total}", last_metrics=last
        )
    grads = flatten_grads(step_backward(state.model, fwd))
    adamw_update(trainable_params(state.model), grads, state.opt, lr, wd, t + 1)
    state.model.tgt = ema_update(state.model.tgt, state.model.ctx, m)

    diag = collapse_monitor(fwd.pooled_ctx)
    metrics = {
        "step": t,
        "epoch": state.epoch,
        "lr": lr,
        "wd": wd,
        "ema_m": m,
        "L_pred": fwd.loss_pred,
        "v": fwd.vicreg_parts["v"],
        "c": fwd.vicreg_parts["c"],
        "L_inv": fwd.vicreg_parts["inv"],
        "total": fwd.total,
        "embed_std": diag["mean_std"],
        "eff_rank": diag["eff_rank"],
    }
    state.step = t + 1
    state.history.append(metrics)
    return metrics


def train_step(state: TrainState, batch: list[ArchiveRecord]) -> dict:
    """One optimization step on a batch of records; mutates `state`."""
    if not batch:
        raise ContractError("empty batch")
    images = np.stack([r.image for r in batch])
    tokens = tokenize_batch(images, state.model.encoder.patch_size)
    return _step_on_tokens(state, tokens)


# --- checkpointing -----------------------------------------------------------


def _rng_state(gen: np.random.Generator) -> dict:
    return gen.bit_generator.state


def _restore_rng(saved: dict) -> np.random.Generator:
    gen = np.random.default_rng()
    gen.bit_generator.state = saved
    return gen


def _config_echo(state: TrainState) -> dict:
    return {
        "encoder": asdict(state.model.encoder),
        "predictor": asdict(state.model.predictor),
        "grid": list(state.model.grid),
        "train": asdict(state.config),
    }


def save_checkpoint(state: TrainState, path: str) -> None:
    """Write the full training state; the round trip is bit-exact."""
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "step": state.step,
        "epoch": state.epoch,
        "total_steps": state.total_steps,
        "config": _config_echo(state),
        "extra": state.extra_meta,
        "rng": {"data": _rng_state(state.data_rng),
                "mask": _rng_state(state.mask_rng)},
    }
    arrays: dict[str, np.ndarray] = {}
    for k, v in state.model.ctx.items():
        arrays[f"ctx:{k}"] = v
    for k, v in state.model.tgt.items():
        arrays[f"tgt:{k}"] = v
    for k, v in state.model.pred.items():
        arrays[f"pred:{k}"] = v
    arrays["mask_token"] = state.model.mask_token
    arrays["pos_embed"] = state.model.pos_embed
    for k, mv in state.opt.items():
        arrays[f"opt:{k}:m"] = mv["m"]
        arrays[f"opt:{k}:v"] = mv["v"]
    arrays["meta"] = np.array(json.dumps(meta))
    tmp = path + ".tmp"
    try:
        with open(tmp, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except OSError as e:
        raise OSError(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path: str) -> TrainState:
    try:
        data = np.load(path, allow_pickle=False)
    except OSError as e:
        raise OSError(f"cannot read checkpoint {path}: {e}") from e
    with data:
        meta = json.loads(str(data["meta"][()]))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ConfigError([{
                "field": "checkpoint",
                "message": f"unsupported format_version {meta.get('format_version')}",
            }])
        cfg = meta["config"]
        encoder = EncoderConfig(**cfg["encoder"])
        predictor = PredictorConfig(**cfg["predictor"])
        tcfg_raw = dict(cfg["train"])
        mask_raw = dict(tcfg_raw.pop("mask"))
        for k in ("block_scale", "block_aspect"):
            mask_raw[k] = tuple(mask_raw[k])
        vic_raw = tcfg_raw.pop("vicreg")
        tcfg = TrainConfig(mask=MaskConfig(**mask_raw),
                           vicreg=VicregConfig(**vic_raw), **tcfg_raw)
        ctx = {k[len("ctx:"):]: data[k] for k in data.files if k.startswith("ctx:")}
        tgt = {k[len("tgt:"):]: data[k] for k in data.files if k.startswith("tgt:")}
        prd = {k[len("pred:"):]: data[k] for k in data.files if k.startswith("pred:")}
        model = ModelState(
            encoder=encoder, predictor=predictor, grid=tuple(cfg["grid"]),
            ctx=ctx, tgt=tgt, pred=prd,
            mask_token=data["mask_token"], pos_embed=data["pos_embed"],
        )
        opt = {}
        for k in data.files:
            if k.startswith("opt:") and k.endswith(":m"):
                name = k[len("opt:"):-len(":m")]
                opt[name] = {"m": data[k], "v": data[f"opt:{name}:v"]}
        return TrainState(
            model=model, config=tcfg, opt=opt,
            step=int(meta["step"]), epoch=int(meta["epoch"]),
            total_steps=int(meta["total_steps"]),
            data_rng=_restore_rng(meta["rng"]["data"]),
            mask_rng=_restore_rng(meta["rng"]["mask"]),
            extra_meta=meta.get("extra", {}),
        )


# --- fit ---------------------------------------------------------------------


def fit(encoder: EncoderConfig, predictor: PredictorConfig, config: TrainConfig,
        records: list[ArchiveRecord], out_dir: str | None = None,
        resume_from: str | None = None, checkpoint_every: int = 1,
        quiet: bool = True, extra_meta: dict | None = None) -> TrainState:
    """Epoch loop over a training archive.

    Shuffles with a seeded generator each epoch, drops the trailing partial
    batch, checkpoints every `checkpoint_every` epochs (rolling
    checkpoint.npz) plus final.npz, and appends one JSON line of metrics
    per step to out_dir/metrics.ndjson. Resuming from a checkpoint written
    at an epoch boundary continues bit-exactly.
    """
    if not records:
        raise ConfigError([{"field": "archive", "message": "no training records"}])
    steps_per_epoch = len(records) // config.batch_size
    if steps_per_epoch < 1:
        raise ConfigError([{
            "field": "train.batch_size",
            "message": f"batch_size {config.batch_size} exceeds archive size "
                       f"{len(records)}",
        }])
    side = records[0].image.shape[1]

    if resume_from is not None:
        state = load_checkpoint(resume_from)
        expect = {"encoder": asdict(encoder), "predictor": asdict(predictor),
                  "train": asdict(config)}
        echo = _config_echo(state)
        expect = json.loads(json.dumps(expect))
        got = json.loads(json.dumps({k: echo[k] for k in expect}))
        if expect != got:
            raise ConfigError([{"field": "resume",
                                "message": "checkpoint config does not match"}])
    else:
        state = init_train_state(encoder, predictor, config, side,
                                 steps_per_epoch, extra_meta=extra_meta)

    images = np.stack([r.image for r in records])
    tokens_all = tokenize_batch(images, encoder.patch_size)

    metrics_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_fh = open(os.path.join(out_dir, "metrics.ndjson"),
                          "a", encoding="utf-8")
    try:
        while state.epoch < config.epochs:
            perm = state.data_rng.permutation(len(records))
            for b in range(steps_per_epoch):
                rows = perm[b * config.batch_size:(b + 1) * config.batch_size]
                metrics = _step_on_tokens(state, tokens_all[rows])
                if metrics_fh is not None:
                    metrics_fh.write(json.dumps(metrics) + "\n")
                if not quiet and state.step % 50 == 0:
                    print(f"step {metrics['step']}: total={metrics['total']:.6f} "
                          f"L_pred={metrics['L_pred']:.6f}")
            state.epoch += 1
            if out_dir is not None and (state.epoch % checkpoint_every == 0
                                        or state.epoch == config.epochs):
                if metrics_fh is not None:
                    metrics_fh.flush()
                save_checkpoint(state, os.path.join(out_dir, "checkpoint.npz"))
        if out_dir is not None:
            save_checkpoint(state, os.path.join(out_dir, "final.npz"))
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return state
