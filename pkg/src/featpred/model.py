"""The three networks and the differentiable training step.

A `ModelState` owns the context-encoder parameters (trained by gradient),
the target-encoder parameters (an EMA shadow of the context encoder, never
touched by the optimizer), the predictor parameters, the shared learnable
mask token, and a fixed 2-D sine/cosine positional table over the patch
grid. The predictor conditions each masked position purely on that
positional signal: mask token + projected positional row.

`step_forward`/`step_backward` implement the full training graph
(context encode -> predict targets -> prediction loss + VICReg on pooled
embeddings) with hand-written gradients. Forward passes are pure; only the
optimizer mutates parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import PatchSequence, patchify, tokenize_batch
from .errors import ConfigError, ContractError
from .losses import VicregConfig, total_loss, vicreg_loss, vicreg_loss_grads
from .masking import MaskPair


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 64
    depth: int = 4
    n_heads: int = 4
    patch_size: int = 8
    mlp_ratio: float = 4.0
    input_bands: int = 2

    def __post_init__(self):
        bad = []
        if self.embed_dim < 4 or self.embed_dim % 4 != 0:
            bad.append({"field": "encoder.embed_dim",
                        "message": "must be a positive multiple of 4 (2-D sincos table)"})
        elif self.n_heads < 1 or self.embed_dim % self.n_heads != 0:
            bad.append({"field": "encoder.n_heads",
                        "message": "embed_dim must be divisible by n_heads"})
        if self.depth < 0:
            bad.append({"field": "encoder.depth", "message": "must be >= 0"})
        if self.patch_size < 1:
            bad.append({"field": "encoder.patch_size", "message": "must be >= 1"})
        if self.input_bands < 1:
            bad.append({"field": "encoder.input_bands", "message": "must be >= 1"})
        if bad:
            raise ConfigError(bad)

    @property
    def token_dim(self) -> int:
        return self.input_bands * self.patch_size ** 2


@dataclass(frozen=True)
class PredictorConfig:
    embed_dim: int = 32
    depth: int = 4
    n_heads: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        bad = []
        if self.embed_dim < 1:
            bad.append({"field": "predictor.embed_dim", "message": "must be >= 1"})
        elif self.n_heads < 1 or self.embed_dim % self.n_heads != 0:
            bad.append({"field": "predictor.n_heads",
                        "message": "embed_dim must be divisible by n_heads"})
        if self.depth < 0:
            bad.append({"field": "predictor.depth", "message": "must be >= 0"})
        if bad:
            raise ConfigError(bad)


@dataclass
class ModelState:
    encoder: EncoderConfig
    predictor: PredictorConfig
    grid: tuple[int, int]
    ctx: dict[str, np.ndarray]          # context encoder, gradient-trained
    tgt: dict[str, np.ndarray]          # target encoder, EMA shadow only
    pred: dict[str, np.ndarray]         # predictor
    mask_token: np.ndarray              # shared, predictor width, trained
    pos_embed: np.ndarray               # fixed (n_tokens, embed_dim) buffer

    @property
    def n_tokens(self) -> int:
        return self.grid[0] * self.grid[1]


@dataclass(frozen=True)
class TokenEmbeddings:
    vectors: np.ndarray   # (n_selected, d)
    index_map: np.ndarray  # token index per row


def init_model(
    encoder: EncoderConfig,
    predictor: PredictorConfig,
    grid: tuple[int, int],
    seed: int = 0,
) -> ModelState:
    """Fresh model; the target encoder starts as an exact copy of the context one."""
    rng = np.random.default_rng(seed)
    ctx = nn.init_encoder_params(
        rng, encoder.token_dim, encoder.embed_dim, encoder.depth, encoder.mlp_ratio
    )
    pred = nn.init_predictor_params(
        rng, encoder.embed_dim, predictor.embed_dim, predictor.depth,
        predictor.n_heads, predictor.mlp_ratio,
    )
    mask_token = nn.trunc_normal(rng, (predictor.embed_dim,), 0.02)
    pos = nn.sincos_pos_embed_2d(encoder.embed_dim, grid[0], grid[1])
    tgt = {k: v.copy() for k, v in ctx.items()}
    return ModelState(encoder=encoder, predictor=predictor, grid=grid,
                      ctx=ctx, tgt=tgt, pred=pred,
                      mask_token=mask_token, pos_embed=pos)


def model_for_archive(encoder, predictor, side: int, seed: int = 0) -> ModelState:
    p = encoder.patch_size
    if side % p != 0:
        raise ConfigError([{"field": "encoder.patch_size",
                            "message": f"image side {side} not divisible by patch {p}"}])
    return init_model(encoder, predictor, (side // p, side // p), seed)


def _check_indices(indices: np.ndarray, n_tokens: int, what: str) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise ContractError(f"{what} is empty")
    if indices.min() < 0 or indices.max() >= n_tokens:
        raise ContractError(f"{what} index out of range for {n_tokens} tokens")
    return indices


def encode_context(state: ModelState, patches: PatchSequence,
                   context_indices) -> TokenEmbeddings:
    """Embed only the visible tokens; masked tokens never enter attention."""
    idx = _check_indices(context_indices, state.n_tokens, "context")
    tokens = patches.tokens[idx][None]           # (1, S, token_dim)
    pos = state.pos_embed[idx]
    out, _ = nn.encoder_fwd(state.ctx, tokens, pos,
                            state.encoder.depth, state.encoder.n_heads,
                            with_cache=False)
    return TokenEmbeddings(vectors=out[0], index_map=idx)


def encode_target(state: ModelState, patches: PatchSequence) -> TokenEmbeddings:
    """Embed the full token sequence through the EMA target encoder."""
    tokens = patches.tokens[None]
    out, _ = nn.encoder_fwd(state.tgt, tokens, state.pos_embed,
                            state.encoder.depth, state.encoder.n_heads,
                            with_cache=False)
    return TokenEmbeddings(vectors=out[0],
                           index_map=np.arange(state.n_tokens, dtype=np.int64))


def select_tokens(emb: TokenEmbeddings, indices) -> TokenEmbeddings:
    """Rows of `emb` at the given token indices (e.g. one target group)."""
    indices = np.asarray(indices, dtype=np.int64)
    lookup = {int(t): r for r, t in enumerate(emb.index_map)}
    try:
        rows = np.array([lookup[int(i)] for i in indices])
    except KeyError as e:
        raise ContractError(f"token {e} not present in embeddings") from e
    return TokenEmbeddings(vectors=emb.vectors[rows], index_map=indices)


def predict_targets(state: ModelState, context: TokenEmbeddings,
                    target_groups) -> list[TokenEmbeddings]:
    """One predictor application per target group, conditioned on mask tokens."""
    if context.vectors.shape[0] == 0:
        raise ContractError("context is empty")
    out = []
    for group in target_groups:
        idx = _check_indices(group, state.n_tokens, "target group")
        preds, _ = nn.predictor_fwd(
            state.pred, state.mask_token, context.vectors[None],
            state.pos_embed[idx], state.predictor.depth, state.predictor.n_heads,
            with_cache=False,
        )
        out.append(TokenEmbeddings(vectors=preds[0], index_map=idx))
    return out


def ema_update(target_params: dict[str, np.ndarray],
               context_params: dict[str, np.ndarray],
               momentum: float) -> dict[str, np.ndarray]:
    """theta' <- m * theta' + (1 - m) * theta, elementwise; returns new arrays.

    The m == 0 and m == 1 branches and the increment form keep the three
    fixed-point contracts (full copy, no-op, equal inputs) exact in floating
    point.
    """
    if not 0.0 <= momentum <= 1.0:
        raise ContractError(f"momentum must be in [0, 1], got {momentum}")
    if target_params.keys() != context_params.keys():
        raise ContractError("parameter sets differ")
    for k in target_params:
        if target_params[k].shape != context_params[k].shape:
            raise ContractError(f"shape mismatch for {k}")
    if momentum == 0.0:
        return {k: v.copy() for k, v in context_params.items()}
    if momentum == 1.0:
        return {k: v.copy() for k, v in target_params.items()}
    one_minus = 1.0 - momentum
    return {
        k: target_params[k] + one_minus * (context_params[k] - target_params[k])
        for k in target_params
    }


def pooled_embedding(state: ModelState, image: np.ndarray,
                     which: str = "target") -> np.ndarray:
    """Mean over all token embeddings of the full (unmasked) sequence.

    `which` selects the encoder: "target" (the retrieval default) or
    "context".
    """
    if image.shape[0] != state.encoder.input_bands:
        raise ContractError(
            f"image has {image.shape[0]} bands, model expects "
            f"{state.encoder.input_bands}"
        )
    patches = patchify(image, state.encoder.patch_size)
    if patches.grid_shape != tuple(state.grid):
        raise ContractError(
            f"image grid {patches.grid_shape} does not match model grid {state.grid}"
        )
    params = _pick_encoder(state, which)
    out, _ = nn.encoder_fwd(params, patches.tokens[None], state.pos_embed,
                            state.encoder.depth, state.encoder.n_heads,
                            with_cache=False)
    return out[0].mean(axis=0)


def pooled_embeddings_batch(state: ModelState, images: np.ndarray,
                            which: str = "target",
                            batch_size: int = 256) -> np.ndarray:
    """Pooled embeddings for an (N, C, H, W) stack, in deterministic order."""
    if images.ndim != 4 or images.shape[1] != state.encoder.input_bands:
        raise ContractError(
            f"expected (N, {state.encoder.input_bands}, H, W) images, "
            f"got shape {images.shape}"
        )
    params = _pick_encoder(state, which)
    chunks = []
    for at in range(0, images.shape[0], batch_size):
        tokens = tokenize_batch(images[at:at + batch_size], state.encoder.patch_size)
        out, _ = nn.encoder_fwd(params, tokens, state.pos_embed,
                                state.encoder.depth, state.encoder.n_heads,
                                with_cache=False)
        chunks.append(out.mean(axis=1))
    return np.concatenate(chunks, axis=0)


def _pick_encoder(state: ModelState, which: str) -> dict[str, np.ndarray]:
    if which == "target":
        return state.tgt
    if which == "context":
        return state.ctx
    raise ContractError(f"which must be 'context' or 'target', got {which!r}")


# --- batched training graph -------------------------------------------------


@dataclass
class StepResult:
    """Losses plus everything `step_backward` needs to replay the graph."""

    loss_pred: float
    loss_vicreg: float
    vicreg_parts: dict[str, float]
    total: float
    pooled_ctx: np.ndarray
    pooled_pred: np.ndarray
    pooled_tgt: np.ndarray
    # backward state (None when with_cache=False)
    _ctx_buckets: list | None = None
    _pred_buckets: list | None = None
    _z_tgt: np.ndarray | None = None
    _masks: list[MaskPair] = field(default_factory=list)
    _vcfg: VicregConfig | None = None


def step_forward(state: ModelState, tokens: np.ndarray, masks: list[MaskPair],
                 vcfg: VicregConfig, with_cache: bool = True) -> StepResult:
    """Full training forward pass for one batch.

    tokens: (B, n_tokens, token_dim); masks: one MaskPair per sample.
    Per-sample prediction losses average over groups then over the batch;
    VICReg operates on per-image pooled context / predicted / target
    embeddings across the batch.
    """
    b, n, _ = tokens.shape
    if b != len(masks):
        raise ContractError(f"{b} samples but {len(masks)} masks")
    enc, prd = state.encoder, state.predictor
    pos = state.pos_embed
    d = enc.embed_dim

    z_tgt, _ = nn.encoder_fwd(state.tgt, tokens, pos, enc.depth, enc.n_heads,
                              with_cache=False)

    # context encoding, bucketed by context length for full vectorization
    ctx_len = np.array([m.context_indices.size for m in masks])
    by_len: dict[int, list[int]] = {}
    for i, length in enumerate(ctx_len):
        by_len.setdefault(int(length), []).append(i)
    ctx_rows: list[np.ndarray | None] = [None] * b
    ctx_buckets = []
    for length in sorted(by_len):
        ids = np.array(by_len[length])
        idx = np.stack([masks[i].context_indices for i in ids])
        out, cache = nn.encoder_fwd(state.ctx, tokens[ids[:, None], idx], pos[idx],
                                    enc.depth, enc.n_heads, with_cache=with_cache)
        ctx_buckets.append((ids, idx, out, cache))
        for row, i in enumerate(ids):
            ctx_rows[i] = out[row]
    pooled_ctx = np.stack([rows.mean(axis=0) for rows in ctx_rows])

    # predictor, bucketed by (context length, group length)
    items = [(i, gi, g) for i, m in enumerate(masks)
             for gi, g in enumerate(m.target_groups)]
    by_shape: dict[tuple[int, int], list[tuple[int, int, np.ndarray]]] = {}
    for it in items:
        by_shape.setdefault((int(ctx_len[it[0]]), len(it[2])), []).append(it)

    loss_pred_per_sample = np.zeros(b)
    pooled_pred = np.zeros((b, d))
    pooled_tgt = np.zeros((b, d))
    total_rows = np.zeros(b, dtype=np.int64)
    pred_buckets = []
    for key in sorted(by_shape):
        ws = by_shape[key]
        ids = [w[0] for w in ws]
        z_ctx = np.stack([ctx_rows[i] for i in ids])
        g_idx = np.stack([w[2] for w in ws])
        preds, cache = nn.predictor_fwd(state.pred, state.mask_token, z_ctx,
                                        pos[g_idx], prd.depth, prd.n_heads,
                                        with_cache=with_cache)
        pred_buckets.append((ws, g_idx, preds, cache))
        for row, (i, _gi, g) in enumerate(ws):
            zt = z_tgt[i, g]
            diff = preds[row] - zt
            m_groups = len(masks[i].target_groups)
            loss_pred_per_sample[i] += (
                float((diff * diff).sum(axis=-1).mean()) / m_groups
            )
            pooled_pred[i] += preds[row].sum(axis=0)
            pooled_tgt[i] += zt.sum(axis=0)
            total_rows[i] += g.size
    pooled_pred /= total_rows[:, None]
    pooled_tgt /= total_rows[:, None]

    loss_pred = float(loss_pred_per_sample.mean())
    loss_vic, parts = vicreg_loss(pooled_ctx, pooled_pred, pooled_tgt, vcfg)
    total = total_loss(loss_pred, loss_vic)

    return StepResult(
        loss_pred=loss_pred, loss_vicreg=loss_vic, vicreg_parts=parts,
        total=total, pooled_ctx=pooled_ctx, pooled_pred=pooled_pred,
        pooled_tgt=pooled_tgt,
        _ctx_buckets=ctx_buckets if with_cache else None,
        _pred_buckets=pred_buckets if with_cache else None,
        _z_tgt=z_tgt if with_cache else None,
        _masks=masks, _vcfg=vcfg,
    )


def step_backward(state: ModelState, fwd: StepResult) -> dict:
    """Gradients of `fwd.total` w.r.t. context encoder, predictor, mask token.

    The target encoder receives no gradient anywhere by construction; its
    keys never appear in the result.
    """
    if fwd._ctx_buckets is None:
        raise ContractError("step_forward was run with with_cache=False")
    enc, prd = state.encoder, state.predictor
    masks = fwd._masks
    b = len(masks)
    d = enc.embed_dim

    d_pc, d_pp = vicreg_loss_grads(fwd.pooled_ctx, fwd.pooled_pred,
                                   fwd.pooled_tgt, fwd._vcfg)

    total_rows = np.array([m.target_indices().size for m in masks])
    dz_ctx: dict[int, np.ndarray] = {
        i: np.zeros((masks[i].context_indices.size, d)) for i in range(b)
    }
    pred_grads: dict[str, np.ndarray] = {}
    d_mask_token = np.zeros_like(state.mask_token)

    for ws, g_idx, preds, cache in fwd._pred_buckets:
        dpreds = np.empty_like(preds)
        for row, (i, _gi, g) in enumerate(ws):
            zt = fwd._z_tgt[i, g]
            m_groups = len(masks[i].target_groups)
            dpreds[row] = (2.0 * (preds[row] - zt) / (g.size * m_groups * b)
                           + d_pp[i] / total_rows[i])
        d_zc, d_mt = nn.predictor_bwd(dpreds, cache, state.pred,
                                      prd.depth, prd.n_heads, pred_grads)
        d_mask_token += d_mt
        for row, (i, _gi, _g) in enumerate(ws):
            dz_ctx[i] += d_zc[row]

    for i in range(b):
        dz_ctx[i] += d_pc[i] / masks[i].context_indices.size

    ctx_grads: dict[str, np.ndarray] = {}
    for ids, _idx, _out, cache in fwd._ctx_buckets:
        dy = np.stack([dz_ctx[i] for i in ids])
        nn.encoder_bwd(dy, cache, state.ctx, enc.depth, enc.n_heads, ctx_grads)

    return {"ctx": ctx_grads, "pred": pred_grads, "mask_token": d_mask_token}


def training_loss(state: ModelState, tokens: np.ndarray, masks: list[MaskPair],
                  vcfg: VicregConfig) -> float:
    """Forward-only total loss; the finite-difference side of gradient checks."""
    return step_forward(state, tokens, masks, vcfg, with_cache=False).total
