"""Transformer building blocks in numpy, float64, with explicit backward passes.

Parameters live in flat dicts keyed by dotted names ("blocks.0.attn.qkv.w").
Every forward returns (output, cache); the matching backward consumes the
upstream gradient plus that cache and accumulates parameter gradients into a
dict via `gadd`. No dropout anywhere: forward passes are deterministic
functions of (params, inputs).
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

SQRT2 = np.sqrt(2.0)
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
LN_EPS = 1e-6


def gadd(grads: dict, key: str, value: np.ndarray) -> None:
    if key in grads:
        grads[key] = grads[key] + value
    else:
        grads[key] = value


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until inside +-2 std (matches ViT init)."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def sincos_pos_embed_2d(dim: int, rows: int, cols: int) -> np.ndarray:
    """Fixed 2-D sine/cosine table over the patch grid, shape (rows*cols, dim).

    Half the channels encode the row coordinate, half the column, each as
    interleaved sin/cos at geometrically spaced frequencies (temperature
    10000). Requires dim divisible by 4.
    """
    if dim % 4 != 0:
        raise ValueError(f"positional dim must be divisible by 4, got {dim}")
    half = dim // 2

    def axis_embed(positions: np.ndarray) -> np.ndarray:
        omega = 1.0 / (10000.0 ** (np.arange(half // 2) / (half / 2.0)))
        ang = positions[:, None] * omega[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    emb_r = axis_embed(rr.ravel().astype(np.float64))
    emb_c = axis_embed(cc.ravel().astype(np.float64))
    return np.concatenate([emb_r, emb_c], axis=1)


# --- linear -----------------------------------------------------------------

def linear_fwd(x, p, key):
    return x @ p[key + ".w"] + p[key + ".b"], x


def linear_bwd(dy, x, p, key, grads):
    din = x.shape[-1]
    dout = dy.shape[-1]
    gadd(grads, key + ".w", x.reshape(-1, din).T @ dy.reshape(-1, dout))
    gadd(grads, key + ".b", dy.reshape(-1, dout).sum(axis=0))
    return dy @ p[key + ".w"].T


# --- layernorm ----------------------------------------------------------------

def layernorm_fwd(x, p, key):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xh = xc * inv
    y = p[key + ".g"] * xh + p[key + ".b"]
    return y, (xh, inv)


def layernorm_bwd(dy, cache, p, key, grads):
    xh, inv = cache
    d = xh.shape[-1]
    gadd(grads, key + ".g", (dy * xh).reshape(-1, d).sum(axis=0))
    gadd(grads, key + ".b", dy.reshape(-1, d).sum(axis=0))
    dxh = dy * p[key + ".g"]
    return inv * (
        dxh
        - dxh.mean(axis=-1, keepdims=True)
        - xh * (dxh * xh).mean(axis=-1, keepdims=True)
    )


# --- GELU (exact, erf form) ---------------------------------------------------

def gelu_fwd(x):
    cdf = 0.5 * (1.0 + erf(x / SQRT2))
    return x * cdf, (x, cdf)


def gelu_bwd(dy, cache):
    x, cdf = cache
    pdf = INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return dy * (cdf + x * pdf)


# --- multi-head self-attention --------------------------------------------

def attention_fwd(x, p, key, n_heads):
    b, s, d = x.shape
    dh = d // n_heads
    qkv, _ = linear_fwd(x, p, key + ".qkv")  # (B, S, 3D)
    q, k, v = np.split(qkv, 3, axis=-1)

    def heads(t):
        return t.reshape(b, s, n_heads, dh).transpose(0, 2, 1, 3)

    q, k, v = heads(q), heads(k), heads(v)
    scale = 1.0 / np.sqrt(dh)
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    scores -= scores.max(axis=-1, keepdims=True)  # stable softmax
    expd = np.exp(scores)
    attn = expd / expd.sum(axis=-1, keepdims=True)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, s, d)
    out, _ = linear_fwd(ctx, p, key + ".proj")
    return out, (x, q, k, v, attn, ctx, scale)


def attention_bwd(dout, cache, p, key, n_heads, grads):
    x, q, k, v, attn, ctx, scale = cache
    b, s, d = x.shape
    dh = d // n_heads

    dctx = linear_bwd(dout, ctx, p, key + ".proj", grads)
    dctx = dctx.reshape(b, s, n_heads, dh).transpose(0, 2, 1, 3)

    dattn = dctx @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ dctx
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dscores *= scale
    dq = dscores @ k
    dk = dscores.transpose(0, 1, 3, 2) @ q

    def merge(t):
        return t.transpose(0, 2, 1, 3).reshape(b, s, d)

    dqkv = np.concatenate([merge(dq), merge(dk), merge(dv)], axis=-1)
    return linear_bwd(dqkv, x, p, key + ".qkv", grads)


# --- pre-norm transformer block -------------------------------------------

def block_fwd(x, p, key, n_heads):
    h1, ln1c = layernorm_fwd(x, p, key + ".ln1")
    a, attnc = attention_fwd(h1, p, key + ".attn", n_heads)
    x2 = x + a
    h2, ln2c = layernorm_fwd(x2, p, key + ".ln2")
    f1, _ = linear_fwd(h2, p, key + ".mlp.fc1")
    g, geluc = gelu_fwd(f1)
    f2, _ = linear_fwd(g, p, key + ".mlp.fc2")
    y = x2 + f2
    return y, (ln1c, attnc, x2, ln2c, h2, geluc, g)


def block_bwd(dy, cache, p, key, n_heads, grads):
    ln1c, attnc, x2, ln2c, h2, geluc, g = cache
    dg = linear_bwd(dy, g, p, key + ".mlp.fc2", grads)
    df1 = gelu_bwd(dg, geluc)
    dh2 = linear_bwd(df1, h2, p, key + ".mlp.fc1", grads)
    dx2 = dy + layernorm_bwd(dh2, ln2c, p, key + ".ln2", grads)
    dh1 = attention_bwd(dx2, attnc, p, key + ".attn", n_heads, grads)
    dx = dx2 + layernorm_bwd(dh1, ln1c, p, key + ".ln1", grads)
    return dx


# --- encoder (patch projection + block stack, no final norm) -----------------
#
# No final LayerNorm: a depth-0 encoder is exactly patch projection plus
# positional embedding, which the rest of the package relies on.

def init_encoder_params(rng, token_dim, embed_dim, depth, mlp_ratio=4.0,
                        std=0.02) -> dict[str, np.ndarray]:
    p = {
        "patch.w": trunc_normal(rng, (token_dim, embed_dim), std),
        "patch.b": np.zeros(embed_dim),
    }
    hidden = int(embed_dim * mlp_ratio)
    for i in range(depth):
        k = f"blocks.{i}"
        p[k + ".ln1.g"] = np.ones(embed_dim)
        p[k + ".ln1.b"] = np.zeros(embed_dim)
        p[k + ".attn.qkv.w"] = trunc_normal(rng, (embed_dim, 3 * embed_dim), std)
        p[k + ".attn.qkv.b"] = np.zeros(3 * embed_dim)
        p[k + ".attn.proj.w"] = trunc_normal(rng, (embed_dim, embed_dim), std)
        p[k + ".attn.proj.b"] = np.zeros(embed_dim)
        p[k + ".ln2.g"] = np.ones(embed_dim)
        p[k + ".ln2.b"] = np.zeros(embed_dim)
        p[k + ".mlp.fc1.w"] = trunc_normal(rng, (embed_dim, hidden), std)
        p[k + ".mlp.fc1.b"] = np.zeros(hidden)
        p[k + ".mlp.fc2.w"] = trunc_normal(rng, (hidden, embed_dim), std)
        p[k + ".mlp.fc2.b"] = np.zeros(embed_dim)
    return p


def encoder_fwd(p, tokens, pos, depth, n_heads, with_cache=True):
    """tokens: (B, S, token_dim); pos: (S, d) or (B, S, d) positional rows."""
    x = tokens @ p["patch.w"] + p["patch.b"] + pos
    caches = [] if with_cache else None
    for i in range(depth):
        x, c = block_fwd(x, p, f"blocks.{i}", n_heads)
        if with_cache:
            caches.append(c)
    return x, (tokens, caches)


def encoder_bwd(dy, cache, p, depth, n_heads, grads):
    tokens, caches = cache
    dx = dy
    for i in reversed(range(depth)):
        dx = block_bwd(dx, caches[i], p, f"blocks.{i}", n_heads, grads)
    din = tokens.shape[-1]
    d = dx.shape[-1]
    gadd(grads, "patch.w", tokens.reshape(-1, din).T @ dx.reshape(-1, d))
    gadd(grads, "patch.b", dx.reshape(-1, d).sum(axis=0))
    return dx  # gradient w.r.t. the embedded input, rarely needed


# --- predictor trunk ----------------------------------------------------------
#
# in/out/pos projections adapt between the encoder width d and the predictor
# width; the trunk itself is the same block stack at predictor width.

def init_predictor_params(rng, embed_dim, pred_dim, depth, n_heads,
                          mlp_ratio=4.0, std=0.02) -> dict[str, np.ndarray]:
    p = {
        "in.w": trunc_normal(rng, (embed_dim, pred_dim), std),
        "in.b": np.zeros(pred_dim),
        "pos.w": trunc_normal(rng, (embed_dim, pred_dim), std),
        "out.w": trunc_normal(rng, (pred_dim, embed_dim), std),
        "out.b": np.zeros(embed_dim),
    }
    hidden = int(pred_dim * mlp_ratio)
    for i in range(depth):
        k = f"blocks.{i}"
        p[k + ".ln1.g"] = np.ones(pred_dim)
        p[k + ".ln1.b"] = np.zeros(pred_dim)
        p[k + ".attn.qkv.w"] = trunc_normal(rng, (pred_dim, 3 * pred_dim), std)
        p[k + ".attn.qkv.b"] = np.zeros(3 * pred_dim)
        p[k + ".attn.proj.w"] = trunc_normal(rng, (pred_dim, pred_dim), std)
        p[k + ".attn.proj.b"] = np.zeros(pred_dim)
        p[k + ".ln2.g"] = np.ones(pred_dim)
        p[k + ".ln2.b"] = np.zeros(pred_dim)
        p[k + ".mlp.fc1.w"] = trunc_normal(rng, (pred_dim, hidden), std)
        p[k + ".mlp.fc1.b"] = np.zeros(hidden)
        p[k + ".mlp.fc2.w"] = trunc_normal(rng, (hidden, pred_dim), std)
        p[k + ".mlp.fc2.b"] = np.zeros(pred_dim)
    return p


def predictor_fwd(p, mask_token, z_ctx, tgt_pos, depth, n_heads, with_cache=True):
    """Predict target-token embeddings for one group.

    z_ctx: (B, Sc, d) context embeddings; tgt_pos: (B, St, d) or (St, d)
    positional rows of the masked targets. Returns (B, St, d) predictions.
    """
    b, sc, _ = z_ctx.shape
    xin_ctx = z_ctx @ p["in.w"] + p["in.b"]
    xin_tgt = mask_token + tgt_pos @ p["pos.w"]
    if xin_tgt.ndim == 2:
        xin_tgt = np.broadcast_to(xin_tgt, (b,) + xin_tgt.shape)
    x = np.concatenate([xin_ctx, np.ascontiguousarray(xin_tgt)], axis=1)
    caches = [] if with_cache else None
    for i in range(depth):
        x, c = block_fwd(x, p, f"blocks.{i}", n_heads)
        if with_cache:
            caches.append(c)
    rows = x[:, sc:, :]
    preds = rows @ p["out.w"] + p["out.b"]
    return preds, (z_ctx, tgt_pos, rows, caches, sc)


def predictor_bwd(dpreds, cache, p, depth, n_heads, grads):
    """Returns (d_z_ctx, d_mask_token); parameter grads land in `grads`."""
    z_ctx, tgt_pos, rows, caches, sc = cache
    b, st, d = dpreds.shape
    dp = dpreds.shape[-1]

    gadd(grads, "out.w", rows.reshape(-1, rows.shape[-1]).T @ dpreds.reshape(-1, d))
    gadd(grads, "out.b", dpreds.reshape(-1, d).sum(axis=0))
    drows = dpreds @ p["out.w"].T

    dx = np.zeros((b, sc + st, drows.shape[-1]))
    dx[:, sc:, :] = drows
    for i in reversed(range(depth)):
        dx = block_bwd(dx, caches[i], p, f"blocks.{i}", n_heads, grads)

    dxin_ctx = dx[:, :sc, :]
    dxin_tgt = dx[:, sc:, :]

    pdim = dxin_ctx.shape[-1]
    gadd(grads, "in.w", z_ctx.reshape(-1, z_ctx.shape[-1]).T @ dxin_ctx.reshape(-1, pdim))
    gadd(grads, "in.b", dxin_ctx.reshape(-1, pdim).sum(axis=0))
    d_z_ctx = dxin_ctx @ p["in.w"].T

    flat_tgt = dxin_tgt.reshape(-1, pdim)
    d_mask_token = flat_tgt.sum(axis=0)
    if tgt_pos.ndim == 2:
        pos_rows = np.broadcast_to(tgt_pos, (b,) + tgt_pos.shape)
    else:
        pos_rows = tgt_pos
    gadd(grads, "pos.w",
         pos_rows.reshape(-1, pos_rows.shape[-1]).T @ flat_tgt)
    return d_z_ctx, d_mask_token
