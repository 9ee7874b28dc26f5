"""Prediction loss, the three VICReg terms, and the combined objective.

All functions are pure and operate on (n, d) float arrays. Each term has a
matching closed-form gradient used by the training step; the gradients are
checked against central finite differences in the test suite.

Conventions fixed for reproducibility:
- variance/covariance use the unbiased (n-1) denominator;
- the variance hinge takes gradient 0 at std == gamma exactly (inactive side).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DivergenceError


@dataclass(frozen=True)
class VicregConfig:
    lambda_v: float = 25.0
    lambda_c: float = 25.0
    lambda_i: float = 1.0
    gamma: float = 1.0
    epsilon: float = 1e-4

    def __post_init__(self):
        for name in ("lambda_v", "lambda_c", "lambda_i"):
            val = getattr(self, name)
            if not np.isfinite(val) or val < 0:
                raise ContractError(f"{name} must be finite and >= 0, got {val}")
        if self.epsilon <= 0:
            raise ContractError(f"epsilon must be > 0, got {self.epsilon}")

    @property
    def enabled(self) -> bool:
        return self.lambda_v > 0 or self.lambda_c > 0 or self.lambda_i > 0


def prediction_loss(predicted: list[np.ndarray], targets: list[np.ndarray]) -> float:
    """Mean over groups of the per-group mean squared L2 row distance."""
    if len(predicted) != len(targets) or not predicted:
        raise ContractError(
            f"need equal, non-zero group counts, got {len(predicted)} vs {len(targets)}"
        )
    total = 0.0
    for zp, zt in zip(predicted, targets):
        if zp.shape != zt.shape:
            raise ContractError(f"group shape mismatch: {zp.shape} vs {zt.shape}")
        diff = zp - zt
        total += float((diff * diff).sum(axis=-1).mean())
    return total / len(predicted)


def prediction_loss_grad(predicted: list[np.ndarray],
                         targets: list[np.ndarray]) -> list[np.ndarray]:
    """d prediction_loss / d predicted, group by group."""
    m = len(predicted)
    return [2.0 * (zp - zt) / (zp.shape[0] * m) for zp, zt in zip(predicted, targets)]


def _check_batch(z: np.ndarray, what: str) -> None:
    if z.ndim != 2 or z.shape[0] < 2:
        raise ContractError(f"{what} needs an (n>=2, d) matrix, got shape {z.shape}")


def variance_term(z: np.ndarray, gamma: float, epsilon: float) -> float:
    """Hinge on per-dimension regularized std: mean_j max(0, gamma - sqrt(var_j + eps))."""
    _check_batch(z, "variance_term")
    var = z.var(axis=0, ddof=1)
    std = np.sqrt(var + epsilon)
    return float(np.maximum(0.0, gamma - std).mean())


def variance_term_grad(z: np.ndarray, gamma: float, epsilon: float) -> np.ndarray:
    n, d = z.shape
    centered = z - z.mean(axis=0)
    var = (centered * centered).sum(axis=0) / (n - 1)
    std = np.sqrt(var + epsilon)
    active = std < gamma  # strict: zero gradient exactly at the hinge
    coef = np.where(active, -1.0 / (d * std * (n - 1)), 0.0)
    return coef * centered


def covariance_term(z: np.ndarray) -> float:
    """Sum of squared off-diagonal entries of the empirical covariance, over d."""
    _check_batch(z, "covariance_term")
    n, d = z.shape
    centered = z - z.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    off = cov - np.diag(np.diag(cov))
    return float((off * off).sum() / d)


def covariance_term_grad(z: np.ndarray) -> np.ndarray:
    n, d = z.shape
    centered = z - z.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    g = (2.0 / d) * (cov - np.diag(np.diag(cov)))  # symmetric, zero diagonal
    dz = centered @ (g + g.T) / (n - 1)
    return dz - dz.mean(axis=0)


def invariance_term(z: np.ndarray, z_prime: np.ndarray) -> float:
    """Mean squared L2 distance between paired rows."""
    if z.shape != z_prime.shape:
        raise ContractError(f"shape mismatch: {z.shape} vs {z_prime.shape}")
    diff = z - z_prime
    return float((diff * diff).sum(axis=-1).mean())


def invariance_term_grad(z: np.ndarray, z_prime: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the first argument."""
    return 2.0 * (z - z_prime) / z.shape[0]


def vicreg_loss(
    context_pooled: np.ndarray,
    predicted_pooled: np.ndarray,
    target_pooled: np.ndarray,
    config: VicregConfig,
) -> tuple[float, dict[str, float]]:
    """Weighted VICReg total plus the per-term breakdown.

    Variance and covariance are computed on both the pooled context batch
    and the pooled predicted batch and averaged; invariance pairs pooled
    predictions against pooled target-encoder embeddings (the stop-gradient
    side).
    """
    if not config.enabled:
        zero = {"v": 0.0, "c": 0.0, "inv": 0.0}
        return 0.0, zero
    v = 0.5 * (
        variance_term(context_pooled, config.gamma, config.epsilon)
        + variance_term(predicted_pooled, config.gamma, config.epsilon)
    )
    c = 0.5 * (covariance_term(context_pooled) + covariance_term(predicted_pooled))
    inv = invariance_term(predicted_pooled, target_pooled)
    total = config.lambda_v * v + config.lambda_c * c + config.lambda_i * inv
    return float(total), {"v": float(v), "c": float(c), "inv": float(inv)}


def vicreg_loss_grads(
    context_pooled: np.ndarray,
    predicted_pooled: np.ndarray,
    target_pooled: np.ndarray,
    config: VicregConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """(d/d context_pooled, d/d predicted_pooled); targets get no gradient."""
    if not config.enabled:
        return np.zeros_like(context_pooled), np.zeros_like(predicted_pooled)
    g, e = config.gamma, config.epsilon
    d_ctx = np.zeros_like(context_pooled)
    d_pred = np.zeros_like(predicted_pooled)
    if config.lambda_v > 0:
        d_ctx += config.lambda_v * 0.5 * variance_term_grad(context_pooled, g, e)
        d_pred += config.lambda_v * 0.5 * variance_term_grad(predicted_pooled, g, e)
    if config.lambda_c > 0:
        d_ctx += config.lambda_c * 0.5 * covariance_term_grad(context_pooled)
        d_pred += config.lambda_c * 0.5 * covariance_term_grad(predicted_pooled)
    if config.lambda_i > 0:
        d_pred += config.lambda_i * invariance_term_grad(predicted_pooled, target_pooled)
    return d_ctx, d_pred


def total_loss(pred_loss: float, vicreg: float) -> float:
    """Sum of the two objectives; halts on non-finite input."""
    total = pred_loss + vicreg
    if not np.isfinite(total):
        raise DivergenceError(
            f"non-finite loss: pred={pred_loss}, vicreg={vicreg}"
        )
    return float(total)
