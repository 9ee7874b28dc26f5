"""Prediction loss and VICReg terms: oracles, invariances, gradients."""

import math

import numpy as np
import pytest

from conftest import central_difference, rel_errors
from featpred.errors import ContractError, DivergenceError
from featpred.losses import (VicregConfig, covariance_term,
                             covariance_term_grad, invariance_term,
                             invariance_term_grad, prediction_loss,
                             prediction_loss_grad, total_loss, variance_term,
                             variance_term_grad, vicreg_loss,
                             vicreg_loss_grads)


# --- prediction loss --------------------------------------------------------------


def test_prediction_loss_oracles():
    rng = np.random.default_rng(0)
    groups = [rng.normal(size=(3, 4)), rng.normal(size=(5, 4))]
    assert prediction_loss(groups, [g.copy() for g in groups]) == 0.0
    assert abs(prediction_loss([np.array([[1.0, 0.0]])],
                               [np.zeros((1, 2))]) - 1.0) <= 1e-12

    tgts = [rng.normal(size=g.shape) for g in groups]
    base = prediction_loss(groups, tgts)
    doubled = prediction_loss(groups + groups, tgts + tgts)
    assert abs(doubled - base) <= 1e-12          # mean over groups
    assert prediction_loss(tgts, groups) == base  # symmetric


def test_prediction_loss_rejects_mismatches():
    with pytest.raises(ContractError):
        prediction_loss([np.zeros((2, 3))], [np.zeros((3, 3))])
    with pytest.raises(ContractError):
        prediction_loss([np.zeros((2, 3))], [])
    with pytest.raises(ContractError):
        prediction_loss([], [])


# --- variance term ----------------------------------------------------------------


def test_variance_term_oracles():
    collapsed = np.full((5, 3), 2.5)
    assert abs(variance_term(collapsed, 1.0, 1e-4) - 0.99) <= 1e-12
    spread = np.array([[0.0, 0.0], [4.0, 4.0]])   # per-dim std sqrt(8) >= 1
    assert variance_term(spread, 1.0, 1e-4) == 0.0
    two_point = np.array([[0.0], [2.0]])          # unbiased var = 2
    assert variance_term(two_point, 1.0, 0.0) == 0.0
    with pytest.raises(ContractError):
        variance_term(np.zeros((1, 3)), 1.0, 1e-4)


def test_variance_term_is_translation_invariant():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(6, 4))
    shifted = z + np.array([3.0, -2.0, 0.5, 10.0])
    assert abs(variance_term(z, 1.0, 1e-4)
               - variance_term(shifted, 1.0, 1e-4)) <= 1e-12


def test_variance_grad_is_zero_exactly_at_the_hinge():
    # std computes to sqrt(2) bitwise; gamma = sqrt(2): inactive side wins
    z = np.array([[0.0], [2.0]])
    g = variance_term_grad(z, math.sqrt(2.0), 0.0)
    np.testing.assert_array_equal(g, np.zeros_like(z))
    # strictly below the hinge the gradient is nonzero
    g = variance_term_grad(z, math.sqrt(2.0) + 0.1, 0.0)
    assert np.abs(g).max() > 0


# --- covariance term --------------------------------------------------------------


def test_covariance_term_oracles():
    z = np.array([[1.0, 1.0], [-1.0, -1.0]])
    assert abs(covariance_term(z) - 4.0) <= 1e-12

    rng = np.random.default_rng(2)
    one_col = np.zeros((6, 4))
    one_col[:, 2] = rng.normal(size=6)
    assert covariance_term(one_col) == 0.0
    with pytest.raises(ContractError):
        covariance_term(np.zeros((1, 4)))


def test_covariance_term_invariances():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(8, 5))
    base = covariance_term(z)
    assert abs(covariance_term(z[:, [4, 2, 0, 1, 3]]) - base) <= 1e-12
    assert abs(covariance_term(z + np.arange(5)) - base) <= 1e-12
    # quartic scaling; alpha = 2 stays exact in binary floating point
    assert covariance_term(2.0 * z) == 16.0 * base
    assert abs(covariance_term(1.7 * z) - 1.7 ** 4 * base) <= 1e-12 * base


# --- invariance term --------------------------------------------------------------


def test_invariance_term_oracles():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(5, 3))
    assert invariance_term(z, z.copy()) == 0.0
    assert abs(invariance_term(np.array([[3.0, 4.0]]),
                               np.zeros((1, 2))) - 25.0) <= 1e-12
    z2 = rng.normal(size=(5, 3))
    shift = np.array([1.0, -2.0, 0.25])
    assert abs(invariance_term(z + shift, z2 + shift)
               - invariance_term(z, z2)) <= 1e-12
    assert invariance_term(z, z2) == invariance_term(z2, z)
    with pytest.raises(ContractError):
        invariance_term(z, z2[:3])


# --- composed vicreg --------------------------------------------------------------


def _spread_batch():
    # orthogonal zero-mean columns: diagonal covariance, per-dim std >= 1
    return np.array([[1.0, 1.0, 1.0],
                     [1.0, -1.0, -1.0],
                     [-1.0, 1.0, -1.0],
                     [-1.0, -1.0, 1.0]])


def test_vicreg_loss_zero_cases():
    rng = np.random.default_rng(5)
    ctx, pred, tgt = (rng.normal(size=(4, 3)) for _ in range(3))
    off = VicregConfig(lambda_v=0.0, lambda_c=0.0, lambda_i=0.0)
    assert not off.enabled
    total, terms = vicreg_loss(ctx, pred, tgt, off)
    assert total == 0.0 and terms == {"v": 0.0, "c": 0.0, "inv": 0.0}

    z = _spread_batch()
    total, terms = vicreg_loss(z, z.copy(), z.copy(), VicregConfig())
    assert total == 0.0
    assert terms["v"] == 0.0 and terms["c"] == 0.0 and terms["inv"] == 0.0


def test_vicreg_loss_collapsed_batch_oracle():
    pooled = np.full((4, 3), 0.7)
    total, terms = vicreg_loss(pooled, pooled.copy(), pooled.copy(),
                               VicregConfig())
    assert abs(total - 24.75) <= 1e-12
    assert abs(terms["v"] - 0.99) <= 1e-12
    assert terms["c"] == 0.0 and terms["inv"] == 0.0


def test_vicreg_loss_matches_manual_composition():
    rng = np.random.default_rng(6)
    ctx, pred, tgt = (rng.normal(size=(6, 4)) for _ in range(3))
    cfg = VicregConfig()
    total, terms = vicreg_loss(ctx, pred, tgt, cfg)
    v = 0.5 * (variance_term(ctx, cfg.gamma, cfg.epsilon)
               + variance_term(pred, cfg.gamma, cfg.epsilon))
    c = 0.5 * (covariance_term(ctx) + covariance_term(pred))
    inv = invariance_term(pred, tgt)
    assert abs(terms["v"] - v) <= 1e-12
    assert abs(terms["c"] - c) <= 1e-12
    assert abs(terms["inv"] - inv) <= 1e-12
    assert abs(total - (25.0 * v + 25.0 * c + inv)) <= 1e-12


def test_vicreg_grads_match_finite_differences():
    rng = np.random.default_rng(7)
    ctx = 0.4 * rng.normal(size=(6, 4))
    pred = 0.4 * rng.normal(size=(6, 4))
    tgt = rng.normal(size=(6, 4))
    cfg = VicregConfig()
    d_ctx, d_pred = vicreg_loss_grads(ctx, pred, tgt, cfg)

    entries = [("ctx", i) for i in range(ctx.size)]
    fd = central_difference(lambda: vicreg_loss(ctx, pred, tgt, cfg)[0],
                            {"ctx": ctx}, entries)
    assert rel_errors(d_ctx.reshape(-1), fd).max() <= 1e-6

    entries = [("pred", i) for i in range(pred.size)]
    fd = central_difference(lambda: vicreg_loss(ctx, pred, tgt, cfg)[0],
                            {"pred": pred}, entries)
    assert rel_errors(d_pred.reshape(-1), fd).max() <= 1e-6


def test_vicreg_config_validation():
    with pytest.raises(ContractError):
        VicregConfig(lambda_v=-1.0)
    with pytest.raises(ContractError):
        VicregConfig(epsilon=0.0)
    assert VicregConfig(lambda_v=0.0, lambda_c=0.0, lambda_i=0.5).enabled


# --- total loss -------------------------------------------------------------------


def test_total_loss_sums_and_halts_on_divergence():
    assert total_loss(0.0, 0.0) == 0.0
    assert abs(total_loss(1.5, 24.75) - 26.25) <= 1e-12
    assert total_loss(2.0, 3.0) > total_loss(1.9, 3.0)
    assert total_loss(2.0, 3.1) > total_loss(2.0, 3.0)
    with pytest.raises(DivergenceError):
        total_loss(float("nan"), 0.0)
    with pytest.raises(DivergenceError):
        total_loss(0.0, float("inf"))
