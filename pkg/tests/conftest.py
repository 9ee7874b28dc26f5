"""Shared fixtures and finite-difference helpers for the test suite."""

import os

# Pin BLAS to one thread before numpy loads anywhere in the test process:
# bit-exact reproducibility must not depend on the host's core count.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from featpred.data import generate_synthetic_archive
from featpred.model import EncoderConfig, PredictorConfig, init_model

# --- acceptance reporting -----------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


# --- finite differences -------------------------------------------------------

FD_H = 1e-5


def central_difference(f, arrays: dict, entries, h: float = FD_H) -> np.ndarray:
    """Central-difference df/dx for each (array_name, flat_index) entry.

    `f` is a zero-argument closure that reads `arrays` in place, so the
    perturbation is visible to it without re-plumbing.
    """
    out = np.empty(len(entries))
    for row, (name, idx) in enumerate(entries):
        flat = arrays[name].reshape(-1)
        old = flat[idx]
        flat[idx] = old + h
        f_plus = f()
        flat[idx] = old - h
        f_minus = f()
        flat[idx] = old
        out[row] = (f_plus - f_minus) / (2.0 * h)
    return out


def pick_entries(arrays: dict, n: int, rng: np.random.Generator):
    """Sample n distinct (array_name, flat_index) coordinates."""
    names = sorted(arrays)
    sizes = np.array([arrays[k].size for k in names])
    total = int(sizes.sum())
    chosen = rng.choice(total, size=min(n, total), replace=False)
    bounds = np.cumsum(sizes)
    entries = []
    for flat in sorted(chosen.tolist()):
        which = int(np.searchsorted(bounds, flat, side="right"))
        offset = flat - (0 if which == 0 else int(bounds[which - 1]))
        entries.append((names[which], int(offset)))
    return entries


def rel_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    denom = np.where(denom == 0.0, 1.0, denom)
    return np.abs(analytic - numeric) / denom


# --- small model fixtures -----------------------------------------------------


@pytest.fixture
def tiny_encoder() -> EncoderConfig:
    return EncoderConfig(embed_dim=16, depth=2, n_heads=2, patch_size=8,
                         mlp_ratio=2.0, input_bands=2)


@pytest.fixture
def tiny_predictor() -> PredictorConfig:
    return PredictorConfig(embed_dim=8, depth=1, n_heads=2, mlp_ratio=2.0)


@pytest.fixture
def tiny_model(tiny_encoder, tiny_predictor):
    # side 16 with patch 8: a 2x2 grid of 4 tokens
    return init_model(tiny_encoder, tiny_predictor, (2, 2), seed=7)


@pytest.fixture(scope="session")
def small_archive():
    # side 16 matches the tiny encoder's patch size; 4 balanced classes
    return generate_synthetic_archive(n_images=48, n_classes=4, bands=2,
                                      side=16, seed=3)
