"""Shared test helpers: finite-difference oracles and gradient comparison."""

from __future__ import annotations

import numpy as np
import pytest

from scoremux.numerics import Matrix, P64, Tape


def fd_grad(f, mats: list[Matrix], wrt: int, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of the scalar f(mats) wrt mats[wrt].

    Evaluates f as a black box (no tape), so it stays independent of the
    reverse-mode path it is used to check. P64 inputs expected.
    """
    arrs = [m.data.astype(np.float64).copy() for m in mats]
    target = arrs[wrt]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    for _ in it:
        ij = it.multi_index
        orig = target[ij]
        target[ij] = orig + h
        fp = f([Matrix(a.copy()) for a in arrs]).item()
        target[ij] = orig - h
        fm = f([Matrix(a.copy()) for a in arrs]).item()
        target[ij] = orig
        grad[ij] = (fp - fm) / (2.0 * h)
    return grad


def analytic_grads(f, mats: list[Matrix]) -> list[np.ndarray]:
    """Reverse-mode gradients of the scalar f(mats) wrt every input."""
    with Tape() as tape:
        tape.watch(*mats)
        loss = f(mats)
    grads = tape.backward(loss)
    return [grads[m].data for m in mats]


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray, tol: float = 1e-4) -> None:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-4)
    err = np.abs(analytic - numeric) / denom
    assert err.max() <= tol, f"max relative gradient error {err.max():.3e} > {tol}"


def gradcheck(f, mats: list[Matrix], tol: float = 1e-4, h: float = 1e-5) -> None:
    """Check reverse-mode gradients of f against central finite differences."""
    assert all(m.precision is P64 for m in mats), "gradcheck requires P64 inputs"
    ana = analytic_grads(f, mats)
    for i in range(len(mats)):
        assert_grad_close(ana[i], fd_grad(f, mats, i, h=h), tol=tol)


@pytest.fixture
def rng():
    return np.random.default_rng(20240901)
