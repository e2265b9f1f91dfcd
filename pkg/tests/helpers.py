"""Shared test oracles: finite differences and relative-error reporting."""

from __future__ import annotations

import numpy as np

from lahst.autodiff import DiffArray


def finite_diff_grad(f, arr: DiffArray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar-valued f() w.r.t. arr.data."""
    flat = arr.data.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(arr.shape)


def max_rel_err(analytic: np.ndarray, reference: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise |a-r| / max(|a|+|r|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    denom = np.maximum(np.abs(a) + np.abs(r), floor)
    return float(np.max(np.abs(a - r) / denom))


def check_grads(make_loss, params: dict, h: float = 1e-5, tol: float = 1e-4) -> dict:
    """Compare analytic grads (already populated) against finite differences.

    ``make_loss`` re-evaluates the scalar loss from current param data with
    no tape active. Returns {name: rel_err} and asserts every entry < tol.
    """
    errs = {}
    for name, arr in params.items():
        assert arr.grad is not None, f"no gradient recorded for {name}"
        fd = finite_diff_grad(make_loss, arr, h=h)
        errs[name] = max_rel_err(arr.grad, fd)
    worst = max(errs, key=errs.get)
    assert errs[worst] < tol, f"gradient mismatch for {worst}: {errs[worst]:.3e}"
    return errs
