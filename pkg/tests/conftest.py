"""Shared test helpers: finite-difference oracle and error metrics."""

import numpy as np
import pytest


def numeric_grad(loss_fn, arr, eps=1e-6):
    """Central finite differences of scalar loss_fn() w.r.t. arr, element-wise.

    Mutates arr element by element and restores it. loss_fn must read arr
    afresh (i.e. rebuild any graph) on every call and return a float.
    """
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        f_plus = loss_fn()
        flat[i] = saved - eps
        f_minus = loss_fn()
        flat[i] = saved
        gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def max_rel_err(analytic, numeric, floor=1e-6):
    """max over elements of |a-n| / max(|a|, |n|, floor)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
