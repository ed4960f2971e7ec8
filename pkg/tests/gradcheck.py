"""Finite-difference helpers shared by the gradient tests."""
import numpy as np

from alm import diffmath as dm
from alm.diffmath import Tape, Tensor


def numeric_grad(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function of an array."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        hi = fn()
        x[i] = old - h
        lo = fn()
        x[i] = old
        g[i] = (hi - lo) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Max relative error with a floor so tiny gradients compare absolutely."""
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-3)
    return float(np.max(np.abs(a - b) / scale))


def analytic_grads(loss_fn, params):
    with Tape():
        loss = loss_fn()
        grads = dm.backward(loss, params)
    return loss.item(), grads

