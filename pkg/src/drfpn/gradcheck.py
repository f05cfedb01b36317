"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError


def numerical_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float,
                   coords: np.ndarray | None = None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``; only ``coords`` (flat indices) if given."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.zeros_like(flat)
    idx = range(flat.size) if coords is None else coords
    with ag.no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = _scalar(f(Tensor(x)))
            flat[i] = orig - eps
            fm = _scalar(f(Tensor(x)))
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * eps)
    return out.reshape(x.shape)


def _scalar(y: Tensor) -> float:
    if y.shape != (1, 1, 1, 1):
        raise ContractError(f"gradcheck function must return a scalar tensor, got {y.shape}")
    return float(y.data.reshape(()))


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def norm_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``|a - n| / max(|a|, |n|)`` over whole gradient vectors (2-norms)."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    return float(np.linalg.norm(analytic - numeric) / denom) if denom > 0 else 0.0


def gradcheck(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, eps: float = 1e-5,
              max_coords: int | None = None, seed: int = 0, norm: bool = False) -> float:
    """Relative error between backprop and central differences of ``f`` at ``x``.

    By default this is the worst per-coordinate error. With ``norm=True`` it is the
    error of the gradient vector as a whole, which stays meaningful for large graphs
    whose smallest gradient entries sit below the finite-difference rounding floor.
    ``max_coords`` restricts the sweep to a seeded random subset of coordinates.
    """
    data = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(data.copy(), requires_grad=True)
    with ag.Tape():
        y = f(xt)
        _scalar(y)
        grads = ag.backward(y)
    analytic = grads.get(xt, np.zeros_like(data))

    coords = None
    if max_coords is not None and max_coords < data.size:
        coords = np.sort(np.random.default_rng(seed).choice(data.size, max_coords, replace=False))
    numeric = numerical_grad(f, data, eps, coords)
    if coords is not None:
        analytic, numeric = analytic.reshape(-1)[coords], numeric.reshape(-1)[coords]
    if norm:
        return norm_relative_error(analytic, numeric)
    return float(relative_error(analytic, numeric).max())
