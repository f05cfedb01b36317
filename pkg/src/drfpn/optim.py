"""SGD with momentum over a named parameter registry."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from .autograd import Tensor
from .errors import ContractError


class SGD:
    """Heavy-ball SGD: ``v <- momentum * v + g``; ``p <- p - lr * v``.

    Velocity buffers live on the optimizer and persist across ``step`` calls.
    Parameters without a gradient are skipped (their velocity is left untouched).
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float, momentum: float = 0.0):
        if lr < 0:
            raise ContractError(f"learning rate must be non-negative, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ContractError(f"momentum must lie in [0, 1), got {momentum}")
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, grads: Mapping[Tensor, np.ndarray]) -> None:
        for name, p in self.params.items():
            g = grads.get(p)
            if g is None:
                continue
            if g.shape != p.shape:
                raise ContractError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            p.data = p.data - self.lr * v


def sgd_step(params, grads, lr: float, momentum: float = 0.0, state: SGD | None = None) -> SGD:
    """Functional entry point; pass the returned optimizer back in to keep velocity."""
    opt = state if state is not None else SGD(params, lr, momentum)
    opt.step(grads)
    return opt


def clip_grad_norm(grads: Mapping[Tensor, np.ndarray], max_norm: float) -> tuple[dict[Tensor, np.ndarray], float]:
    """Rescale all gradients together so their global L2 norm is at most ``max_norm``.

    Returns the (possibly rescaled) gradients and the norm before clipping. ``max_norm <= 0``
    disables clipping.
    """
    norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values())))
    if max_norm <= 0 or norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / norm
    return {t: g * scale for t, g in grads.items()}, norm
