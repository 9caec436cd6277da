"""Plain SGD with momentum and decoupled-from-nothing L2 weight decay."""

from __future__ import annotations

import numpy as np

from .errors import PreconditionError
from .tensor import Tensor

__all__ = ["SGD", "sgd_step"]


class SGD:
    """In-place SGD update; gradients are zeroed after each step."""

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._buffers = [None] * len(self.params)

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise PreconditionError(
                    f"parameter {i} (shape {p.shape}) has no gradient; "
                    "run backward() before step()")
            d = p.grad
            if self.weight_decay:
                d = d + self.weight_decay * p.data
            if self.momentum:
                buf = self._buffers[i]
                if buf is None:
                    buf = np.zeros_like(p.data)
                    self._buffers[i] = buf
                buf *= self.momentum
                buf += d
                d = buf
            p.data -= self.lr * d
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def sgd_step(params: list[Tensor], lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0, _cache: dict = {}) -> None:
    """One-shot update; momentum buffers persist keyed on the param list."""
    key = tuple(id(p) for p in params)
    opt = _cache.get(key)
    if opt is None or opt.momentum != momentum:
        opt = SGD(params, lr, momentum, weight_decay)
        _cache[key] = opt
    opt.lr = lr
    opt.weight_decay = weight_decay
    opt.step()
