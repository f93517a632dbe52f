"""Adam optimizer over a Params store (beta1=0.9, beta2=0.999)."""

from __future__ import annotations

import numpy as np

from . import kernels
from .autodiff import Params


class Adam:
    def __init__(self, params: Params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = {n: np.zeros(params[n].size) for n in params.trainable_names()}
        self._v = {n: np.zeros(params[n].size) for n in params.trainable_names()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        """One fused in-place update from a name -> gradient map."""
        self.t += 1
        for name in self.params.trainable_names():
            g = grads.get(name)
            if g is None:
                continue
            kernels.adam_update(
                self.params[name].reshape(-1), g, self._m[name], self._v[name],
                self.lr, self.beta1, self.beta2, self.eps, self.t)


def decayed_lr(base_lr: float, epoch: int, factor: float = 0.5,
               every: int = 100) -> float:
    """Step schedule: multiply by `factor` once per `every` epochs."""
    if every <= 0:
        return base_lr
    return base_lr * factor ** (epoch // every)
