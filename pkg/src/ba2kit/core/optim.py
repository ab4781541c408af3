"""
Optimizers over ``Parameter`` objects.

Frozen parameters are skipped. Learning rates are set per epoch from the
``TrainConfig`` decay schedule via ``scale_lr``.
"""

from typing import Dict, Iterable, List, Tuple

import numpy as np

from .errors import ConfigError
from .tensor import Parameter


class Optimizer:
    """Common bookkeeping for a group of parameters sharing one learning rate."""

    def __init__(self, params: Iterable[Parameter], lr: float):
        self.params: List[Parameter] = list(params)
        if lr <= 0:
            raise ConfigError(f"Learning rate must be positive, got {lr}")
        self.base_lr = lr
        self.lr = lr
        ids = [id(p) for p in self.params]
        if len(set(ids)) != len(ids):
            raise ConfigError("A parameter appears twice in one optimizer group")

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def scale_lr(self, factor: float) -> None:
        """Set the learning rate to ``base_lr * factor``."""
        self.lr = self.base_lr * factor

    def step(self) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    """SGD with (heavy-ball) momentum."""

    def __init__(self, params: Iterable[Parameter], lr: float, momentum: float = 0.0):
        super().__init__(params, lr)
        if not (0.0 <= momentum < 1.0):
            raise ConfigError(f"Momentum must be in [0, 1), got {momentum}")
        self.momentum = momentum
        self._velocity: Dict[int, np.ndarray] = {}

    def step(self) -> None:
        for p in self.params:
            if p.frozen:
                continue
            v = self._velocity.get(id(p))
            if v is None:
                v = np.zeros_like(p.value)
                self._velocity[id(p)] = v
            v *= self.momentum
            v += p.grad
            p.value -= (self.lr * v).astype(p.value.dtype, copy=False)


class Adam(Optimizer):
    def __init__(
        self,
        params: Iterable[Parameter],
        lr: float,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        super().__init__(params, lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m: Dict[int, np.ndarray] = {}
        self._v: Dict[int, np.ndarray] = {}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p in self.params:
            if p.frozen:
                continue
            key = id(p)
            if key not in self._m:
                self._m[key] = np.zeros_like(p.value)
                self._v[key] = np.zeros_like(p.value)
            m, v = self._m[key], self._v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.value -= update.astype(p.value.dtype, copy=False)
