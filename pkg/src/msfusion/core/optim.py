"""Adam with bias correction and the step learning-rate schedule."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..errors import ConfigError
from .tensor import Tensor


def lr_at_epoch(initial: float, epoch: int, step: int = 25, factor: float = 0.1) -> float:
    """Learning rate after ``epoch // step`` decays by ``factor``."""
    if epoch < 0:
        raise ConfigError(f"epoch must be non-negative, got {epoch}")
    if step < 1:
        raise ConfigError(f"decay step must be >= 1, got {step}")
    return initial * factor ** (epoch // step)


class Adam:
    """Adam over a fixed, ordered list of parameters.

    ``class_weights`` is carried alongside the moment buffers so the
    training loop and the optimizer share one record of the loss setup;
    the update itself does not use them.
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        class_weights: Sequence[float] | None = None,
    ):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = (float(b) for b in betas)
        self.eps = float(eps)
        self.class_weights = None if class_weights is None else tuple(float(w) for w in class_weights)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, grads: Sequence[np.ndarray | None] | None = None) -> None:
        """Apply one update in place. ``grads`` defaults to each parameter's ``.grad``."""
        if grads is None:
            grads = [p.grad for p in self.params]
        if len(grads) != len(self.params):
            raise ConfigError(f"{len(grads)} gradients for {len(self.params)} parameters")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        step_size = self.lr / corr1
        sqrt_corr2 = math.sqrt(corr2)
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                continue
            if g.shape != p.shape:
                raise ConfigError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            denom = np.sqrt(v) / sqrt_corr2 + self.eps
            p.data -= (step_size * m / denom).astype(p.dtype, copy=False)


def adam_step(opt: Adam, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> list[Tensor]:
    """Functional-style wrapper: update ``params`` with ``grads`` and return them."""
    if [id(p) for p in params] != [id(p) for p in opt.params]:
        raise ConfigError("parameters do not match the optimizer's registry")
    opt.step(grads)
    return list(params)
