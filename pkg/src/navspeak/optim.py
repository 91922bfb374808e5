"""AdamW with decoupled weight decay plus global gradient-norm clipping.

Only TUNED parameters receive optimizer state or updates; FROZEN parameters
are never touched, which is what the parameter-efficiency contract audits.
"""
from __future__ import annotations

import numpy as np

from .errors import TrainingError
from .nn import TUNED, ParameterStore


def clip_global_norm(params, max_norm: float = 1.0) -> float:
    """Scale all gradients in place so their joint L2 norm is <= max_norm.

    Returns the pre-clip norm. Parameters without gradients contribute 0.
    """
    total = 0.0
    grads = []
    for p in params:
        g = p.tensor.grad
        if g is None:
            continue
        total += float((g * g).sum())
        grads.append(p)
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in grads:
            p.tensor.grad = p.tensor.grad * scale
    return norm


class AdamW:
    """Decoupled-decay Adam: p <- p*(1 - lr*wd) - lr*mhat/(sqrt(vhat)+eps)."""

    def __init__(self, store: ParameterStore, lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01, grad_clip: float | None = 1.0):
        self.store = store
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.t = 0
        # Snapshot the tuned set: a later retag means building a new optimizer,
        # matching the invariant that state exists only for TUNED parameters.
        self._tuned = [p.name for p in store.parameters(TUNED)]
        self._m = {name: np.zeros_like(store.get(name).data) for name in self._tuned}
        self._v = {name: np.zeros_like(store.get(name).data) for name in self._tuned}

    def zero_grad(self) -> None:
        self.store.zero_grad()

    def step(self) -> None:
        params = [self.store[name] for name in self._tuned]
        for p in params:
            g = p.tensor.grad
            if g is None:
                raise TrainingError(f"no gradient for tuned parameter {p.name!r}")
            if not np.isfinite(g).all():
                raise TrainingError(f"non-finite gradient for parameter {p.name!r}")
        if self.grad_clip is not None:
            clip_global_norm(params, self.grad_clip)
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p in params:
            g = p.tensor.grad
            m = self._m[p.name]
            v = self._v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            data = p.tensor.data
            if self.weight_decay:
                data *= 1.0 - self.lr * self.weight_decay
            data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
