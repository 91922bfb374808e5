"""Parameter registry and small neural building blocks.

Parameters live in a ParameterStore under hierarchical dotted names, each
tagged FROZEN or TUNED. Model components register their weights at
construction time and read them back by name at call time, which keeps
checkpointing, freezing, and the tuned-fraction audit trivial.
"""
from __future__ import annotations

import hashlib

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError, ValidationError

FROZEN = "frozen"
TUNED = "tuned"


class Parameter:
    __slots__ = ("name", "tensor", "tag")

    def __init__(self, name: str, tensor: Tensor, tag: str):
        self.name = name
        self.tensor = tensor
        self.tag = tag


class ParameterStore:
    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, value, tag: str = TUNED) -> Tensor:
        if name in self._params:
            raise ValidationError(f"parameter {name!r} registered twice")
        if tag not in (FROZEN, TUNED):
            raise ValidationError(f"unknown parameter tag {tag!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self._params[name] = Parameter(name, t, tag)
        return t

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def get(self, name: str) -> Tensor:
        return self._params[name].tensor

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def parameters(self, tag: str | None = None) -> list[Parameter]:
        if tag is None:
            return list(self._params.values())
        return [p for p in self._params.values() if p.tag == tag]

    def retag(self, prefix: str, tag: str) -> int:
        """Retag every parameter whose name starts with prefix; returns count."""
        if tag not in (FROZEN, TUNED):
            raise ValidationError(f"unknown parameter tag {tag!r}")
        n = 0
        for p in self._params.values():
            if p.name.startswith(prefix):
                p.tag = tag
                n += 1
        return n

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.tensor.grad = None

    def scalar_count(self, tag: str | None = None) -> int:
        return sum(p.tensor.size for p in self.parameters(tag))

    def tuned_fraction(self) -> float:
        total = self.scalar_count()
        if total == 0:
            return 0.0
        return self.scalar_count(TUNED) / total

    def hash_values(self, tag: str | None = None) -> str:
        """SHA-256 over (name, float64 bytes) of the selected parameters."""
        h = hashlib.sha256()
        for p in sorted(self.parameters(tag), key=lambda p: p.name):
            h.update(p.name.encode())
            h.update(np.ascontiguousarray(p.tensor.data, dtype="<f8").tobytes())
        return h.hexdigest()


# -- building blocks ------------------------------------------------------------


def init_linear_weight(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out))


class Linear:
    """y = x W + b with parameters registered under name.w / name.b."""

    def __init__(self, store: ParameterStore, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator, tag: str, bias: bool = True):
        self.w = store.add(f"{name}.w", init_linear_weight(rng, d_in, d_out), tag)
        self.b = store.add(f"{name}.b", np.zeros(d_out), tag) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.w)
        if self.b is not None:
            y = y + self.b
        return y


class LayerNorm:
    def __init__(self, store: ParameterStore, name: str, dim: int, tag: str):
        self.gamma = store.add(f"{name}.gamma", np.ones(dim), tag)
        self.beta = store.add(f"{name}.beta", np.zeros(dim), tag)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)


def sdpa(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    """Scaled dot-product attention with an optional additive mask.

    q: (..., Sq, Dh), k/v: (..., Sk, Dh); mask broadcasts over the score
    shape (..., Sq, Sk) and is added before the softmax (-inf blocks a key).
    """
    dh = q.shape[-1]
    if k.shape[-1] != dh:
        raise ShapeError(f"sdpa: query/key feature dims differ, {q.shape} vs {k.shape}")
    scores = ad.matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
    if mask is not None:
        scores = scores + mask
    return ad.matmul(ad.softmax(scores, axis=-1), v)


class MultiHeadAttention:
    """Standard multi-head attention over (B, S, D) tensors."""

    def __init__(self, store: ParameterStore, name: str, d_model: int, n_heads: int,
                 rng: np.random.Generator, tag: str):
        if d_model % n_heads:
            raise ValidationError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.wq = Linear(store, f"{name}.wq", d_model, d_model, rng, tag)
        self.wk = Linear(store, f"{name}.wk", d_model, d_model, rng, tag)
        self.wv = Linear(store, f"{name}.wv", d_model, d_model, rng, tag)
        self.wo = Linear(store, f"{name}.wo", d_model, d_model, rng, tag)

    def _split(self, x: Tensor) -> Tensor:
        b, s, d = x.shape
        return x.reshape(b, s, self.n_heads, self.d_head).transpose((0, 2, 1, 3))

    def _merge(self, x: Tensor) -> Tensor:
        b, h, s, dh = x.shape
        return x.transpose((0, 2, 1, 3)).reshape(b, s, h * dh)

    def __call__(self, query: Tensor, keyval: Tensor, mask=None) -> Tensor:
        q = self._split(self.wq(query))
        k = self._split(self.wk(keyval))
        v = self._split(self.wv(keyval))
        out = sdpa(q, k, v, mask=mask)
        return self.wo(self._merge(out))


class FeedForward:
    def __init__(self, store: ParameterStore, name: str, d_model: int, d_hidden: int,
                 rng: np.random.Generator, tag: str):
        self.fc1 = Linear(store, f"{name}.fc1", d_model, d_hidden, rng, tag)
        self.fc2 = Linear(store, f"{name}.fc2", d_hidden, d_model, rng, tag)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


def causal_mask(n: int) -> np.ndarray:
    """(n, n) additive mask: 0 on and below the diagonal, -inf above."""
    m = np.full((n, n), -np.inf)
    return np.triu(m, k=1)


def masked_mean(values: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of values over positions where mask is nonzero."""
    mask = np.asarray(mask, dtype=values.data.dtype)
    total = float(mask.sum())
    if total == 0.0:
        raise ValidationError("masked_mean: empty mask")
    return ad.tsum(values * mask) * (1.0 / total)
