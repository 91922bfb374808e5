"""Dense-tensor engine with reverse-mode automatic differentiation.

A Tensor wraps a numpy array plus an optional gradient slot and a backward
closure. Graphs are built eagerly; Tensor.backward() walks the record in
reverse topological order exactly once per node. The op vocabulary here is
complete for every model component in the package: elementwise arithmetic,
matmul with batch broadcasting, reductions, reshaping, concat/slice,
embedding gather, softmax, layer norm, GELU, cross-entropy with integer
targets, absolute value (l1 building block), and bilinear sampling.

Two numeric modes exist: float64 (default, used for all gradient checking
and acceptance runs) and float32 (optional storage mode for training).
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from .errors import ShapeError, ValidationError

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ShapeError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def use_dtype(dtype):
    """Temporarily switch the default dtype (tests and training mode)."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextmanager
def no_grad():
    """Disable graph recording; everything computed inside is a constant."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self._parents = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _make(data, parents, backward):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._parents = ()
        out._backward = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad) -> None:
        # First contribution borrows the reference. That is safe because
        # gradient buffers are never mutated in place: a second contribution
        # rebinds to a fresh `old + new` array, and so do clipping and the
        # optimizer. Skipping the defensive copy here is a large win on
        # graphs with many single-consumer nodes.
        if self.grad is None:
            self.grad = grad
        else:
            self.grad = self.grad + grad

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward() without an explicit gradient needs a scalar, got shape {self.data.shape}"
                )
            grad = np.ones_like(self.data)
        else:
            # Copy: the seed may be caller-owned, and _accumulate borrows.
            grad = np.array(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ShapeError(f"gradient shape {grad.shape} does not match tensor shape {self.data.shape}")
        # Iterative topological sort; recursion would overflow on long chains.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p._parents:
                    stack.append((p, False))
        self._accumulate(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()
        # Backward closures capture their output node, so every interior node
        # sits in a reference cycle that only the cyclic collector would
        # reclaim. Training builds a large graph per step; break the cycles
        # here so graphs die by refcount. Interior grads go with them (leaf
        # grads survive; leaves never enter the topo list). A graph is
        # therefore consumed by backward() and cannot be replayed.
        for node in topo:
            if node._parents:
                node._backward = None
                node._parents = ()
                node.grad = None

    # -- operator sugar --------------------------------------------------------

    # Make numpy yield to the reflected operators below: without this,
    # ndarray + Tensor silently builds an object array instead of a Tensor.
    __array_ufunc__ = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        return mul(self, power(other, -1.0))

    def __rtruediv__(self, other):
        return mul(_wrap(other), power(self, -1.0))

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.data, b.data, "add")
    out = Tensor._make(a.data + b.data, (a, b), None)

    def backward():
        g = out.grad
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(g, b.data.shape))

    out._backward = backward
    return out


def neg(a) -> Tensor:
    a = _wrap(a)
    out = Tensor._make(-a.data, (a,), None)

    def backward():
        a._accumulate(-out.grad)

    out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.data, b.data, "mul")
    out = Tensor._make(a.data * b.data, (a, b), None)

    def backward():
        g = out.grad
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    out._backward = backward
    return out


def power(a, exponent: float) -> Tensor:
    a = _wrap(a)
    exponent = float(exponent)
    out = Tensor._make(a.data**exponent, (a,), None)

    def backward():
        a._accumulate(out.grad * exponent * a.data ** (exponent - 1.0))

    out._backward = backward
    return out


def exp(a) -> Tensor:
    a = _wrap(a)
    out = Tensor._make(np.exp(a.data), (a,), None)

    def backward():
        a._accumulate(out.grad * out.data)

    out._backward = backward
    return out


def log(a) -> Tensor:
    a = _wrap(a)
    out = Tensor._make(np.log(a.data), (a,), None)

    def backward():
        a._accumulate(out.grad / a.data)

    out._backward = backward
    return out


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = Tensor._make(np.tanh(a.data), (a,), None)

    def backward():
        a._accumulate(out.grad * (1.0 - out.data * out.data))

    out._backward = backward
    return out


def absolute(a) -> Tensor:
    """|a| with subgradient sign(0) = 0 (the l1 building block)."""
    a = _wrap(a)
    out = Tensor._make(np.abs(a.data), (a,), None)

    def backward():
        a._accumulate(out.grad * np.sign(a.data))

    out._backward = backward
    return out


def gelu(a) -> Tensor:
    """Exact GELU: 0.5 x (1 + erf(x / sqrt(2)))."""
    a = _wrap(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    out = Tensor._make(x * cdf, (a,), None)

    def backward():
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        a._accumulate(out.grad * (cdf + x * pdf))

    out._backward = backward
    return out


# -- linear algebra ---------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.data.shape} vs {b.data.shape}")
    try:
        np.broadcast_shapes(a.data.shape[:-2], b.data.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions differ, {a.data.shape} vs {b.data.shape}") from None
    out = Tensor._make(a.data @ b.data, (a, b), None)

    def backward():
        g = out.grad
        if a.requires_grad or a._parents:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad or b._parents:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.data.shape))

    out._backward = backward
    return out


# -- reductions and shaping -------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)
    out = Tensor._make(np.asarray(out_data), (a,), None)

    def backward():
        g = out.grad
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, tuple(ax % a.data.ndim for ax in axes))
        a._accumulate(np.broadcast_to(g, a.data.shape))

    out._backward = backward
    return out


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out = Tensor._make(a.data.reshape(shape), (a,), None)

    def backward():
        a._accumulate(out.grad.reshape(a.data.shape))

    out._backward = backward
    return out


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    out = Tensor._make(np.transpose(a.data, axes), (a,), None)

    def backward():
        if axes is None:
            a._accumulate(np.transpose(out.grad))
        else:
            inverse = np.argsort(axes)
            a._accumulate(np.transpose(out.grad, inverse))

    out._backward = backward
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    out = Tensor._make(out_data, tuple(tensors), None)
    sizes = [t.data.shape[axis] for t in tensors]

    def backward():
        start = 0
        for t, s in zip(tensors, sizes):
            if t.requires_grad or t._parents:
                index = [slice(None)] * out_data.ndim
                index[axis] = slice(start, start + s)
                t._accumulate(out.grad[tuple(index)])
            start += s

    out._backward = backward
    return out


def getitem(a, index) -> Tensor:
    """Basic and integer-array indexing; backward scatter-adds."""
    a = _wrap(a)
    out = Tensor._make(np.asarray(a.data[index]), (a,), None)

    def backward():
        g = np.zeros_like(a.data)
        np.add.at(g, index, out.grad)
        a._accumulate(g)

    out._backward = backward
    return out


def pad(a, pad_width) -> Tensor:
    """Zero padding; pad_width follows np.pad's per-axis (before, after) form."""
    a = _wrap(a)
    out = Tensor._make(np.pad(a.data, pad_width), (a,), None)

    def backward():
        index = tuple(slice(b, b + s) for (b, _), s in zip(pad_width, a.data.shape))
        a._accumulate(out.grad[index])

    out._backward = backward
    return out


def embedding(table, ids) -> Tensor:
    """Gather rows of a (V, D) table by an integer id array."""
    table = _wrap(table)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError(f"embedding ids must be integers, got dtype {ids.dtype}")
    out = Tensor._make(table.data[ids], (table,), None)

    def backward():
        g = np.zeros_like(table.data)
        np.add.at(g, ids, out.grad)
        table._accumulate(g)

    out._backward = backward
    return out


# -- normalization and activations ------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor._make(y, (a,), None)

    def backward():
        g = out.grad
        dot = (g * y).sum(axis=axis, keepdims=True)
        a._accumulate(y * (g - dot))

    out._backward = backward
    return out


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = Tensor._make(y, (a,), None)

    def backward():
        g = out.grad
        a._accumulate(g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    out._backward = backward
    return out


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean unit variance, then scale/shift."""
    a, gamma, beta = _wrap(a), _wrap(gamma), _wrap(beta)
    if gamma.data.shape != a.data.shape[-1:] or beta.data.shape != a.data.shape[-1:]:
        raise ShapeError(
            f"layer_norm: gamma/beta shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match feature dim of {a.data.shape}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out = Tensor._make(xhat * gamma.data + beta.data, (a, gamma, beta), None)

    def backward():
        g = out.grad
        if gamma.requires_grad or gamma._parents:
            gamma._accumulate((g * xhat).reshape(-1, a.data.shape[-1]).sum(axis=0))
        if beta.requires_grad or beta._parents:
            beta._accumulate(g.reshape(-1, a.data.shape[-1]).sum(axis=0))
        if a.requires_grad or a._parents:
            gx = g * gamma.data
            n = a.data.shape[-1]
            dot_xhat = (gx * xhat).mean(axis=-1, keepdims=True)
            mean_gx = gx.mean(axis=-1, keepdims=True)
            a._accumulate(inv * (gx - mean_gx - xhat * dot_xhat))

    out._backward = backward
    return out


def cross_entropy(logits, targets) -> Tensor:
    """Per-row negative log-likelihood of integer targets.

    logits: (..., V); targets: integer array of shape (...). Returns a tensor
    of shape (...) holding -log softmax(logits)[target] per row; reductions
    (mean, masking) compose on top.
    """
    logits = _wrap(logits)
    targets = np.asarray(targets)
    if targets.shape != logits.data.shape[:-1]:
        raise ShapeError(
            f"cross_entropy: target shape {targets.shape} does not match logits {logits.data.shape}"
        )
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    out = Tensor._make(-picked, (logits,), None)

    def backward():
        g = out.grad[..., None]
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        logits._accumulate(g * (p - onehot))

    out._backward = backward
    return out


def bilinear_sample(fmap, locations) -> Tensor:
    """Bilinear interpolation of a feature map at continuous locations.

    fmap: (C, H, W) or batched (B, C, H, W). locations: (N, 2) or (B, N, 2)
    holding (u, v) with u along W and v along H, in texel-center units
    (integer u = texel column center). Out-of-bounds texel contributions are
    zero. Differentiable in both the map and the locations; on texel-grid
    lines the location derivative is the right-limit (floor-cell) slope.
    """
    fmap, locations = _wrap(fmap), _wrap(locations)
    squeeze = fmap.ndim == 3
    fdata = fmap.data[None] if squeeze else fmap.data
    ldata = locations.data[None] if locations.ndim == 2 else locations.data
    if fdata.ndim != 4 or ldata.ndim != 3 or ldata.shape[-1] != 2:
        raise ShapeError(f"bilinear_sample: bad shapes {fmap.data.shape} and {locations.data.shape}")
    if fdata.shape[0] != ldata.shape[0]:
        raise ShapeError(
            f"bilinear_sample: batch sizes differ, {fmap.data.shape} vs {locations.data.shape}"
        )
    B, C, H, W = fdata.shape
    N = ldata.shape[1]
    u = ldata[..., 0]
    v = ldata[..., 1]
    i0 = np.floor(u).astype(np.int64)
    j0 = np.floor(v).astype(np.int64)
    du = u - i0
    dv = v - j0
    table = np.ascontiguousarray(np.moveaxis(fdata, 1, -1)).reshape(B * H * W, C)

    # All four corners at once, axis 0 ordered (0,0), (1,0), (0,1), (1,1).
    ii = np.stack([i0, i0 + 1, i0, i0 + 1])                  # (4, B, N)
    jj = np.stack([j0, j0, j0 + 1, j0 + 1])
    inb = (ii >= 0) & (ii < W) & (jj >= 0) & (jj < H)
    wu = np.stack([1.0 - du, du, 1.0 - du, du])
    wv = np.stack([1.0 - dv, 1.0 - dv, dv, dv])
    weights = wu * wv * inb                                  # (4, B, N)
    flat_idx = (np.arange(B)[:, None] * H + np.clip(jj, 0, H - 1)) * W \
        + np.clip(ii, 0, W - 1)                              # (4, B, N)
    vals = np.take(table, flat_idx.reshape(-1), axis=0).reshape(4, B, N, C)

    acc = np.einsum("kbn,kbnc->bnc", weights, vals)
    out_data = np.swapaxes(acc, 1, 2)  # (B, C, N)
    if squeeze:
        out_data = out_data[0]
    out = Tensor._make(out_data, (fmap, locations), None)

    def backward():
        g = out.grad
        gb = g[None] if squeeze else g  # (B, C, N)
        gbn = np.ascontiguousarray(np.swapaxes(gb, 1, 2))  # (B, N, C)
        if fmap.requires_grad or fmap._parents:
            # Accumulate in (B, H, W, C) layout: the flat view below is then a
            # true view, so np.add.at lands in the buffer we keep.
            gf = np.zeros((B, H, W, C), dtype=fdata.dtype)
            w = weights[..., None] * gbn                     # (4, B, N, C)
            np.add.at(gf.reshape(B * H * W, C), flat_idx.reshape(-1),
                      w.reshape(4 * B * N, C))
            gf_final = np.moveaxis(gf, -1, 1)  # (B, C, H, W)
            fmap._accumulate(gf_final[0] if squeeze else gf_final)
        if locations.requires_grad or locations._parents:
            contrib = np.einsum("kbnc,bnc->kbn", vals, gbn) * inb
            sign_u = np.array([-1.0, 1.0, -1.0, 1.0])[:, None, None]
            sign_v = np.array([-1.0, -1.0, 1.0, 1.0])[:, None, None]
            gu = (sign_u * wv * contrib).sum(axis=0)
            gv = (sign_v * wu * contrib).sum(axis=0)
            gl = np.stack([gu, gv], axis=-1)
            locations._accumulate(gl[0] if locations.ndim == 2 else gl)

    out._backward = backward
    return out


def stack(tensors, axis: int = 0) -> Tensor:
    """Stack along a new axis (thin wrapper over reshape + concat)."""
    tensors = [_wrap(t) for t in tensors]
    expanded = []
    for t in tensors:
        shape = list(t.data.shape)
        shape.insert(axis if axis >= 0 else axis + t.data.ndim + 1, 1)
        expanded.append(reshape(t, tuple(shape)))
    return concat(expanded, axis=axis)


def cosine_similarity(a, b, eps: float = 0.0) -> Tensor:
    """Cosine of two vectors (last-axis flattening not applied; 1-d expected).

    Raises on zero-norm inputs: callers that need the depth-consistency
    contract get the spec'd error instead of a NaN.
    """
    a, b = _wrap(a), _wrap(b)
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na == 0.0 or nb == 0.0:
        raise ValidationError(f"cosine_similarity: zero-norm input (norms {na}, {nb})")
    num = tsum(mul(a, b))
    den = mul(sqrt(tsum(mul(a, a))), sqrt(tsum(mul(b, b))))
    return mul(num, power(den, -1.0))
