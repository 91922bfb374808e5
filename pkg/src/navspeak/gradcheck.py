"""Finite-difference verification of reverse-mode gradients.

Central differences (f(x+h) - f(x-h)) / 2h in 64-bit mode against the
gradients produced by Tensor.backward(). The relative error uses
|a - n| / max(|a|, |n|) with a both-below-1e-7 pass for effectively-zero
pairs. Callers are responsible for sampling points away from kinks
(|x| for l1, texel-grid lines for bilinear sampling).
"""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor, default_dtype
from .errors import ValidationError

ZERO_FLOOR = 1e-7


def grad_check(f, params, h: float = 1e-5, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Return the max relative error between analytic and numeric gradients.

    f: zero-argument callable returning a scalar Tensor, closed over params.
    params: the leaf Tensors to perturb. Tensors not listed (frozen inputs)
    are neither perturbed nor compared. For large parameters, max_entries
    bounds how many coordinates are probed per tensor (sampled with rng).
    """
    if default_dtype() is not np.float64:
        raise ValidationError("grad_check requires the float64 checking mode")
    params = list(params)
    for p in params:
        p.grad = None
    out = f()
    if out.data.size != 1:
        raise ValidationError(f"grad_check needs a scalar objective, got shape {out.data.shape}")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else np.array(p.grad) for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        n_entries = flat.size
        if max_entries is not None and n_entries > max_entries:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(n_entries, size=max_entries, replace=False)
        else:
            idxs = range(n_entries)
        for i in idxs:
            old = flat[i]
            flat[i] = old + h
            f_plus = float(f().data)
            flat[i] = old - h
            f_minus = float(f().data)
            flat[i] = old
            numeric = (f_plus - f_minus) / (2.0 * h)
            ref = max(abs(aflat[i]), abs(numeric))
            if ref < ZERO_FLOOR:
                continue
            rel = abs(aflat[i] - numeric) / ref
            if rel > worst:
                worst = rel
    return worst
