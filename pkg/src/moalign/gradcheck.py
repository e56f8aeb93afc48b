"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradReport:
    max_rel_err: float
    max_abs_err: float
    passed: bool
    numeric: list[np.ndarray]
    analytic: list[np.ndarray]

    @property
    def pass_(self) -> bool:
        return self.passed


def _as_list(x):
    return list(x) if isinstance(x, (list, tuple)) else [x]


def finite_diff_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    atol: float = 1e-7,
) -> GradReport:
    """Compare autodiff gradients of scalar ``f`` against central differences.

    ``x`` is one tensor or a list of tensors; every one is perturbed element
    by element in 64-bit. The relative error of an element is
    ``|a - n| / max(|a|, |n|, atol)`` so that gradients that are exactly zero
    do not blow up the ratio.
    """
    xs = _as_list(x)
    for t in xs:
        if t.dtype != np.float64:
            raise TypeError("finite_diff_check runs in 64-bit; cast inputs to float64")
        t.requires_grad = True
        t.grad = None

    out = f(*xs)
    if out.size != 1:
        raise ValueError(f"finite_diff_check needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]

    numeric = []
    for t in xs:
        flat = t.data.reshape(-1)
        num = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(*xs).data)
            flat[i] = orig - h
            fm = float(f(*xs).data)
            flat[i] = orig
            num[i] = (fp - fm) / (2 * h)
        numeric.append(num.reshape(t.shape))

    max_rel = 0.0
    max_abs = 0.0
    for a, n in zip(analytic, numeric):
        diff = np.abs(a - n)
        scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), atol)
        if diff.size:
            max_rel = max(max_rel, float((diff / scale).max()))
            max_abs = max(max_abs, float(diff.max()))
    for t in xs:
        t.grad = None
    return GradReport(max_rel, max_abs, max_rel <= tol, numeric, analytic)
