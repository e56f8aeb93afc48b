"""3-D convolution, transposed convolution and trilinear resizing.

Layouts follow the usual channels-first video convention: activations are
``(B, C, T, H, W)``; a convolution kernel is ``(C_out, C_in, kT, kH, kW)`` and a
transposed-convolution kernel is ``(C_in, C_out, kT, kH, kW)``, so that
``transposed_conv3d(y, w)`` is exactly the input-gradient of ``conv3d(., w)``.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor, as_tensor

AXES = ("T", "H", "W")


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 values, got {v}")
    return v


def conv_output_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def transposed_output_size(n: int, k: int, s: int, p: int) -> int:
    return (n - 1) * s - 2 * p + k


def _check_conv(x_shape, w_shape, stride, padding, transposed=False):
    if len(x_shape) != 5:
        raise ValueError(f"input must be 5-D (B, C, T, H, W), got shape {x_shape}")
    if len(w_shape) != 5:
        raise ValueError(f"kernel must be 5-D, got shape {w_shape}")
    if any(d == 0 for d in x_shape) or any(d == 0 for d in w_shape):
        raise ValueError(f"zero-size tensor: input {x_shape}, kernel {w_shape}")
    cin = w_shape[0] if transposed else w_shape[1]
    if x_shape[1] != cin:
        raise ValueError(f"channel axis mismatch: input has {x_shape[1]} channels, kernel expects {cin}")
    for ax, s, p in zip(AXES, stride, padding):
        if s < 1:
            raise ValueError(f"stride along {ax} must be >= 1, got {s}")
        if p < 0:
            raise ValueError(f"padding along {ax} must be >= 0, got {p}")
    if not transposed:
        for i, ax in enumerate(AXES):
            if w_shape[2 + i] > x_shape[2 + i] + 2 * padding[i]:
                raise ValueError(
                    f"kernel larger than padded input along {ax}: {w_shape[2 + i]} > {x_shape[2 + i] + 2 * padding[i]}"
                )
    else:
        for i, ax in enumerate(AXES):
            if transposed_output_size(x_shape[2 + i], w_shape[2 + i], stride[i], padding[i]) < 1:
                raise ValueError(f"transposed convolution output along {ax} would be empty")


def _out_dims(x_shape, w_shape, stride, padding):
    return tuple(conv_output_size(x_shape[2 + i], w_shape[2 + i], stride[i], padding[i]) for i in range(3))


def _tap(xp: np.ndarray, i: int, j: int, k: int, out_dims, stride) -> np.ndarray:
    sT, sH, sW = stride
    To, Ho, Wo = out_dims
    return xp[:, :, i:i + sT * (To - 1) + 1:sT, j:j + sH * (Ho - 1) + 1:sH, k:k + sW * (Wo - 1) + 1:sW]


def conv3d_forward(x: np.ndarray, w: np.ndarray, stride, padding) -> np.ndarray:
    """Raw array convolution (cross-correlation), no bias."""
    stride, padding = _triple(stride), _triple(padding)
    pT, pH, pW = padding
    xp = np.pad(x, ((0, 0), (0, 0), (pT, pT), (pH, pH), (pW, pW))) if any(padding) else x
    od = _out_dims(x.shape, w.shape, stride, padding)
    B = x.shape[0]
    Cout, Cin, kT, kH, kW = w.shape
    if (kT, kH, kW) == (1, 1, 1) and stride == (1, 1, 1):
        out = np.einsum("oc,bcthw->bothw", w[:, :, 0, 0, 0], xp, optimize=True)
        return np.ascontiguousarray(out)
    # gather all taps into one (B, T', H', W', Cin*kT*kH*kW) matrix then a single GEMM
    cols = np.empty((B, Cin, kT, kH, kW) + od, dtype=x.dtype)
    for i in range(kT):
        for j in range(kH):
            for k in range(kW):
                cols[:, :, i, j, k] = _tap(xp, i, j, k, od, stride)
    cols = cols.reshape(B, Cin * kT * kH * kW, -1)
    out = np.matmul(w.reshape(Cout, -1), cols)
    return out.reshape((B, Cout) + od)


def conv3d_backward_input(g: np.ndarray, w: np.ndarray, stride, padding, in_shape) -> np.ndarray:
    """Adjoint of :func:`conv3d_forward` with respect to its input."""
    stride, padding = _triple(stride), _triple(padding)
    pT, pH, pW = padding
    B, Cin, T, H, W = in_shape
    Cout, _, kT, kH, kW = w.shape
    od = g.shape[2:]
    gp = np.zeros((B, Cin, T + 2 * pT, H + 2 * pH, W + 2 * pW), dtype=g.dtype)
    if (kT, kH, kW) == (1, 1, 1) and stride == (1, 1, 1):
        gp[:] = np.einsum("oc,bothw->bcthw", w[:, :, 0, 0, 0], g, optimize=True)
    else:
        cols = np.matmul(w.reshape(Cout, -1).T, g.reshape(B, Cout, -1))
        cols = cols.reshape((B, Cin, kT, kH, kW) + tuple(od))
        sT, sH, sW = stride
        To, Ho, Wo = od
        for i in range(kT):
            for j in range(kH):
                for k in range(kW):
                    gp[:, :, i:i + sT * (To - 1) + 1:sT, j:j + sH * (Ho - 1) + 1:sH, k:k + sW * (Wo - 1) + 1:sW] += cols[:, :, i, j, k]
    return gp[:, :, pT:pT + T, pH:pH + H, pW:pW + W]


def conv3d_backward_kernel(x: np.ndarray, g: np.ndarray, stride, padding, w_shape) -> np.ndarray:
    stride, padding = _triple(stride), _triple(padding)
    pT, pH, pW = padding
    xp = np.pad(x, ((0, 0), (0, 0), (pT, pT), (pH, pH), (pW, pW))) if any(padding) else x
    Cout, Cin, kT, kH, kW = w_shape
    od = g.shape[2:]
    B = x.shape[0]
    cols = np.empty((B, Cin, kT, kH, kW) + tuple(od), dtype=x.dtype)
    for i in range(kT):
        for j in range(kH):
            for k in range(kW):
                cols[:, :, i, j, k] = _tap(xp, i, j, k, od, stride)
    cols = cols.reshape(B, Cin * kT * kH * kW, -1)
    gw = np.einsum("bon,bkn->ok", g.reshape(B, Cout, -1), cols, optimize=True)
    return gw.reshape(w_shape)


def conv3d(x, kernel, bias=None, stride=1, padding=0) -> Tensor:
    """Differentiable 3-D cross-correlation over ``(B, C, T, H, W)`` input."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    stride, padding = _triple(stride), _triple(padding)
    _check_conv(x.shape, kernel.shape, stride, padding)
    xd, wd = x.data, kernel.data
    out = conv3d_forward(xd, wd, stride, padding)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (kernel.shape[0],):
            raise ValueError(f"bias must have shape ({kernel.shape[0]},), got {bias.shape}")
        out = out + bias.data.reshape(1, -1, 1, 1, 1)
        parents.append(bias)

    def bw(g):
        gx = conv3d_backward_input(g, wd, stride, padding, xd.shape) if x.requires_grad else None
        gw = conv3d_backward_kernel(xd, g, stride, padding, wd.shape) if kernel.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)) if bias.requires_grad else None)
        return grads

    return Tensor._from_op(out, parents, bw, "conv3d")


def transposed_conv3d(x, kernel, bias=None, stride=1, padding=0) -> Tensor:
    """Differentiable transposed 3-D convolution; kernel is ``(C_in, C_out, kT, kH, kW)``."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    stride, padding = _triple(stride), _triple(padding)
    _check_conv(x.shape, kernel.shape, stride, padding, transposed=True)
    xd, wd = x.data, kernel.data
    B = xd.shape[0]
    out_dims = tuple(transposed_output_size(xd.shape[2 + i], wd.shape[2 + i], stride[i], padding[i]) for i in range(3))
    out_shape = (B, wd.shape[1]) + out_dims
    out = conv3d_backward_input(xd, wd, stride, padding, out_shape)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (kernel.shape[1],):
            raise ValueError(f"bias must have shape ({kernel.shape[1]},), got {bias.shape}")
        out = out + bias.data.reshape(1, -1, 1, 1, 1)
        parents.append(bias)

    def bw(g):
        gx = conv3d_forward(g, wd, stride, padding) if x.requires_grad else None
        gw = conv3d_backward_kernel(g, xd, stride, padding, wd.shape) if kernel.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)) if bias.requires_grad else None)
        return grads

    return Tensor._from_op(np.ascontiguousarray(out), parents, bw, "transposed_conv3d")


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Linear resampling weights (align-corners): shape ``(n_out, n_in)``."""
    A = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        A[:, 0] = 1.0
        return A
    if n_out == 1:
        A[0, 0] = 1.0
        return A
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    A[np.arange(n_out), lo] = 1.0 - frac
    A[np.arange(n_out), lo + 1] += frac
    return A


def resize_axis(x, axis: int, n_out: int) -> Tensor:
    """Linearly resample one axis of ``x`` to ``n_out`` samples (align-corners)."""
    x = as_tensor(x)
    n_in = x.shape[axis]
    if n_out < 1:
        raise ValueError(f"target size must be >= 1, got {n_out}")
    if n_out == n_in:
        return x
    A = interp_matrix(n_in, n_out, x.dtype)
    xd = x.data

    def apply(m, arr):
        moved = np.moveaxis(arr, axis, -1)
        return np.moveaxis(moved @ m.T, -1, axis)

    out = np.ascontiguousarray(apply(A, xd))
    return Tensor._from_op(out, (x,), lambda g: (np.ascontiguousarray(apply(A.T, g)),), "resize_axis")


def trilinear_interpolate(x, target_dims: Sequence[int]) -> Tensor:
    """Resize the (T, H, W) axes of a ``(B, C, T, H, W)`` tensor, align-corners."""
    x = as_tensor(x)
    if x.ndim != 5:
        raise ValueError(f"input must be 5-D (B, C, T, H, W), got shape {x.shape}")
    target_dims = tuple(int(d) for d in target_dims)
    if len(target_dims) != 3 or any(d < 1 for d in target_dims):
        raise ValueError(f"target dims must be three positive sizes, got {target_dims}")
    out = x
    for i, n in enumerate(target_dims):
        out = resize_axis(out, 2 + i, n)
    return out
