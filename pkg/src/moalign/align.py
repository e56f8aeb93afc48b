"""Representation-alignment losses.

Feature grids are ``[F, H, W, D]`` (or batched ``[B, F, H, W, D]``). Tokens are
flattened frame-major, so token ``i`` of the flattened sequence lives in
frame ``i // (H * W)``.

* spatial / temporal cosine-similarity matrices,
* the frame-distance weight matrix (zero inside a frame, ``exp(-dist / tau)``
  across frames),
* the soft relational loss, its unweighted variant, patchwise cosine (REPA)
  alignment and the weighted total objective.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import tensor as tc
from .tensor import Tensor

EPS = 1e-8


def _gram_rows(xn: Tensor, start: int, stop: int) -> Tensor:
    """``xn[..., start:stop, :] @ xn[..., :, :]^T`` with a fixed per-entry summation order.

    Each entry is an explicit product followed by a sum over the contiguous
    feature axis, so an entry's value does not depend on how many rows are
    computed together.
    """
    x = xn.data
    rows = x[..., start:stop, :]
    out = (rows[..., :, None, :] * x[..., None, :, :]).sum(axis=-1)

    def bw(g):
        gx = np.swapaxes(g, -1, -2) @ rows
        gx[..., start:stop, :] += g @ x
        return (gx,)

    return Tensor._from_op(out, (xn,), bw, "gram_rows")


def _tokens(x) -> Tensor:
    x = tc.as_tensor(x)
    if x.ndim < 2:
        raise ValueError(f"token matrix needs at least 2 dims, got shape {x.shape}")
    if x.shape[-2] == 0:
        raise ValueError("token matrix has zero tokens")
    return x


def spatial_similarity(X_f, eps: float = EPS) -> Tensor:
    """Cosine similarity between all token pairs of one frame: ``[..., N, D] -> [..., N, N]``."""
    X_f = _tokens(X_f)
    xn = tc.l2_normalize(X_f, axis=-1, eps=eps)
    return _gram_rows(xn, 0, X_f.shape[-2])


def temporal_similarity(X, eps: float = EPS, block_size: int | None = None) -> Tensor:
    """Cosine similarity over the whole flattened sequence, built in row blocks."""
    X = _tokens(X)
    n = X.shape[-2]
    xn = tc.l2_normalize(X, axis=-1, eps=eps)
    bs = n if not block_size else int(block_size)
    if bs < 1:
        raise ValueError(f"block_size must be >= 1, got {block_size}")
    blocks = [_gram_rows(xn, s, min(s + bs, n)) for s in range(0, n, bs)]
    return blocks[0] if len(blocks) == 1 else tc.concat(blocks, axis=-2)


def frame_index(F: int, H: int, W: int) -> np.ndarray:
    return np.repeat(np.arange(F), H * W)


def temporal_weights(F: int, H: int, W: int, tau: float) -> np.ndarray:
    """``W[i, j] = exp(-|f(i) - f(j)| / tau)`` across frames, 0 within a frame.

    ``tau = inf`` gives the unweighted (all ones across frames) matrix.
    """
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    f = frame_index(F, H, W)
    delta = np.abs(f[:, None] - f[None, :]).astype(np.float64)
    w = np.exp(-delta / tau)
    w[delta == 0] = 0.0
    return w


def _grids(Z, M):
    Z, M = tc.as_tensor(Z), tc.as_tensor(M)
    if Z.shape != M.shape:
        raise ValueError(f"alignment needs equal shapes, got Z {Z.shape} and M {M.shape}")
    if Z.ndim not in (4, 5):
        raise ValueError(f"feature grids are [F, H, W, D] or [B, F, H, W, D], got {Z.shape}")
    # the motion target is a constant
    return Z, Tensor(M.data)


def _spatial_term(Z: Tensor, M: Tensor, eps: float) -> Tensor:
    H, W, D = Z.shape[-3:]
    zt = tc.reshape(Z, Z.shape[:-3] + (H * W, D))
    mt = tc.reshape(M, M.shape[:-3] + (H * W, D))
    diff = spatial_similarity(zt, eps) - spatial_similarity(mt, eps)
    # mean over pairs within a frame, then over frames (and batch)
    return tc.mean(tc.tabs(diff))


def _temporal_term(Z: Tensor, M: Tensor, tau: float, eps: float, masked_mean: bool, block_size) -> Tensor:
    F, H, W, D = Z.shape[-4:]
    n = F * H * W
    zt = tc.reshape(Z, Z.shape[:-4] + (n, D))
    mt = tc.reshape(M, M.shape[:-4] + (n, D))
    w = temporal_weights(F, H, W, tau).astype(Z.dtype)
    zn = tc.l2_normalize(zt, -1, eps)
    mn = tc.l2_normalize(mt, -1, eps)
    bs = n if not block_size else int(block_size)
    row_sums = []
    for s in range(0, n, bs):
        e = min(s + bs, n)
        d = _gram_rows(zn, s, e) - _gram_rows(mn, s, e)
        row_sums.append(tc.tsum(tc.tabs(tc.mul(d, w[s:e])), axis=-1))
    rows = row_sums[0] if len(row_sums) == 1 else tc.concat(row_sums, axis=-1)
    denom = float(np.count_nonzero(w)) if masked_mean else float(n * n)
    total = tc.tsum(rows, axis=-1) * (1.0 / denom) if denom > 0 else tc.tsum(rows, axis=-1) * 0.0
    return tc.mean(total)


def soft_trd_loss(Z, M, tau: float = 10.0, eps: float = EPS, masked_mean: bool = False,
                  block_size: int | None = None) -> Tensor:
    """Spatial relational error averaged over frames plus frame-distance-weighted temporal error.

    Both parts are mean absolute errors between cosine-similarity matrices.
    The temporal mean runs over all ``N_t^2`` entries (intra-frame ones are
    zero); ``masked_mean=True`` divides by the count of cross-frame pairs
    instead. ``M`` is treated as a constant. Batched inputs are averaged.
    """
    Z, M = _grids(Z, M)
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    return _spatial_term(Z, M, eps) + _temporal_term(Z, M, tau, eps, masked_mean, block_size)


def trd_loss(Z, M, eps: float = EPS, masked_mean: bool = False, block_size: int | None = None) -> Tensor:
    """Unweighted variant: every cross-frame pair counts fully, intra-frame pairs still excluded."""
    return soft_trd_loss(Z, M, math.inf, eps, masked_mean, block_size)


def relational_distance(Z, M, tau: float = 10.0, eps: float = EPS) -> dict[str, float]:
    """Spatial and weighted-temporal components of the soft relational loss (no gradients)."""
    with tc.no_grad():
        Z, M = _grids(Z, M)
        sp = float(_spatial_term(Z, M, eps).data)
        tp = float(_temporal_term(Z, M, tau, eps, False, None).data)
    return {"rel_spatial": sp, "rel_temporal": tp, "rel_total": sp + tp}


def repa_loss(Y_star, H_s, P_phi: Callable[[Tensor], Tensor] | Tensor | None = None, eps: float = EPS) -> Tensor:
    """Negative mean patchwise cosine similarity between teacher tokens and projected student tokens.

    ``P_phi`` is a callable, a weight matrix applied on the right, or ``None``
    (identity).
    """
    Y_star, H_s = tc.as_tensor(Y_star), tc.as_tensor(H_s)
    if Y_star.shape[-2] != H_s.shape[-2]:
        raise ValueError(f"token counts differ: teacher {Y_star.shape[-2]}, student {H_s.shape[-2]}")
    if P_phi is None:
        proj = H_s
    elif isinstance(P_phi, Tensor):
        proj = tc.matmul(H_s, P_phi)
    else:
        proj = P_phi(H_s)
    return -tc.mean(tc.cosine_sim(Tensor(Y_star.data), proj, eps))


def total_loss(l_diff, l_align, lam: float = 0.5):
    """``l_diff + lam * l_align``."""
    if lam < 0:
        raise ValueError(f"alignment weight must be >= 0, got {lam}")
    if lam == 0:
        return l_diff
    return l_diff + l_align * lam
