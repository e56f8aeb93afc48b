"""Stage 1: motion-subspace compressor and flow decoder.

The compressor maps encoder features ``S[B, F'', H'', W'', D_v]`` to a narrow
``M[B, F'', H'', W'', D_m]``; the decoder turns ``M`` into dense flow so that
``M`` is forced to carry motion. Feature grids are channels-last; the
convolutions run channels-first internally.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .conv import conv3d, transposed_conv3d, trilinear_interpolate
from .optim import AdamW, global_grad_norm
from .tensor import Tensor


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step


def _param(rng, shape, fan_in, dtype, gain=np.sqrt(2.0)):
    # He-uniform; gain sqrt(2) keeps activation scale through ReLU/SiLU stacks
    bound = gain * np.sqrt(3.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def to_channels_first(x: Tensor) -> Tensor:
    return tc.transpose(x, (0, 4, 1, 2, 3))


def to_channels_last(x: Tensor) -> Tensor:
    return tc.transpose(x, (0, 2, 3, 4, 1))


@dataclass
class CompressorParams:
    """Temporal (3,1,1) conv D_v -> hidden, SiLU, pointwise conv hidden -> D_m, SiLU."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def init_compressor(seed: int, in_dim: int = 768, out_dim: int = 64, hidden: int | None = None,
                    dtype=np.float32) -> CompressorParams:
    if not 0 < out_dim < in_dim:
        raise ValueError(f"motion dim must satisfy 0 < D_m < D_v, got D_m={out_dim}, D_v={in_dim}")
    hidden = hidden or max(1, in_dim // 3)
    rng = np.random.default_rng(seed)
    return CompressorParams(
        w1=_param(rng, (hidden, in_dim, 3, 1, 1), in_dim * 3, dtype),
        b1=_zeros((hidden,), dtype),
        w2=_param(rng, (out_dim, hidden, 1, 1, 1), hidden, dtype),
        b2=_zeros((out_dim,), dtype),
    )


def compress(psi: CompressorParams, S) -> Tensor:
    """``S[(B,) F, H, W, D_v] -> M[(B,) F, H, W, D_m]``; the grid is untouched."""
    S = tc.as_tensor(S)
    single = S.ndim == 4
    if single:
        S = tc.reshape(S, (1,) + S.shape)
    if S.ndim != 5 or S.shape[-1] != psi.in_dim:
        raise ValueError(f"compressor expects {psi.in_dim} input channels, got shape {S.shape}")
    x = to_channels_first(S)
    x = tc.silu(conv3d(x, psi.w1, psi.b1, stride=1, padding=(1, 0, 0)))
    x = tc.silu(conv3d(x, psi.w2, psi.b2))
    M = to_channels_last(x)
    return tc.reshape(M, M.shape[1:]) if single else M


@dataclass
class FlowDecoderParams:
    """conv(2,3,3) -> ReLU -> 2x tconv -> ReLU -> 2x tconv -> ReLU -> conv 3 -> resize."""

    c1_w: Tensor
    c1_b: Tensor
    up1_w: Tensor
    up1_b: Tensor
    up2_w: Tensor
    up2_b: Tensor
    out_w: Tensor
    out_b: Tensor
    target: tuple[int, int, int]  # (F_flow, H_f, W_f)
    flow_scale: float = 1.0  # fixed output gain, pixels per unit of the last conv

    @property
    def in_dim(self) -> int:
        return self.c1_w.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {k: getattr(self, k) for k in ("c1_w", "c1_b", "up1_w", "up1_b", "up2_w", "up2_b", "out_w", "out_b")}


def init_flow_decoder(seed: int, in_dim: int, target: tuple[int, int, int],
                      channels: tuple[int, int, int] = (64, 32, 16), flow_scale: float = 1.0,
                      dtype=np.float32) -> FlowDecoderParams:
    c0, c1, c2 = channels
    rng = np.random.default_rng(seed)
    return FlowDecoderParams(
        c1_w=_param(rng, (c0, in_dim, 2, 3, 3), in_dim * 18, dtype),
        c1_b=_zeros((c0,), dtype),
        # transposed kernels are (C_in, C_out, ...); fan-in counts the taps reaching one output
        up1_w=_param(rng, (c0, c1, 1, 4, 4), c0 * 4, dtype),
        up1_b=_zeros((c1,), dtype),
        up2_w=_param(rng, (c1, c2, 1, 4, 4), c1 * 4, dtype),
        up2_b=_zeros((c2,), dtype),
        out_w=_zeros((2, c2, 3, 3, 3), dtype),
        out_b=_zeros((2,), dtype),
        target=tuple(int(t) for t in target),
        flow_scale=float(flow_scale),
    )


def decode_flow(omega: FlowDecoderParams, M) -> Tensor:
    """``M[(B,) F'', H'', W'', D_m] -> flow[(B,) F_flow, 2, H_f, W_f]``."""
    M = tc.as_tensor(M)
    single = M.ndim == 4
    if single:
        M = tc.reshape(M, (1,) + M.shape)
    if M.ndim != 5 or M.shape[-1] != omega.in_dim:
        raise ValueError(f"flow decoder expects {omega.in_dim} channels, got shape {M.shape}")
    if M.shape[1] < 2:
        raise ValueError(f"flow decoding needs at least 2 feature frames, got {M.shape[1]}")
    x = to_channels_first(M)
    x = tc.relu(conv3d(x, omega.c1_w, omega.c1_b, padding=(0, 1, 1)))
    x = tc.relu(transposed_conv3d(x, omega.up1_w, omega.up1_b, stride=(1, 2, 2), padding=(0, 1, 1)))
    x = tc.relu(transposed_conv3d(x, omega.up2_w, omega.up2_b, stride=(1, 2, 2), padding=(0, 1, 1)))
    x = conv3d(x, omega.out_w, omega.out_b, padding=1)
    if omega.flow_scale != 1.0:
        x = x * omega.flow_scale
    x = trilinear_interpolate(x, omega.target)
    flow = tc.transpose(x, (0, 2, 1, 3, 4))
    return tc.reshape(flow, flow.shape[1:]) if single else flow


def _check_same(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def flow_loss(pred, target) -> Tensor:
    """Mean absolute error between predicted and ground-truth flow."""
    pred, target = tc.as_tensor(pred), tc.as_tensor(target)
    _check_same(pred, target, "flow_loss")
    return tc.mean(tc.tabs(pred - target))


def epe(pred, target) -> float:
    """Mean endpoint error; the flow components sit on axis -3 (``[..., 2, H, W]``)."""
    p = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"epe: shape mismatch {p.shape} vs {t.shape}")
    if p.ndim < 3 or p.shape[-3] != 2:
        raise ValueError(f"epe expects [..., 2, H, W] flow, got {p.shape}")
    d = p - t
    return float(np.sqrt(d[..., 0, :, :] ** 2 + d[..., 1, :, :] ** 2).mean())


def flow_target_frames(frames: int, t_patch: int, n_pairs: int, pair_stride: int = 1) -> list[int]:
    """Indices of per-frame flow maps that serve as targets for feature-frame pairs.

    Pair ``k`` joins feature frames ``k`` and ``k + 1``; its target is the raw
    transition straddling their shared boundary, ``t_patch * (k + 1) - 1``.
    """
    idx = [(t_patch * (k + 1) - 1) // pair_stride for k in range(n_pairs)]
    if idx and idx[-1] >= (frames - 1) // pair_stride:
        raise ValueError("flow targets run past the end of the clip")
    return idx


@dataclass
class Stage1State:
    psi: CompressorParams
    omega: FlowDecoderParams
    opt: AdamW
    step: int = 0
    history: list = field(default_factory=list)

    def params(self) -> list[Tensor]:
        return list(self.psi.tensors().values()) + list(self.omega.tensors().values())


def make_stage1_state(psi, omega, lr=1e-4, betas=(0.9, 0.95), weight_decay=1e-3) -> Stage1State:
    state = Stage1State(psi, omega, AdamW([], lr, betas, weight_decay=weight_decay))
    state.opt = AdamW(state.params(), lr, betas, weight_decay=weight_decay)
    return state


def stage1_loss(psi, omega, S, target) -> Tensor:
    return flow_loss(decode_flow(omega, compress(psi, S)), target)


def stage1_step(state: Stage1State, batch) -> tuple[Stage1State, dict]:
    """One AdamW step on ``batch = (S[B, ...], flow_target[B, ...])``; the encoder is not involved."""
    S, target = batch
    state.opt.zero_grad()
    loss = stage1_loss(state.psi, state.omega, S, target)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NonFiniteLoss(state.step, value)
    loss.backward()
    gnorm = global_grad_norm(state.params())
    state.opt.step()
    state.step += 1
    return state, {"step": state.step, "loss_flow": value, "grad_norm": gnorm}
