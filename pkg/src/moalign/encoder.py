"""Frozen toy video encoder producing spatiotemporal token features.

A fixed random patch embedding (one token per ``t_p x h_p x w_p`` tube) is
followed by a residual temporal mixing convolution and a per-token
standardization. Weights never change
after :func:`init_encoder` and no gradient buffers are ever attached.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conv import conv3d_forward
from .tensor import _sigmoid


@dataclass(frozen=True)
class EncoderParams:
    patch: tuple[int, int, int]
    dim: int
    embed_w: np.ndarray  # (D_v, 3, t_p, h_p, w_p)
    embed_b: np.ndarray  # (D_v,)
    mix_w: np.ndarray  # (D_v, D_v, 3, 1, 1)
    mix_b: np.ndarray  # (D_v,)
    seed: int = 0

    frozen = True

    def arrays(self) -> dict[str, np.ndarray]:
        return {"embed_w": self.embed_w, "embed_b": self.embed_b, "mix_w": self.mix_w, "mix_b": self.mix_b}

    def grid(self, frames: int, height: int, width: int) -> tuple[int, int, int]:
        check_divisible((frames, height, width), self.patch)
        return frames // self.patch[0], height // self.patch[1], width // self.patch[2]


def check_divisible(dims, patch) -> None:
    for name, d, p in zip(("frames", "height", "width"), dims, patch):
        if d % p:
            raise ValueError(f"clip {name} {d} is not divisible by patch size {p}")


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_encoder(seed: int = 0, patch=(3, 8, 8), dim: int = 96, channels: int = 3) -> EncoderParams:
    """Draw encoder weights uniformly in +-1/sqrt(fan_in) from ``seed``."""
    patch = tuple(int(p) for p in patch)
    if dim <= 0 or any(p <= 0 for p in patch):
        raise ValueError(f"encoder dims must be positive, got patch={patch}, dim={dim}")
    rng = np.random.default_rng(seed)
    fan_embed = channels * patch[0] * patch[1] * patch[2]
    params = EncoderParams(
        patch=patch,
        dim=dim,
        embed_w=_uniform(rng, (dim, channels) + patch, fan_embed),
        embed_b=_uniform(rng, (dim,), fan_embed),
        mix_w=_uniform(rng, (dim, dim, 3, 1, 1), dim * 3),
        mix_b=_uniform(rng, (dim,), dim * 3),
        seed=seed,
    )
    for arr in params.arrays().values():
        arr.setflags(write=False)
    return params


def encode(params: EncoderParams, clip) -> np.ndarray:
    """Map ``clip[F, H, W, 3]`` (or a batch ``[B, F, H, W, 3]``) to ``S[..., F'', H'', W'', D_v]``."""
    x = np.asarray(clip.data if hasattr(clip, "data") else clip)
    single = x.ndim == 4
    if single:
        x = x[None]
    if x.ndim != 5 or x.shape[-1] != params.embed_w.shape[1]:
        raise ValueError(f"expected clip of shape [F, H, W, {params.embed_w.shape[1]}], got {x.shape}")
    check_divisible(x.shape[1:4], params.patch)
    dt = x.dtype if x.dtype in (np.float32, np.float64) else np.float64
    xc = np.ascontiguousarray(x.transpose(0, 4, 1, 2, 3), dtype=dt)
    e = conv3d_forward(xc, params.embed_w.astype(dt), params.patch, 0) + params.embed_b.astype(dt).reshape(1, -1, 1, 1, 1)
    act = e * _sigmoid(e)
    # replicate padding in time keeps constant inputs constant
    act = np.concatenate([act[:, :, :1], act, act[:, :, -1:]], axis=2)
    s = e + conv3d_forward(act, params.mix_w.astype(dt), 1, 0) + params.mix_b.astype(dt).reshape(1, -1, 1, 1, 1)
    s = np.ascontiguousarray(s.transpose(0, 2, 3, 4, 1))
    # per-token standardization, as in the final norm of ViT-style encoders
    s = s - s.mean(axis=-1, keepdims=True)
    s = s / np.sqrt((s * s).mean(axis=-1, keepdims=True) + 1e-6)
    return s[0] if single else s
