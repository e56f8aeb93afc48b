"""Toy latent video diffusion model.

Pieces: a frozen pooling "VAE" that turns clips into latents, the forward
noising process, a small transformer denoiser that can expose the hidden
state of one block, the noise-prediction loss, and the projection head that
maps tapped hidden states onto the motion-feature grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .conv import conv3d, resize_axis
from .tensor import Tensor


class ConfigError(ValueError):
    """Raised when model shapes cannot be reconciled."""


# noise schedule -------------------------------------------------------------------
@dataclass(frozen=True)
class NoiseSchedule:
    """Linear cumulative signal level: ``alpha_bar[0] = 1`` down to ``alpha_bar[T] = alpha_bar_min``."""

    T: int = 50
    alpha_bar_min: float = 1e-3

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError(f"need at least one timestep, got T={self.T}")
        if not 0 < self.alpha_bar_min < 1:
            raise ConfigError("alpha_bar_min must lie in (0, 1)")

    @property
    def alpha_bar(self) -> np.ndarray:
        return 1.0 - (1.0 - self.alpha_bar_min) * np.arange(self.T + 1) / self.T


def forward_noise(z0, t, seed=None, schedule: NoiseSchedule | None = None, alpha_bar: float | None = None):
    """Sample ``z_t = sqrt(a) z0 + sqrt(1 - a) eps`` with ``a = alpha_bar[t]``.

    ``t`` may be a scalar or one timestep per leading batch entry. ``seed`` is
    an int or a ``numpy.random.Generator``. Passing ``alpha_bar`` directly
    overrides the schedule lookup. Returns ``(z_t, eps)``.
    """
    schedule = schedule or NoiseSchedule()
    z0 = np.asarray(z0.data if isinstance(z0, Tensor) else z0)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if alpha_bar is None:
        t_arr = np.asarray(t)
        if np.any(t_arr < 1) or np.any(t_arr > schedule.T):
            raise ValueError(f"timestep must lie in [1, {schedule.T}], got {t}")
        a = schedule.alpha_bar[t_arr]
    else:
        a = np.asarray(alpha_bar, dtype=np.float64)
    a = a.reshape(a.shape + (1,) * (z0.ndim - a.ndim)) if a.ndim else a
    eps = rng.standard_normal(z0.shape).astype(z0.dtype)
    zt = (np.sqrt(a) * z0 + np.sqrt(1.0 - a) * eps).astype(z0.dtype)
    return zt, eps


# frozen latent encoder ---------------------------------------------------------------
@dataclass(frozen=True)
class VAEStub:
    time_factor: int = 4
    space_factor: int = 2
    latent_channels: int = 4
    lift: np.ndarray = field(default=None, repr=False)  # (C', C)

    @classmethod
    def create(cls, seed: int = 0, time_factor=4, space_factor=2, latent_channels=4, channels=3) -> "VAEStub":
        rng = np.random.default_rng(seed)
        lift = rng.uniform(-1, 1, size=(latent_channels, channels)) / math.sqrt(channels)
        lift.setflags(write=False)
        return cls(time_factor, space_factor, latent_channels, lift)

    def latent_shape(self, frames, height, width) -> tuple[int, int, int, int]:
        return (-(-frames // self.time_factor), height // self.space_factor, width // self.space_factor,
                self.latent_channels)


def block_average(x: np.ndarray, time_factor: int, space_factor: int) -> np.ndarray:
    """Average-pool ``[..., F, H, W, C]`` by the given factors; frames are padded by repeating the last."""
    F, H, W, C = x.shape[-4:]
    if F == 0 or H == 0 or W == 0:
        raise ValueError(f"empty clip of shape {x.shape}")
    if H % space_factor or W % space_factor:
        raise ValueError(f"spatial dims {H}x{W} not divisible by {space_factor}")
    pad = (-F) % time_factor
    if pad:
        last = np.repeat(x[..., -1:, :, :, :], pad, axis=-4)
        x = np.concatenate([x, last], axis=-4)
        F += pad
    lead = x.shape[:-4]
    x = x.reshape(lead + (F // time_factor, time_factor, H // space_factor, space_factor, W // space_factor,
                          space_factor, C))
    n = x.ndim
    return x.mean(axis=(n - 6, n - 4, n - 2))


def vae_encode_stub(vae: VAEStub, clip) -> np.ndarray:
    """Pool ``clip[..., F, H, W, C]`` and lift channels to the latent width."""
    x = np.asarray(clip.data if isinstance(clip, Tensor) else clip)
    if x.ndim < 4 or x.size == 0:
        raise ValueError(f"expected a non-empty [F, H, W, C] clip, got shape {x.shape}")
    pooled = block_average(x, vae.time_factor, vae.space_factor)
    return (pooled @ vae.lift.T.astype(pooled.dtype)).astype(x.dtype)


# denoiser ---------------------------------------------------------------------------
@dataclass(frozen=True)
class DenoiserConfig:
    latent: tuple[int, int, int, int] = (3, 16, 24, 4)  # (F', H', W', C')
    patch: int = 2
    width: int = 128
    depth: int = 8
    heads: int = 4
    mlp_ratio: int = 2
    n_classes: int = 4
    tap_layer: int | None = None
    T: int = 50

    def __post_init__(self):
        F, H, W, C = self.latent
        if H % self.patch or W % self.patch:
            raise ConfigError(f"latent {H}x{W} not divisible by denoiser patch {self.patch}")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by {self.heads} heads")
        if not 1 <= self.tap <= self.depth:
            raise ConfigError(f"tap_layer must lie in [1, {self.depth}], got {self.tap}")

    @property
    def tap(self) -> int:
        return self.tap_layer if self.tap_layer is not None else math.ceil(0.75 * self.depth)

    @property
    def grid(self) -> tuple[int, int, int]:
        F, H, W, _ = self.latent
        return F, H // self.patch, W // self.patch

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.latent[3]


def _lin(rng, n_in, n_out, dtype, scale=None):
    bound = scale if scale is not None else 1.0 / math.sqrt(n_in)
    w = Tensor(rng.uniform(-bound, bound, size=(n_in, n_out)).astype(dtype), requires_grad=True)
    b = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)
    return w, b


def init_denoiser(cfg: DenoiserConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    D = cfg.width
    n_tok = int(np.prod(cfg.grid))
    p: dict[str, Tensor] = {}
    p["embed.w"], p["embed.b"] = _lin(rng, cfg.patch_dim, D, dtype)
    p["pos"] = Tensor((0.02 * rng.standard_normal((n_tok, D))).astype(dtype), requires_grad=True)
    p["time.w1"], p["time.b1"] = _lin(rng, D, D, dtype)
    p["time.w2"], p["time.b2"] = _lin(rng, D, D, dtype)
    p["class"] = Tensor((0.02 * rng.standard_normal((cfg.n_classes, D))).astype(dtype), requires_grad=True)
    hidden = cfg.mlp_ratio * D
    for i in range(cfg.depth):
        for ln in ("ln1", "ln2"):
            p[f"b{i}.{ln}.g"] = Tensor(np.ones(D, dtype=dtype), requires_grad=True)
            p[f"b{i}.{ln}.b"] = Tensor(np.zeros(D, dtype=dtype), requires_grad=True)
        p[f"b{i}.qkv.w"], p[f"b{i}.qkv.b"] = _lin(rng, D, 3 * D, dtype)
        p[f"b{i}.proj.w"], p[f"b{i}.proj.b"] = _lin(rng, D, D, dtype)
        p[f"b{i}.fc1.w"], p[f"b{i}.fc1.b"] = _lin(rng, D, hidden, dtype)
        p[f"b{i}.fc2.w"], p[f"b{i}.fc2.b"] = _lin(rng, hidden, D, dtype)
    p["out.ln.g"] = Tensor(np.ones(D, dtype=dtype), requires_grad=True)
    p["out.ln.b"] = Tensor(np.zeros(D, dtype=dtype), requires_grad=True)
    p["out.w"], p["out.b"] = _lin(rng, D, cfg.patch_dim, dtype)
    return p


def timestep_embedding(t: np.ndarray, dim: int, dtype=np.float32) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(emb), 1))], axis=-1)
    return emb.astype(dtype)


def patchify(z: Tensor, p: int) -> Tensor:
    B, F, H, W, C = z.shape
    x = tc.reshape(z, (B, F, H // p, p, W // p, p, C))
    x = tc.transpose(x, (0, 1, 2, 4, 3, 5, 6))
    return tc.reshape(x, (B, F * (H // p) * (W // p), p * p * C))


def unpatchify(x: Tensor, cfg: DenoiserConfig, B: int) -> Tensor:
    F, H, W, C = cfg.latent
    p = cfg.patch
    x = tc.reshape(x, (B, F, H // p, W // p, p, p, C))
    x = tc.transpose(x, (0, 1, 2, 4, 3, 5, 6))
    return tc.reshape(x, (B, F, H, W, C))


def _attention(x: Tensor, p: dict, i: int, heads: int) -> Tensor:
    B, N, D = x.shape
    dh = D // heads
    qkv = tc.matmul(x, p[f"b{i}.qkv.w"]) + p[f"b{i}.qkv.b"]
    qkv = tc.transpose(tc.reshape(qkv, (B, N, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = tc.softmax(tc.matmul(q, tc.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh)), axis=-1)
    y = tc.matmul(att, v)
    y = tc.reshape(tc.transpose(y, (0, 2, 1, 3)), (B, N, D))
    return tc.matmul(y, p[f"b{i}.proj.w"]) + p[f"b{i}.proj.b"]


def denoise(theta: dict, cfg: DenoiserConfig, z_t, t, c, tap: bool = True):
    """Predict the noise in ``z_t[B, F', H', W', C']`` at timesteps ``t[B]`` for classes ``c[B]``.

    Returns ``(eps_hat, Y)`` where ``Y[B, F~, H~, W~, D~]`` is the hidden state
    after block ``cfg.tap`` (``None`` when ``tap`` is false). Tapping only keeps
    a reference; the prediction is unchanged.
    """
    z_t = tc.as_tensor(z_t)
    single = z_t.ndim == 4
    if single:
        z_t = tc.reshape(z_t, (1,) + z_t.shape)
    B = z_t.shape[0]
    if tuple(z_t.shape[1:]) != tuple(cfg.latent):
        raise ValueError(f"latent shape {z_t.shape[1:]} does not match config {cfg.latent}")
    t = np.broadcast_to(np.asarray(t), (B,))
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (B,))
    if np.any(c < 0) or np.any(c >= cfg.n_classes):
        raise ValueError(f"unknown condition token in {c.tolist()}; expected 0..{cfg.n_classes - 1}")
    dt = theta["embed.w"].dtype
    D = cfg.width

    h = tc.matmul(patchify(z_t, cfg.patch), theta["embed.w"]) + theta["embed.b"] + theta["pos"]
    temb = Tensor(timestep_embedding(t, D, dt))
    temb = tc.matmul(tc.silu(tc.matmul(temb, theta["time.w1"]) + theta["time.b1"]), theta["time.w2"]) + theta["time.b2"]
    cond = temb + theta["class"][c]
    h = h + tc.reshape(cond, (B, 1, D))

    Y = None
    for i in range(cfg.depth):
        a = tc.layer_norm(h, theta[f"b{i}.ln1.g"], theta[f"b{i}.ln1.b"])
        h = h + _attention(a, theta, i, cfg.heads)
        m = tc.layer_norm(h, theta[f"b{i}.ln2.g"], theta[f"b{i}.ln2.b"])
        m = tc.gelu(tc.matmul(m, theta[f"b{i}.fc1.w"]) + theta[f"b{i}.fc1.b"])
        h = h + tc.matmul(m, theta[f"b{i}.fc2.w"]) + theta[f"b{i}.fc2.b"]
        if tap and i + 1 == cfg.tap:
            Y = tc.reshape(h, (B,) + cfg.grid + (D,))
    out = tc.layer_norm(h, theta["out.ln.g"], theta["out.ln.b"])
    out = tc.matmul(out, theta["out.w"]) + theta["out.b"]
    eps_hat = unpatchify(out, cfg, B)
    if single:
        eps_hat = tc.reshape(eps_hat, eps_hat.shape[1:])
        Y = tc.reshape(Y, Y.shape[1:]) if Y is not None else None
    return eps_hat, Y


def diffusion_loss(eps_hat, eps) -> Tensor:
    """Mean squared error between predicted and true noise."""
    eps_hat, eps = tc.as_tensor(eps_hat), tc.as_tensor(eps)
    if eps_hat.shape != eps.shape:
        raise ValueError(f"diffusion_loss: shape mismatch {eps_hat.shape} vs {eps.shape}")
    d = eps_hat - Tensor(eps.data)
    return tc.mean(d * d)


# projection head ----------------------------------------------------------------------
@dataclass(frozen=True)
class ProjectionConfig:
    in_grid: tuple[int, int, int]  # (F~, H~, W~) of the tapped hidden state
    in_dim: int
    out_grid: tuple[int, int, int]  # (F'', H'', W'') of the motion features
    out_dim: int
    hidden: int | None = None
    spatial_kernel: int = 3
    spatial_stride: int = 3
    spatial_padding: int = 0
    variant: str = "conv"  # "conv" | "mlp"

    def __post_init__(self):
        if self.variant not in ("conv", "mlp"):
            raise ConfigError(f"unknown projection variant {self.variant!r}")
        k, s, p = self.spatial_kernel, self.spatial_stride, self.spatial_padding
        got = tuple((n + 2 * p - k) // s + 1 for n in self.in_grid[1:])
        if any(n + 2 * p < k for n in self.in_grid[1:]) or got != tuple(self.out_grid[1:]):
            raise ConfigError(
                f"spatial conv (kernel {k}, stride {s}, padding {p}) maps {self.in_grid[1:]} to {got}, "
                f"not the motion grid {tuple(self.out_grid[1:])}"
            )
        if self.in_grid[0] < 1 or self.out_grid[0] < 1:
            raise ConfigError("frame counts must be positive")

    @property
    def hidden_dim(self) -> int:
        return self.hidden or max(1, round(self.in_dim / 7.5))


def init_projection(cfg: ProjectionConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    h, D, Dm, k = cfg.hidden_dim, cfg.in_dim, cfg.out_dim, cfg.spatial_kernel

    def conv_w(shape):
        fan_in = int(np.prod(shape[1:]))
        bound = math.sqrt(6.0 / fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)

    def zeros(n):
        return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)

    p: dict[str, Tensor] = {}
    if cfg.variant == "conv":
        p["t.w"], p["t.b"] = conv_w((h, D, 3, 1, 1)), zeros(h)
        p["pw.w"], p["pw.b"] = conv_w((Dm, h, 1, 1, 1)), zeros(Dm)
    else:
        dims = [D, h, h, h, Dm]
        for i in range(4):
            p[f"mlp{i}.w"], p[f"mlp{i}.b"] = conv_w((dims[i + 1], dims[i], 1, 1, 1)), zeros(dims[i + 1])
    p["s.w"], p["s.b"] = conv_w((Dm, Dm, 1, k, k)), zeros(Dm)
    return p


def project(zeta: dict, cfg: ProjectionConfig, Y) -> Tensor:
    """Map tapped hidden states ``Y[(B,) F~, H~, W~, D~]`` to ``Z[(B,) F'', H'', W'', D_m]``."""
    Y = tc.as_tensor(Y)
    single = Y.ndim == 4
    if single:
        Y = tc.reshape(Y, (1,) + Y.shape)
    if tuple(Y.shape[1:4]) != tuple(cfg.in_grid) or Y.shape[4] != cfg.in_dim:
        raise ValueError(f"projection expects [{cfg.in_grid}, {cfg.in_dim}] input, got {Y.shape[1:]}")
    x = tc.transpose(Y, (0, 4, 1, 2, 3))
    if cfg.variant == "conv":
        x = tc.silu(conv3d(x, zeta["t.w"], zeta["t.b"], padding=(1, 0, 0)))
        x = tc.silu(conv3d(x, zeta["pw.w"], zeta["pw.b"]))
    else:
        for i in range(4):
            x = conv3d(x, zeta[f"mlp{i}.w"], zeta[f"mlp{i}.b"])
            x = tc.silu(x)
    x = resize_axis(x, 2, cfg.out_grid[0])
    x = conv3d(x, zeta["s.w"], zeta["s.b"], stride=(1, cfg.spatial_stride, cfg.spatial_stride),
               padding=(0, cfg.spatial_padding, cfg.spatial_padding))
    Z = tc.transpose(x, (0, 2, 3, 4, 1))
    return tc.reshape(Z, Z.shape[1:]) if single else Z
