"""Training loops for both stages plus run plumbing (metrics CSV, freeze ledger, checkpoints)."""
from __future__ import annotations

import contextlib
import csv
import io as _io
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import align
from . import tensor as tc
from .config import TrainConfig
from .diffusion import (ConfigError, DenoiserConfig, NoiseSchedule, ProjectionConfig, VAEStub, denoise,
                        diffusion_loss, forward_noise, init_denoiser, init_projection, project, vae_encode_stub)
from .encoder import EncoderParams, encode, init_encoder
from .io import array_digest, atomic_write_text, load_checkpoint, save_checkpoint
from .motion import (CompressorParams, FlowDecoderParams, NonFiniteLoss, compress, flow_target_frames,
                     init_compressor, init_flow_decoder, make_stage1_state, stage1_step)
from .optim import AdamW, global_grad_norm
from .synthvid import read_manifest
from .tensor import Tensor

METRICS_VERSION = "# moalign-metrics v1"
STAGE1_COLUMNS = ("step", "loss_flow", "grad_norm", "wall_ms")
STAGE2_COLUMNS = ("step", "loss_diff", "loss_align", "loss_total", "grad_norm", "wall_ms")


class CheckpointMismatch(ValueError):
    pass


class FreezeViolation(RuntimeError):
    pass


@contextlib.contextmanager
def execution_mode(deterministic: bool):
    """Deterministic-serial mode pins BLAS to one thread so reductions run in a fixed order."""
    if deterministic:
        with threadpool_limits(limits=1):
            yield "deterministic-serial"
    else:
        yield "parallel-batch"


# data -----------------------------------------------------------------------------------
@dataclass
class ClipSet:
    videos: np.ndarray  # [N, F, H, W, 3]
    flows: np.ndarray  # [N, F_pairs, 2, H, W]
    labels: list
    manifest: Path

    def __len__(self):
        return len(self.videos)

    @property
    def seeds(self) -> list[int]:
        return [int(lab["seed"]) for lab in self.labels]


def load_clips(manifest) -> ClipSet:
    records = read_manifest(manifest)
    if not records:
        raise ValueError(f"manifest {manifest} lists no clips")
    videos, flows = zip(*(r.load() for r in records))
    path = Path(manifest)
    return ClipSet(np.stack(videos), np.stack(flows), [r.labels for r in records],
                   path / "manifest.tsv" if path.is_dir() else path)


def encode_all(enc: EncoderParams, videos: np.ndarray, chunk: int = 64) -> np.ndarray:
    return np.concatenate([encode(enc, videos[i:i + chunk]) for i in range(0, len(videos), chunk)]).astype(np.float32)


def build_encoder(cfg: TrainConfig) -> EncoderParams:
    return init_encoder(cfg.encoder_seed, cfg.encoder_patch, cfg.d_v)


def stage1_targets(cfg: TrainConfig, enc: EncoderParams, clips: ClipSet) -> tuple[np.ndarray, list[int]]:
    F = clips.videos.shape[1]
    grid = enc.grid(*clips.videos.shape[1:4])
    idx = flow_target_frames(F, cfg.encoder_patch[0], grid[0] - 1, cfg.pair_stride)
    return np.ascontiguousarray(clips.flows[:, idx]), idx


# run plumbing ---------------------------------------------------------------------------
class MetricsWriter:
    """Versioned CSV; ``wall_ms`` is pinned to 0 in deterministic mode and real timings go to ``timing.csv``."""

    def __init__(self, out_dir: Path, columns, deterministic: bool):
        self.columns = tuple(columns)
        self.deterministic = deterministic
        self.rows: list[dict] = []
        self.timings: list[tuple[int, float]] = []
        self.path = out_dir / "metrics.csv"
        self.timing_path = out_dir / "timing.csv"

    def add(self, row: dict, wall_ms: float) -> None:
        self.timings.append((row["step"], wall_ms))
        row = dict(row, wall_ms=0 if self.deterministic else round(wall_ms, 3))
        self.rows.append(row)

    def render(self) -> str:
        buf = _io.StringIO()
        buf.write(METRICS_VERSION + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([_fmt(row[c]) for c in self.columns])
        return buf.getvalue()

    def flush(self) -> None:
        atomic_write_text(self.path, self.render())
        lines = ["step,wall_ms"] + [f"{s},{ms:.3f}" for s, ms in self.timings]
        atomic_write_text(self.timing_path, "\n".join(lines) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_metrics(path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != METRICS_VERSION:
        raise ValueError(f"{path}: missing '{METRICS_VERSION}' header")
    rows = list(csv.DictReader(lines[1:]))
    return [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in rows]


def digests(arrays: dict[str, np.ndarray]) -> dict[str, str]:
    return {k: array_digest(np.asarray(v)) for k, v in sorted(arrays.items())}


def write_freeze_ledger(out_dir: Path, before: dict[str, str], after: dict[str, str]) -> None:
    unchanged = before == after
    ledger = {"unchanged": unchanged,
              "frozen": {k: {"before": before[k], "after": after.get(k)} for k in before}}
    atomic_write_text(out_dir / "freeze.json", json.dumps(ledger, indent=2, sort_keys=True) + "\n")
    if not unchanged:
        changed = sorted(k for k in before if before[k] != after.get(k))
        raise FreezeViolation(f"frozen parameters changed during training: {changed}")


def _prepare_out(cfg: TrainConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "config.ini", cfg.to_ini())
    return out


def _diagnose(out: Path, exc: NonFiniteLoss, writer: MetricsWriter) -> None:
    writer.flush()
    info = {"error": str(exc), "step": exc.step, "last_rows": writer.rows[-5:]}
    atomic_write_text(out / "diagnostics.json", json.dumps(info, indent=2, default=str) + "\n")


def _streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _pick(rng: np.random.Generator, n: int, b: int) -> np.ndarray:
    return rng.choice(n, b, replace=n < b)


def _clip_dims(cfg: TrainConfig, clips: ClipSet) -> tuple[int, int, int]:
    dims = tuple(int(d) for d in clips.videos.shape[1:4])
    if dims != cfg.frames_hw:
        raise ConfigError(f"clips are {dims} (F, H, W) but geometry {cfg.geometry!r} expects {cfg.frames_hw}")
    return dims


@dataclass
class RunResult:
    out_dir: Path
    checkpoint: Path
    rows: list[dict]
    params: dict = field(default_factory=dict)


# stage 1 ---------------------------------------------------------------------------------
def stage1_params(cfg: TrainConfig, flow_target: tuple[int, int, int]):
    r_psi, r_omega = np.random.SeedSequence(cfg.seed).spawn(2)
    psi = init_compressor(int(r_psi.generate_state(1)[0]), cfg.d_v, cfg.d_m, cfg.compressor_hidden or None)
    omega = init_flow_decoder(int(r_omega.generate_state(1)[0]), cfg.d_m, flow_target, cfg.decoder_channels,
                              cfg.flow_scale)
    return psi, omega


def train_stage1(cfg: TrainConfig, clips: ClipSet | None = None) -> RunResult:
    """Regress ground-truth flow from frozen encoder features through the motion bottleneck."""
    cfg = cfg.replace(stage=1)
    if clips is None:
        if not cfg.manifest:
            raise ValueError("stage 1 needs a dataset manifest")
        clips = load_clips(cfg.manifest)
    out = _prepare_out(cfg)
    with execution_mode(cfg.deterministic):
        _clip_dims(cfg, clips)
        enc = build_encoder(cfg)
        frozen_before = digests(enc.arrays())
        S = encode_all(enc, clips.videos)
        target, idx = stage1_targets(cfg, enc, clips)
        psi, omega = stage1_params(cfg, target.shape[1:2] + target.shape[3:])
        state = make_stage1_state(psi, omega, cfg.learning_rate, (cfg.beta1, cfg.beta2), cfg.weight_decay)
        (order,) = _streams(cfg.seed + 1, 1)
        writer = MetricsWriter(out, STAGE1_COLUMNS, cfg.deterministic)
        try:
            for _ in range(cfg.steps):
                t0 = time.perf_counter()
                b = _pick(order, len(S), cfg.batch_size)
                state, m = stage1_step(state, (S[b], target[b]))
                writer.add(m, (time.perf_counter() - t0) * 1e3)
        except NonFiniteLoss as exc:
            _diagnose(out, exc, writer)
            raise
        writer.flush()
        write_freeze_ledger(out, frozen_before, digests(enc.arrays()))
    meta = {
        "stage": 1, "step": state.step, "config": _cfg_dict(cfg),
        "train_manifest": str(clips.manifest.resolve()), "train_seeds": clips.seeds,
        "flow_target": list(omega.target), "target_frames": idx,
    }
    ckpt = save_checkpoint(out / "checkpoint", _stage1_tensors(psi, omega), state.step, meta)
    return RunResult(out, ckpt, writer.rows, {"psi": psi, "omega": omega, "encoder": enc})


def _cfg_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _stage1_tensors(psi: CompressorParams, omega: FlowDecoderParams) -> dict[str, np.ndarray]:
    out = {f"psi.{k}": v.data for k, v in psi.tensors().items()}
    out.update({f"omega.{k}": v.data for k, v in omega.tensors().items()})
    return out


def load_stage1(path) -> tuple[CompressorParams, FlowDecoderParams, dict]:
    tensors, manifest = load_checkpoint(path)
    meta = manifest.get("meta", {})
    if meta.get("stage") != 1:
        raise CheckpointMismatch(f"{path} is not a stage-1 checkpoint")
    c = meta["config"]
    psi = CompressorParams(**{k: Tensor(tensors[f"psi.{k}"]) for k in ("w1", "b1", "w2", "b2")})
    omega = FlowDecoderParams(
        **{k: Tensor(tensors[f"omega.{k}"]) for k in
           ("c1_w", "c1_b", "up1_w", "up1_b", "up2_w", "up2_b", "out_w", "out_b")},
        target=tuple(meta["flow_target"]), flow_scale=float(c["flow_scale"]))
    return psi, omega, meta


# stage 2 ---------------------------------------------------------------------------------
def projection_geometry(in_grid, out_grid) -> tuple[int, int]:
    """Stride and padding of the 3x3 spatial conv that maps the token grid onto the motion grid."""
    strides = {in_grid[1] // out_grid[1] if in_grid[1] % out_grid[1] == 0 else 0,
               in_grid[2] // out_grid[2] if in_grid[2] % out_grid[2] == 0 else 0}
    if len(strides) != 1 or 0 in strides:
        raise ConfigError(f"denoiser token grid {tuple(in_grid[1:])} is not an integer multiple of the "
                          f"motion grid {tuple(out_grid[1:])}")
    s = strides.pop()
    return s, 1 if s < 3 else 0


@dataclass
class Stage2Model:
    vae: VAEStub
    dcfg: DenoiserConfig
    pcfg: ProjectionConfig
    theta: dict
    zeta: dict
    schedule: NoiseSchedule


def build_stage2(cfg: TrainConfig, frames: int, height: int, width: int) -> Stage2Model:
    vae = VAEStub.create(cfg.vae_seed, latent_channels=cfg.latent_channels)
    dcfg = DenoiserConfig(latent=vae.latent_shape(frames, height, width), patch=cfg.denoiser_patch,
                          width=cfg.denoiser_width, depth=cfg.denoiser_depth, heads=cfg.denoiser_heads,
                          mlp_ratio=cfg.mlp_ratio, n_classes=4, tap_layer=cfg.tap, T=cfg.timesteps)
    m_grid = build_encoder(cfg).grid(frames, height, width)
    stride, pad = projection_geometry(dcfg.grid, m_grid)
    pcfg = ProjectionConfig(dcfg.grid, dcfg.width, m_grid, cfg.d_m, cfg.projection_hidden or None,
                            spatial_stride=stride, spatial_padding=pad, variant=cfg.projection)
    s_theta, s_zeta = np.random.SeedSequence(cfg.seed).spawn(2)
    theta = init_denoiser(dcfg, int(s_theta.generate_state(1)[0]))
    zeta = init_projection(pcfg, int(s_zeta.generate_state(1)[0]))
    return Stage2Model(vae, dcfg, pcfg, theta, zeta, NoiseSchedule(cfg.timesteps))


def _check_stage1_meta(cfg: TrainConfig, meta: dict) -> None:
    c = meta["config"]
    for key in ("d_v", "d_m", "encoder_seed"):
        if c[key] != getattr(cfg, key):
            raise CheckpointMismatch(f"stage-1 checkpoint has {key}={c[key]}, config has {getattr(cfg, key)}")
    if tuple(c["encoder_patch"]) != tuple(cfg.encoder_patch):
        raise CheckpointMismatch(f"stage-1 checkpoint has encoder_patch={c['encoder_patch']}, "
                                 f"config has {cfg.encoder_patch}")


def align_fn(cfg: TrainConfig):
    if cfg.mode == "soft_trd":
        return lambda Z, M: align.soft_trd_loss(Z, M, cfg.tau, masked_mean=cfg.masked_mean)
    if cfg.mode == "trd":
        return lambda Z, M: align.trd_loss(Z, M, masked_mean=cfg.masked_mean)
    if cfg.mode == "repa":
        def repa(Z, M):
            D = Z.shape[-1]
            return align.repa_loss(tc.reshape(M, (-1, D)), tc.reshape(Z, (-1, D)))
        return repa
    return None


def motion_targets(enc: EncoderParams, psi: CompressorParams, videos: np.ndarray, chunk: int = 64) -> np.ndarray:
    with tc.no_grad():
        return np.concatenate([compress(psi, encode_all(enc, videos[i:i + chunk])).data
                               for i in range(0, len(videos), chunk)]).astype(np.float32)


def train_stage2(cfg: TrainConfig, stage1_ckpt=None, clips: ClipSet | None = None) -> RunResult:
    """Optimize the denoiser and projection head under ``L_diff + lam * L_align``.

    Encoder, compressor, flow decoder and the latent stub stay frozen; the
    freeze ledger records their digests before and after.
    """
    cfg = cfg.replace(stage=2)
    stage1_ckpt = stage1_ckpt or cfg.stage1_ckpt or None
    fn = align_fn(cfg)
    if fn is not None and stage1_ckpt is None:
        raise ValueError(f"loss mode {cfg.mode!r} needs a stage-1 checkpoint")
    if clips is None:
        if not cfg.manifest:
            raise ValueError("stage 2 needs a dataset manifest")
        clips = load_clips(cfg.manifest)
    out = _prepare_out(cfg)
    with execution_mode(cfg.deterministic):
        enc = build_encoder(cfg)
        F, H, W = _clip_dims(cfg, clips)
        model = build_stage2(cfg, F, H, W)
        frozen = dict(enc.arrays(), vae_lift=model.vae.lift)
        M = None
        if stage1_ckpt is not None:
            psi, omega, meta1 = load_stage1(stage1_ckpt)
            _check_stage1_meta(cfg, meta1)
            frozen.update(_stage1_tensors(psi, omega))
            if fn is not None:
                M = motion_targets(enc, psi, clips.videos)
        frozen_before = digests(frozen)
        z0 = vae_encode_stub(model.vae, clips.videos).astype(np.float32)
        classes = np.array([int(lab["family_id"]) for lab in clips.labels])
        params = list(model.theta.values()) + list(model.zeta.values())
        opt = AdamW(params, cfg.learning_rate, (cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)
        order, t_rng, noise_rng = _streams(cfg.seed + 1, 3)
        writer = MetricsWriter(out, STAGE2_COLUMNS, cfg.deterministic)
        try:
            for step in range(1, cfg.steps + 1):
                t0 = time.perf_counter()
                b = _pick(order, len(z0), cfg.batch_size)
                t = t_rng.integers(1, model.schedule.T + 1, size=len(b))
                z_t, eps = forward_noise(z0[b], t, noise_rng, model.schedule)
                opt.zero_grad()
                eps_hat, Y = denoise(model.theta, model.dcfg, z_t, t, classes[b], tap=fn is not None)
                l_diff = diffusion_loss(eps_hat, eps)
                if fn is not None:
                    l_align = fn(project(model.zeta, model.pcfg, Y), M[b])
                    total = align.total_loss(l_diff, l_align, cfg.lam)
                    a_val = float(l_align.data)
                else:
                    total, a_val = l_diff, float("nan")
                value = float(total.data)
                if not np.isfinite(value):
                    raise NonFiniteLoss(step, value)
                total.backward()
                gnorm = global_grad_norm(params)
                opt.step()
                writer.add({"step": step, "loss_diff": float(l_diff.data), "loss_align": a_val,
                            "loss_total": value, "grad_norm": gnorm}, (time.perf_counter() - t0) * 1e3)
        except NonFiniteLoss as exc:
            _diagnose(out, exc, writer)
            raise
        writer.flush()
        write_freeze_ledger(out, frozen_before, digests(frozen))
    tensors = {f"theta.{k}": v.data for k, v in model.theta.items()}
    tensors.update({f"zeta.{k}": v.data for k, v in model.zeta.items()})
    meta = {
        "stage": 2, "step": cfg.steps, "config": _cfg_dict(cfg),
        "stage1_checkpoint": str(Path(stage1_ckpt).resolve()) if stage1_ckpt else None,
        "train_manifest": str(clips.manifest.resolve()), "train_seeds": clips.seeds,
        "clip_shape": [F, H, W],
        "schedule": {"T": model.schedule.T, "alpha_bar_min": model.schedule.alpha_bar_min},
        "projection": {"stride": model.pcfg.spatial_stride, "padding": model.pcfg.spatial_padding,
                       "hidden": model.pcfg.hidden_dim, "variant": model.pcfg.variant},
    }
    ckpt = save_checkpoint(out / "checkpoint", tensors, cfg.steps, meta)
    return RunResult(out, ckpt, writer.rows, {"model": model, "encoder": enc})


def load_stage2(path) -> tuple[Stage2Model, dict]:
    tensors, manifest = load_checkpoint(path)
    meta = manifest.get("meta", {})
    if meta.get("stage") != 2:
        raise CheckpointMismatch(f"{path} is not a stage-2 checkpoint")
    cfg = TrainConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["config"].items()})
    F, H, W = meta.get("clip_shape", cfg.frames_hw)
    model = build_stage2(cfg, F, H, W)
    for k in model.theta:
        model.theta[k] = Tensor(tensors[f"theta.{k}"])
    for k in model.zeta:
        model.zeta[k] = Tensor(tensors[f"zeta.{k}"])
    return model, meta
