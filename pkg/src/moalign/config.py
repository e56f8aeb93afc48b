"""Run configuration: INI files with ``[model]``, ``[train]``, ``[loss]``, ``[data]`` sections.

Every key has a typed default; unknown sections or keys are errors. The
resolved configuration (defaults expanded) is written next to each run.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

LOSS_MODES = ("soft_trd", "trd", "repa", "none")
GEOMETRIES = {"desk": (9, 32, 48), "full": (49, 160, 240)}


class ConfigFileError(ValueError):
    pass


def _opt(default, section):
    return field(default=default, metadata={"section": section})


@dataclass
class TrainConfig:
    # model
    d_v: int = _opt(768, "model")
    d_m: int = _opt(64, "model")
    encoder_patch: tuple = _opt((3, 8, 8), "model")
    encoder_seed: int = _opt(0, "model")
    compressor_hidden: int = _opt(0, "model")  # 0: d_v // 3
    decoder_channels: tuple = _opt((64, 32, 16), "model")
    flow_scale: float = _opt(1.0, "model")
    latent_channels: int = _opt(4, "model")
    vae_seed: int = _opt(0, "model")
    denoiser_width: int = _opt(128, "model")
    denoiser_depth: int = _opt(8, "model")
    denoiser_heads: int = _opt(4, "model")
    denoiser_patch: int = _opt(2, "model")
    mlp_ratio: int = _opt(2, "model")
    tap_layer: int = _opt(0, "model")  # 0: ceil(0.75 L)
    timesteps: int = _opt(50, "model")
    projection: str = _opt("conv", "model")
    projection_hidden: int = _opt(0, "model")  # 0: width / 7.5
    # train
    stage: int = _opt(1, "train")
    steps: int = _opt(2000, "train")
    batch_size: int = _opt(8, "train")
    lr: float = _opt(0.0, "train")  # 0: stage default
    beta1: float = _opt(0.9, "train")
    beta2: float = _opt(0.95, "train")
    weight_decay: float = _opt(1e-3, "train")
    seed: int = _opt(0, "train")
    deterministic: bool = _opt(False, "train")
    out: str = _opt("runs/latest", "train")
    # loss
    mode: str = _opt("soft_trd", "loss")
    lam: float = _opt(0.5, "loss")
    tau: float = _opt(10.0, "loss")
    masked_mean: bool = _opt(False, "loss")
    # data
    manifest: str = _opt("", "data")
    eval_manifest: str = _opt("", "data")
    stage1_ckpt: str = _opt("", "data")
    geometry: str = _opt("desk", "data")
    pair_stride: int = _opt(1, "data")

    STAGE_LR = {1: 1e-4, 2: 2e-6}

    @property
    def learning_rate(self) -> float:
        return self.lr if self.lr > 0 else self.STAGE_LR[self.stage]

    @property
    def tap(self) -> int:
        return self.tap_layer or -(-3 * self.denoiser_depth // 4)

    @property
    def frames_hw(self) -> tuple[int, int, int]:
        return GEOMETRIES[self.geometry]

    def validate(self) -> "TrainConfig":
        if self.stage not in (1, 2):
            raise ConfigFileError(f"stage must be 1 or 2, got {self.stage}")
        if self.mode not in LOSS_MODES:
            raise ConfigFileError(f"loss mode must be one of {LOSS_MODES}, got {self.mode!r}")
        if self.geometry not in GEOMETRIES:
            raise ConfigFileError(f"unknown geometry preset {self.geometry!r}; known: {sorted(GEOMETRIES)}")
        if not 0 < self.d_m < self.d_v:
            raise ConfigFileError(f"need 0 < d_m < d_v, got d_m={self.d_m}, d_v={self.d_v}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigFileError("steps must be >= 0 and batch_size >= 1")
        if self.lam < 0 or not self.tau > 0:
            raise ConfigFileError(f"need lam >= 0 and tau > 0, got lam={self.lam}, tau={self.tau}")
        if not 1 <= self.tap <= self.denoiser_depth:
            raise ConfigFileError(f"tap_layer must lie in [1, {self.denoiser_depth}], got {self.tap}")
        if len(self.encoder_patch) != 3 or len(self.decoder_channels) != 3:
            raise ConfigFileError("encoder_patch and decoder_channels take three integers")
        if self.projection not in ("conv", "mlp"):
            raise ConfigFileError(f"projection must be 'conv' or 'mlp', got {self.projection!r}")
        return self

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes).validate()

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for f in fields(self):
            sec = f.metadata["section"]
            if not cp.has_section(sec):
                cp.add_section(sec)
            cp.set(sec, f.name, _format(getattr(self, f.name)))
        lines = []
        for sec in ("model", "train", "loss", "data"):
            lines.append(f"[{sec}]")
            lines.extend(f"{k} = {v}" for k, v in cp.items(sec))
            lines.append("")
        return "\n".join(lines)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse(kind, raw: str, key: str):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is tuple:
            return tuple(int(x) for x in raw.split(","))
        if kind is float:
            return float(raw)
        if kind is int:
            return int(raw)
        return raw
    except ValueError:
        raise ConfigFileError(f"bad value for {key}: {raw!r}") from None


_TYPES = {"int": int, "float": float, "str": str, "bool": bool, "tuple": tuple}


def field_types() -> dict[str, tuple[str, type]]:
    return {f.name: (f.metadata["section"], _TYPES[f.type]) for f in fields(TrainConfig)}


def parse_overrides(pairs: dict[str, str]) -> dict:
    types = field_types()
    out = {}
    for key, raw in pairs.items():
        if key not in types:
            raise ConfigFileError(f"unknown config key {key!r}")
        out[key] = _parse(types[key][1], raw, key)
    return out


def load_config(path=None, **overrides) -> TrainConfig:
    """Read an INI file (optional) and apply keyword overrides on top."""
    values = {}
    if path is not None:
        path = Path(path)
        cp = configparser.ConfigParser(interpolation=None)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigFileError(f"cannot read config {path}: {exc}") from exc
        try:
            cp.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigFileError(f"{path}: {exc}") from exc
        types = field_types()
        for sec in cp.sections():
            if sec not in ("model", "train", "loss", "data"):
                raise ConfigFileError(f"{path}: unknown section [{sec}]")
            for key, raw in cp.items(sec):
                if key not in types or types[key][0] != sec:
                    raise ConfigFileError(f"{path}: unknown key {key!r} in [{sec}]")
                values[key] = _parse(types[key][1], raw, key)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values).validate()
