"""Stage-2 ablation sweeps: loss mode, frame-distance temperature and tap layer.

Every variant shares the base seed, so all variants see the same
initialization, batches, timesteps and noise. Variants with identical
settings (the default soft-relational run appears in every suite) are
trained once and reused.
"""
from __future__ import annotations

import csv
import io as _io
import math
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .io import atomic_write_text
from .train import METRICS_VERSION, ClipSet, load_clips, train_stage2

SUITES = ("loss_mode", "tau", "tap")
COLUMNS = ("suite", "variant", "loss_mode", "tau", "tap_layer", "steps", "final_loss_diff", "final_loss_align",
           "align_first50", "align_last50", "diff_last50", "run_dir")


def variants(suite: str, base: TrainConfig) -> list[tuple[str, dict]]:
    if suite == "loss_mode":
        return [(m, {"mode": m}) for m in ("none", "repa", "trd", "soft_trd")]
    if suite == "tau":
        return [(f"tau={t:g}", {"mode": "soft_trd", "tau": t}) for t in (1.0, 10.0, 100.0, math.inf)]
    if suite == "tap":
        L = base.denoiser_depth
        taps = [max(1, math.ceil(L * q / 4)) for q in (1, 2, 3, 4)]
        return [(f"tap={k}", {"mode": "soft_trd", "tap_layer": k}) for k in taps]
    raise ValueError(f"unknown ablation suite {suite!r}; known: {SUITES}")


def _key(cfg: TrainConfig) -> tuple:
    # only literally identical settings share a run; tau=inf and trd are trained separately
    return (cfg.mode, cfg.tau if cfg.mode == "soft_trd" else None, cfg.tap, cfg.steps, cfg.lam, cfg.masked_mean)


def _mean(vals):
    vals = [v for v in vals if not math.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def summarize(rows: list[dict]) -> dict:
    k = min(50, len(rows))
    align_vals = [r["loss_align"] for r in rows]
    return {
        "final_loss_diff": rows[-1]["loss_diff"] if rows else float("nan"),
        "final_loss_align": rows[-1]["loss_align"] if rows else float("nan"),
        "align_first50": _mean(align_vals[:k]),
        "align_last50": _mean(align_vals[-k:]) if k else float("nan"),
        "diff_last50": _mean([r["loss_diff"] for r in rows[-k:]]),
    }


def run_ablation(suite: str, base: TrainConfig, stage1_ckpt=None, out=None, clips: ClipSet | None = None,
                 only: list[str] | None = None, cache: dict | None = None) -> Path:
    """Train each variant of ``suite`` and write ``ablation_<suite>.csv`` under ``out``."""
    out = Path(out or base.out)
    if clips is None:
        clips = load_clips(base.manifest)
    cache = {} if cache is None else cache
    rows = []
    for name, change in variants(suite, base):
        if only is not None and name not in only:
            continue
        cfg = base.replace(stage=2, out=str(out / suite / name.replace("=", "_")), **change)
        key = _key(cfg)
        if key not in cache:
            res = train_stage2(cfg, stage1_ckpt, clips)
            cache[key] = (res.out_dir, res.rows)
        run_dir, trace = cache[key]
        rows.append({"suite": suite, "variant": name, "loss_mode": cfg.mode, "tau": cfg.tau, "tap_layer": cfg.tap,
                     "steps": cfg.steps, **summarize(trace), "run_dir": str(run_dir)})
    buf = _io.StringIO()
    buf.write(METRICS_VERSION + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in COLUMNS])
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"ablation_{suite}.csv"
    atomic_write_text(path, buf.getvalue())
    return path


def read_ablation(path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != METRICS_VERSION:
        raise ValueError(f"{path}: missing '{METRICS_VERSION}' header")
    return list(csv.DictReader(lines[1:]))
