"""Evaluation: flow EPE, relational distance and linear disentanglement probes."""
from __future__ import annotations

import csv
import io as _io
import json
from pathlib import Path

import numpy as np

from . import align
from . import tensor as tc
from .config import TrainConfig
from .diffusion import denoise, diffusion_loss, forward_noise, project, vae_encode_stub
from .io import atomic_write_text, load_checkpoint
from .motion import compress, decode_flow, epe
from .train import (METRICS_VERSION, ClipSet, build_encoder, encode_all, load_clips, load_stage1, load_stage2,
                    motion_targets, stage1_targets)


class DegenerateLabels(ValueError):
    pass


# probes -----------------------------------------------------------------------------------
def pool(features) -> np.ndarray:
    """Mean over all token axes: ``[N, ..., D] -> [N, D]``."""
    x = np.asarray(features, dtype=np.float64)
    return x.reshape(len(x), -1, x.shape[-1]).mean(axis=1) if x.ndim > 2 else x


def ridge_fit(X: np.ndarray, Y: np.ndarray, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form ridge with an unpenalized intercept."""
    xm, ym = X.mean(0), Y.mean(0)
    Xc = X - xm
    A = Xc.T @ Xc + alpha * np.eye(X.shape[1])
    W = np.linalg.solve(A, Xc.T @ (Y - ym))
    return W, ym - xm @ W


def r2_score(y: np.ndarray, pred: np.ndarray) -> float:
    """Coefficient of determination averaged over outputs, clipped to [0, 1]."""
    y, pred = np.atleast_2d(y.T).T, np.atleast_2d(pred.T).T
    ss_tot = ((y - y.mean(0)) ** 2).sum(0)
    ss_res = ((y - pred) ** 2).sum(0)
    return float(np.clip(1.0 - ss_res / ss_tot, 0.0, 1.0).mean())


def random_projection(S, width: int, seed: int = 0) -> np.ndarray:
    """Gaussian projection of (pooled) features to ``width`` dims."""
    S = pool(S)
    P = np.random.default_rng(seed).standard_normal((S.shape[1], width)) / np.sqrt(S.shape[1])
    return S @ P


def _standardize(train, test):
    mu, sd = train.mean(0), train.std(0)
    sd[sd < 1e-12] = 1.0
    return (train - mu) / sd, (test - mu) / sd


def _velocity_r2(X, v, tr, te, alpha):
    Xtr, Xte = _standardize(X[tr], X[te])
    W, b = ridge_fit(Xtr, v[tr], alpha)
    return r2_score(v[te], Xte @ W + b)


def _appearance_acc(X, a, tr, te, alpha):
    classes = np.unique(a[tr])
    Xtr, Xte = _standardize(X[tr], X[te])
    Y = np.where(a[tr, None] == classes[None], 1.0, -1.0)
    W, b = ridge_fit(Xtr, Y, alpha)
    pred = classes[np.argmax(Xte @ W + b, axis=1)]
    return float(np.mean(pred == a[te]))


def probe_disentanglement(M_features, S_features, labels: dict, seed: int = 0, alpha: float = 1.0,
                          train_frac: float = 0.5) -> dict[str, float]:
    """Linear probes for velocity (ridge R^2) and appearance (one-vs-rest accuracy) on pooled features.

    ``labels`` holds ``velocity`` (``[N, 2]``) and ``appearance`` (``[N]``
    class ids). Samples are split once by ``seed``; both feature sets share
    the split.
    """
    M, S = pool(M_features), pool(S_features)
    v = np.asarray(labels["velocity"], dtype=np.float64).reshape(len(M), -1)
    a = np.asarray(labels["appearance"])
    n = len(M)
    if len(S) != n or len(v) != n or len(a) != n:
        raise ValueError("features and labels disagree on the number of samples")
    if n < 10 * max(M.shape[1], S.shape[1]):
        raise ValueError(f"probe needs >= 10 samples per feature dim, got {n} samples for "
                         f"{max(M.shape[1], S.shape[1])} dims")
    perm = np.random.default_rng(seed).permutation(n)
    k = int(round(train_frac * n))
    tr, te = perm[:k], perm[k:]
    if np.any(v[tr].var(0) < 1e-12) or np.any(v[te].var(0) < 1e-12):
        raise DegenerateLabels("velocity labels have no variance on a probe split")
    if len(np.unique(a[tr])) < 2:
        raise DegenerateLabels("appearance labels need at least two classes")
    return {
        "vel_r2_from_M": _velocity_r2(M, v, tr, te, alpha),
        "vel_r2_from_S": _velocity_r2(S, v, tr, te, alpha),
        "app_acc_from_M": _appearance_acc(M, a, tr, te, alpha),
        "app_acc_from_S": _appearance_acc(S, a, tr, te, alpha),
    }


def probe_labels(clips: ClipSet) -> dict:
    return {"velocity": np.array([lab["velocity"] for lab in clips.labels], dtype=np.float64),
            "appearance": np.array([lab["appearance"] for lab in clips.labels])}


def probe_with_baseline(M, S, labels, seed: int) -> dict[str, float]:
    """Probe M against an equal-width random projection of S, drawn from ``seed``."""
    S_rp = random_projection(S, M.shape[-1], seed)
    return probe_disentanglement(M, S_rp, labels, seed)


# evaluation ------------------------------------------------------------------------------
def _overlap(meta: dict, clips: ClipSet) -> list[str]:
    warnings = []
    train_seeds = set(meta.get("train_seeds", []))
    shared = train_seeds.intersection(clips.seeds)
    if shared:
        warnings.append(f"eval manifest shares {len(shared)} clip(s) with the training manifest")
    if meta.get("train_manifest") and Path(meta["train_manifest"]) == clips.manifest.resolve():
        warnings.append("eval manifest is the training manifest")
    return warnings


def evaluate_stage1(ckpt, clips: ClipSet, probe_seed: int = 0, probes: bool = True) -> dict:
    psi, omega, meta = load_stage1(ckpt)
    cfg = TrainConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["config"].items()})
    enc = build_encoder(cfg)
    S = encode_all(enc, clips.videos)
    target, _ = stage1_targets(cfg, enc, clips)
    with tc.no_grad():
        M = compress(psi, S).data
        pred = np.concatenate([decode_flow(omega, M[i:i + 64]).data for i in range(0, len(M), 64)])
    e = epe(pred, target)
    zero = epe(np.zeros_like(target), target)
    res = {"n_clips": len(clips), "epe": e, "epe_zero": zero, "epe_ratio": e / zero if zero > 0 else float("nan")}
    if probes:
        try:
            res.update(probe_with_baseline(M, S, probe_labels(clips), probe_seed))
        except ValueError as exc:
            res["probe_skipped"] = str(exc)
    res["warnings"] = _overlap(meta, clips)
    return res


def evaluate_stage2(ckpt, clips: ClipSet, seed: int = 0, tau: float | None = None) -> dict:
    model, meta = load_stage2(ckpt)
    cfg = TrainConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["config"].items()})
    rng = np.random.default_rng(seed)
    z0 = vae_encode_stub(model.vae, clips.videos).astype(np.float32)
    classes = np.array([int(lab["family_id"]) for lab in clips.labels])
    t = rng.integers(1, model.schedule.T + 1, size=len(z0))
    z_t, eps = forward_noise(z0, t, rng, model.schedule)
    with tc.no_grad():
        eps_hat, Y = denoise(model.theta, model.dcfg, z_t, t, classes)
        res = {"n_clips": len(clips), "loss_diff": float(diffusion_loss(eps_hat, eps).data)}
        if meta.get("stage1_checkpoint"):
            psi, _, _ = load_stage1(meta["stage1_checkpoint"])
            M = motion_targets(build_encoder(cfg), psi, clips.videos)
            Z = project(model.zeta, model.pcfg, Y).data
            res.update(align.relational_distance(Z, M, cfg.tau if tau is None else tau))
    res["warnings"] = _overlap(meta, clips)
    return res


def evaluate(checkpoint, eval_manifest, out=None, seed: int = 0) -> dict:
    """Evaluate a checkpoint of either stage on a held-out manifest; writes ``eval.csv`` and ``eval.json``."""
    clips = load_clips(eval_manifest)
    _, manifest = load_checkpoint(checkpoint)
    stage = manifest.get("meta", {}).get("stage")
    if stage == 1:
        res = evaluate_stage1(checkpoint, clips, seed)
    elif stage == 2:
        res = evaluate_stage2(checkpoint, clips, seed)
    else:
        raise ValueError(f"{checkpoint}: unknown checkpoint stage {stage!r}")
    res = {"stage": stage, **res}
    if out is not None:
        write_eval(Path(out), res)
    return res


def write_eval(out: Path, res: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    buf = _io.StringIO()
    buf.write(METRICS_VERSION + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("metric", "value"))
    for k, v in res.items():
        if isinstance(v, (int, float)) and not isinstance(v, bool):
            w.writerow((k, repr(float(v)) if isinstance(v, float) else v))
    for msg in res.get("warnings", []):
        w.writerow(("warning", msg))
    atomic_write_text(out / "eval.csv", buf.getvalue())
    atomic_write_text(out / "eval.json", json.dumps(res, indent=2, sort_keys=True) + "\n")
