"""Synthetic moving-shape videos with exact optical flow.

Scenes hold non-overlapping rectangles and disks moving rigidly on a constant
background. Coordinates are continuous: pixel ``(row i, col j)`` covers
``[j, j+1) x [i, i+1)`` and its center is ``(j + 0.5, i + 0.5)``. Flow is the
closed-form displacement of the material point under each pixel center, so it
never depends on pixel matching.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .io import read_tensor, write_tensor

PALETTE = np.array(
    [
        [0.90, 0.20, 0.20],
        [0.20, 0.80, 0.25],
        [0.25, 0.35, 0.95],
        [0.95, 0.85, 0.20],
        [0.80, 0.30, 0.85],
        [0.20, 0.85, 0.85],
    ]
)

SUPERSAMPLE = 4


class SceneError(ValueError):
    pass


@dataclass
class ObjectSpec:
    kind: str  # "rectangle" | "disk"
    size: tuple[float, float]  # (width, height) for rectangles, (radius, radius) for disks
    position: tuple[float, float]  # center (x, y) at frame 0
    velocity: tuple[float, float] = (0.0, 0.0)  # pixels / frame
    angular_velocity: float = 0.0  # radians / frame, disks only
    color: int = 0

    def half_extent(self) -> tuple[float, float]:
        if self.kind == "rectangle":
            return self.size[0] / 2.0, self.size[1] / 2.0
        return self.size[0], self.size[0]

    def center(self, f: float) -> tuple[float, float]:
        return (self.position[0] + self.velocity[0] * f, self.position[1] + self.velocity[1] * f)


@dataclass
class SceneSpec:
    height: int = 32
    width: int = 48
    frames: int = 9
    objects: list[ObjectSpec] = field(default_factory=list)
    background: float = 0.1
    channels: int = 3
    family: str = "custom"

    def validate(self) -> None:
        if self.channels != 3:
            raise SceneError("only RGB scenes are supported")
        if self.frames < 2:
            raise SceneError(f"need at least 2 frames, got {self.frames}")
        for n, o in enumerate(self.objects):
            if o.kind not in ("rectangle", "disk"):
                raise SceneError(f"object {n}: unknown kind {o.kind!r}")
            if o.kind == "rectangle" and o.angular_velocity != 0:
                raise SceneError(f"object {n}: only disks may rotate")
            if not 0 <= o.color < len(PALETTE):
                raise SceneError(f"object {n}: color {o.color} outside palette")
            hx, hy = o.half_extent()
            for f in (0, self.frames - 1):
                cx, cy = o.center(f)
                if cx - hx < 0 or cx + hx > self.width or cy - hy < 0 or cy + hy > self.height:
                    raise SceneError(f"object {n} leaves the canvas by frame {f}")
        for f in range(self.frames):
            boxes = []
            for o in self.objects:
                cx, cy = o.center(f)
                hx, hy = o.half_extent()
                boxes.append((cx - hx, cx + hx, cy - hy, cy + hy))
            for a in range(len(boxes)):
                for b in range(a + 1, len(boxes)):
                    A, B = boxes[a], boxes[b]
                    if A[0] < B[1] + 1 and B[0] < A[1] + 1 and A[2] < B[3] + 1 and B[2] < A[3] + 1:
                        raise SceneError(f"objects {a} and {b} overlap at frame {f}")


def _rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def _body_coords(o: ObjectSpec, f: int, px: np.ndarray, py: np.ndarray):
    """Map world points to the object's body frame at frame ``f``."""
    cx, cy = o.center(f)
    dx, dy = px - cx, py - cy
    if o.angular_velocity:
        th = -o.angular_velocity * f
        c, s = math.cos(th), math.sin(th)
        dx, dy = c * dx - s * dy, s * dx + c * dy
    return dx, dy


def _inside(o: ObjectSpec, bx: np.ndarray, by: np.ndarray) -> np.ndarray:
    if o.kind == "rectangle":
        return (np.abs(bx) <= o.size[0] / 2.0) & (np.abs(by) <= o.size[1] / 2.0)
    return bx * bx + by * by <= o.size[0] ** 2


def _shade(o: ObjectSpec, bx: np.ndarray, by: np.ndarray) -> np.ndarray:
    base = PALETTE[o.color]
    if o.kind == "rectangle":
        return np.broadcast_to(base, bx.shape + (3,))
    # angular texture so that spinning is visible
    phi = np.arctan2(by, bx)
    k = 0.65 + 0.35 * np.cos(2 * phi)
    return base * k[..., None]


def render_frame(spec: SceneSpec, f: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (image[H, W, 3], per-object coverage[K, H, W]) for frame ``f``."""
    ss = SUPERSAMPLE
    H, W = spec.height, spec.width
    sy = (np.arange(H * ss) + 0.5) / ss
    sx = (np.arange(W * ss) + 0.5) / ss
    PX, PY = np.meshgrid(sx, sy)
    img = np.full((H * ss, W * ss, 3), spec.background, dtype=np.float64)
    cover = np.zeros((len(spec.objects), H, W))
    for n, o in enumerate(spec.objects):
        bx, by = _body_coords(o, f, PX, PY)
        m = _inside(o, bx, by)
        img[m] = _shade(o, bx[m], by[m])
        cover[n] = m.reshape(H, ss, W, ss).mean(axis=(1, 3))
    img = img.reshape(H, ss, W, ss, 3).mean(axis=(1, 3))
    return img, cover


def object_displacement(o: ObjectSpec, f: int, px: np.ndarray, py: np.ndarray, dt: int = 1):
    """Closed-form displacement over ``dt`` frames of material points at ``(px, py)``, frame ``f``."""
    cx, cy = o.center(f)
    rx, ry = px - cx, py - cy
    u = np.full_like(px, o.velocity[0] * dt, dtype=np.float64)
    v = np.full_like(py, o.velocity[1] * dt, dtype=np.float64)
    if o.angular_velocity:
        R = _rot(o.angular_velocity * dt)
        u = u + (R[0, 0] - 1) * rx + R[0, 1] * ry
        v = v + R[1, 0] * rx + (R[1, 1] - 1) * ry
    return u, v


def render_clip(spec: SceneSpec, seed: int = 0, pair_stride: int = 1):
    """Render ``spec`` to ``(video[F, H, W, 3], flow[P, 2, H, W])``.

    Flow pair ``k`` maps frame ``k * pair_stride`` to ``(k + 1) * pair_stride``.
    A pixel carries an object's flow when that object's frame coverage is at
    least 0.5; every other pixel has zero flow. Rendering has no random part,
    so ``seed`` is accepted only to keep dataset calls uniform.
    """
    spec.validate()
    if pair_stride < 1 or pair_stride > spec.frames - 1:
        raise SceneError(f"pair_stride must be in [1, {spec.frames - 1}], got {pair_stride}")
    del seed  # rendering is fully determined by the scene
    H, W, F = spec.height, spec.width, spec.frames
    video = np.empty((F, H, W, 3), dtype=np.float32)
    covers = []
    for f in range(F):
        img, cov = render_frame(spec, f)
        video[f] = img
        covers.append(cov)
    n_pairs = (F - 1) // pair_stride
    flow = np.zeros((n_pairs, 2, H, W), dtype=np.float32)
    py, px = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    for k in range(n_pairs):
        f = k * pair_stride
        for n, o in enumerate(spec.objects):
            mask = covers[f][n] >= 0.5
            if not mask.any():
                continue
            u, v = object_displacement(o, f, px, py, pair_stride)
            flow[k, 0][mask] = u[mask]
            flow[k, 1][mask] = v[mask]
    np.clip(video, 0.0, 1.0, out=video)
    return video, flow


# dataset families ------------------------------------------------------------------
def _place(rng, extent: float, travel: float, size: int) -> float | None:
    lo = extent - min(travel, 0.0)
    hi = size - extent - max(travel, 0.0)
    if hi < lo:
        return None
    return float(rng.uniform(lo, hi))


def _translating(rng, kind: str, geometry: dict, rotate: bool) -> SceneSpec:
    H, W, F = geometry["height"], geometry["width"], geometry["frames"]
    for _ in range(1000):
        if kind == "rectangle":
            size = (float(rng.uniform(10, 18)), float(rng.uniform(10, 16)))
            ext = (size[0] / 2, size[1] / 2)
        else:
            r = float(rng.uniform(5.5, 8.5))
            size, ext = (r, r), (r, r)
        vel = (float(rng.uniform(-2.5, 2.5)), float(rng.uniform(-1.5, 1.5)))
        omega = float(rng.choice([-1, 1]) * rng.uniform(0.05, 0.15)) if rotate else 0.0
        if rotate:
            vel = (vel[0] * 0.5, vel[1] * 0.5)
        x = _place(rng, ext[0], vel[0] * (F - 1), W)
        y = _place(rng, ext[1], vel[1] * (F - 1), H)
        if x is None or y is None:
            continue
        obj = ObjectSpec(kind, size, (x, y), vel, omega, int(rng.integers(len(PALETTE))))
        return SceneSpec(H, W, F, [obj], background=float(rng.uniform(0.05, 0.2)))
    raise SceneError("could not place an object inside the canvas")


FAMILIES: dict[str, Callable] = {
    "rect_translate": lambda rng, g: _translating(rng, "rectangle", g, False),
    "disk_translate": lambda rng, g: _translating(rng, "disk", g, False),
    "disk_rotate": lambda rng, g: _translating(rng, "disk", g, True),
    "rect_static": lambda rng, g: _static(rng, g),
}

FAMILY_IDS = {name: i for i, name in enumerate(FAMILIES)}

DEFAULT_DISTRIBUTION = {"rect_translate": 0.5, "disk_translate": 0.25, "disk_rotate": 0.25}

DEFAULT_GEOMETRY = {"frames": 9, "height": 32, "width": 48}


def _static(rng, g):
    spec = _translating(rng, "rectangle", g, False)
    spec.objects[0].velocity = (0.0, 0.0)
    return spec


def sample_scene(family: str, rng: np.random.Generator, geometry: Mapping | None = None) -> SceneSpec:
    if family not in FAMILIES:
        raise SceneError(f"unknown scene family {family!r}; known: {sorted(FAMILIES)}")
    spec = FAMILIES[family](rng, dict(geometry or DEFAULT_GEOMETRY))
    spec.family = family
    return spec


def allocate_counts(n: int, distribution: Mapping[str, float]) -> dict[str, int]:
    """Largest-remainder split of ``n`` items over the weighted families."""
    names = list(distribution)
    w = np.array([float(distribution[k]) for k in names])
    if (w < 0).any() or w.sum() <= 0:
        raise ValueError("distribution weights must be non-negative and not all zero")
    quota = n * w / w.sum()
    counts = np.floor(quota).astype(int)
    rest = n - counts.sum()
    order = np.argsort(-(quota - counts), kind="stable")
    counts[order[:rest]] += 1
    return {k: int(c) for k, c in zip(names, counts)}


def scene_labels(spec: SceneSpec, seed: int) -> dict:
    o = spec.objects[0]
    return {
        "family": spec.family,
        "family_id": FAMILY_IDS.get(spec.family, -1),
        "kind": o.kind,
        "appearance": o.color,
        "velocity": [round(o.velocity[0], 9), round(o.velocity[1], 9)],
        "angular_velocity": round(o.angular_velocity, 9),
        "seed": seed,
    }


def make_dataset(
    out_dir,
    n_clips: int,
    spec_distribution: Mapping[str, float] | None = None,
    seed: int = 0,
    geometry: Mapping | None = None,
    pair_stride: int = 1,
) -> Path:
    """Render ``n_clips`` scenes to ``out_dir`` and write ``manifest.tsv``.

    Each manifest line is ``clip_path<TAB>flow_path<TAB>label_json`` with
    paths relative to ``out_dir``. Family counts follow the distribution by
    largest remainder; clip order is a seeded shuffle.
    """
    if n_clips < 1:
        raise ValueError(f"n_clips must be >= 1, got {n_clips}")
    dist = dict(spec_distribution or DEFAULT_DISTRIBUTION)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    counts = allocate_counts(n_clips, dist)
    families = [name for name, c in counts.items() for _ in range(c)]
    ss = np.random.SeedSequence(seed)
    order_rng = np.random.default_rng(ss.spawn(1)[0])
    families = [families[i] for i in order_rng.permutation(len(families))]
    child_seeds = ss.spawn(n_clips)
    lines = []
    for i, (fam, cs) in enumerate(zip(families, child_seeds)):
        clip_seed = int(cs.generate_state(1)[0])
        spec = sample_scene(fam, np.random.default_rng(clip_seed), geometry)
        video, flow = render_clip(spec, clip_seed, pair_stride)
        cname, fname = f"clip_{i:05d}.motn", f"flow_{i:05d}.motn"
        write_tensor(out_dir / cname, video)
        write_tensor(out_dir / fname, flow)
        lines.append(f"{cname}\t{fname}\t{json.dumps(scene_labels(spec, clip_seed), sort_keys=True)}")
    manifest = out_dir / "manifest.tsv"
    try:
        manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write manifest {manifest}: {exc}") from exc
    return manifest


@dataclass
class ClipRecord:
    clip_path: Path
    flow_path: Path
    labels: dict

    def load(self):
        return read_tensor(self.clip_path).data, read_tensor(self.flow_path).data


def read_manifest(path) -> list[ClipRecord]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.tsv"
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    base = path.parent
    records = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{n}: expected 3 tab-separated fields, got {len(parts)}")
        records.append(ClipRecord(base / parts[0], base / parts[1], json.loads(parts[2])))
    return records


def spec_to_dict(spec: SceneSpec) -> dict:
    return asdict(spec)
