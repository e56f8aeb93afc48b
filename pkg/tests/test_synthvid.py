import math

import numpy as np
import pytest

from moalign.synthvid import (FAMILIES, ObjectSpec, SceneError, SceneSpec, allocate_counts, make_dataset,
                              object_displacement, read_manifest, render_clip, sample_scene)


def _scene(*objects, frames=4):
    return SceneSpec(height=32, width=48, frames=frames, objects=list(objects), background=0.1)


def test_integer_translation_shifts_pixels_exactly():
    o = ObjectSpec("rectangle", (10, 8), (15.0, 12.0), (2.0, 1.0), color=1)
    video, flow = render_clip(_scene(o))
    # frame 1 is frame 0 shifted by (dx=2, dy=1)
    np.testing.assert_array_equal(video[1, 1:, 2:], video[0, :-1, :-2])
    inside = video[0, :, :, 1] > 0.5
    assert inside.sum() == 10 * 8
    assert np.all(flow[0, 0][inside] == 2.0) and np.all(flow[0, 1][inside] == 1.0)
    assert not flow[0][:, ~inside].any()


def test_static_scene_has_zero_flow():
    o = ObjectSpec("disk", (6, 6), (20.0, 16.0), color=2)
    video, flow = render_clip(_scene(o))
    assert not flow.any()
    np.testing.assert_array_equal(video[0], video[-1])


def _track(o, f, px, py):
    # move material points by composing body-frame coordinates, no closed form
    cx, cy = o.center(f)
    a = -o.angular_velocity * f
    bx = math.cos(a) * (px - cx) - math.sin(a) * (py - cy)
    by = math.sin(a) * (px - cx) + math.cos(a) * (py - cy)
    b = o.angular_velocity * (f + 1)
    nx, ny = o.center(f + 1)
    return nx + math.cos(b) * bx - math.sin(b) * by - px, ny + math.sin(b) * bx + math.cos(b) * by - py


@pytest.mark.parametrize("seed", range(5))
def test_rotation_flow_matches_point_tracking(seed):
    rng = np.random.default_rng(seed)
    o = ObjectSpec("disk", (7, 7), (24.0, 16.0), tuple(rng.uniform(-1, 1, 2)), float(rng.uniform(-0.2, 0.2)))
    for f in range(3):
        px, py = rng.uniform(18, 30, 4), rng.uniform(10, 22, 4)
        u, v = object_displacement(o, f, px, py)
        for k in range(4):
            tu, tv = _track(o, f, px[k], py[k])
            assert abs(u[k] - tu) < 1e-12 and abs(v[k] - tv) < 1e-12


def test_flow_shape_and_pair_stride():
    o = ObjectSpec("rectangle", (8, 8), (12.0, 12.0), (1.0, 0.0))
    v, f = render_clip(_scene(o, frames=9))
    assert v.shape == (9, 32, 48, 3) and f.shape == (8, 2, 32, 48)
    _, f2 = render_clip(_scene(o, frames=9), pair_stride=2)
    assert f2.shape == (4, 2, 32, 48)
    inside = f2[0, 0] != 0
    assert np.all(f2[0, 0][inside] == 2.0)
    with pytest.raises(SceneError):
        render_clip(_scene(o, frames=9), pair_stride=9)


def test_scene_validation_errors():
    with pytest.raises(SceneError, match="frames"):
        render_clip(_scene(ObjectSpec("disk", (4, 4), (20.0, 16.0)), frames=1))
    with pytest.raises(SceneError, match="leaves the canvas"):
        render_clip(_scene(ObjectSpec("rectangle", (8, 8), (44.0, 12.0), (3.0, 0.0))))
    with pytest.raises(SceneError, match="overlap"):
        render_clip(_scene(ObjectSpec("disk", (5, 5), (20.0, 16.0)), ObjectSpec("disk", (5, 5), (26.0, 16.0))))
    with pytest.raises(SceneError, match="only disks"):
        render_clip(_scene(ObjectSpec("rectangle", (8, 8), (20.0, 16.0), angular_velocity=0.1)))
    with pytest.raises(SceneError, match="unknown"):
        sample_scene("triangle", np.random.default_rng(0))


@pytest.mark.parametrize("family", list(FAMILIES))
def test_every_family_renders_in_range(family):
    spec = sample_scene(family, np.random.default_rng(3))
    video, flow = render_clip(spec)
    assert video.min() >= 0 and video.max() <= 1 and np.isfinite(flow).all()


def test_allocate_counts_largest_remainder():
    assert allocate_counts(10, {"a": 0.5, "b": 0.25, "c": 0.25}) == {"a": 5, "b": 3, "c": 2}
    assert sum(allocate_counts(7, {"a": 1, "b": 1, "c": 1}).values()) == 7
    with pytest.raises(ValueError):
        allocate_counts(3, {"a": 0})


def test_make_dataset_is_deterministic(tmp_path):
    m1 = make_dataset(tmp_path / "a", 6, seed=5)
    m2 = make_dataset(tmp_path / "b", 6, seed=5)
    assert m1.read_text() == m2.read_text()
    for r1, r2 in zip(read_manifest(m1), read_manifest(m2)):
        assert r1.clip_path.read_bytes() == r2.clip_path.read_bytes()
    assert make_dataset(tmp_path / "c", 6, seed=6).read_text() != m1.read_text()


def test_manifest_labels(tiny_dataset):
    recs = read_manifest(tiny_dataset)
    assert len(recs) == 8
    fams = {r.labels["family"] for r in recs}
    assert fams <= set(FAMILIES)
    for r in recs:
        lab = r.labels
        assert set(lab) == {"family", "family_id", "kind", "appearance", "velocity", "angular_velocity", "seed"}
        v, f = r.load()
        assert v.shape == (9, 32, 48, 3) and f.shape == (8, 2, 32, 48)
        if lab["family"] != "disk_rotate":
            assert lab["angular_velocity"] == 0


def test_manifest_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_manifest(tmp_path)
    (tmp_path / "manifest.tsv").write_text("a\tb\n")
    with pytest.raises(ValueError, match="3 tab-separated"):
        read_manifest(tmp_path)
    with pytest.raises(ValueError):
        make_dataset(tmp_path / "x", 0)


def test_single_clip_dataset_reads_back(tmp_path):
    recs = read_manifest(make_dataset(tmp_path, 1, seed=0))
    assert len(recs) == 1
    v, f = recs[0].load()
    assert v.dtype == np.float32 and v.min() >= 0 and v.max() <= 1


def test_label_histogram_matches_distribution(tmp_path):
    dist = {"rect_translate": 0.5, "disk_translate": 0.25, "disk_rotate": 0.25}
    recs = read_manifest(make_dataset(tmp_path, 64, dist, seed=4))
    counts = {k: sum(r.labels["family"] == k for r in recs) for k in dist}
    for k, w in dist.items():
        assert abs(counts[k] - 64 * w) <= 1


def test_rotating_disk_flow_against_occupancy_tracking():
    # follow each pixel center's material point by rotating about the disk center
    o = ObjectSpec("disk", (8, 8), (24.0, 16.0), (0.0, 0.0), 0.1, color=3)
    _, flow = render_clip(_scene(o, frames=3))
    ys, xs = np.nonzero(flow[0, 0] != 0)
    err = 0.0
    for i, j in zip(ys, xs):
        px, py = j + 0.5, i + 0.5
        r = np.array([px - 24.0, py - 16.0])
        c, s = math.cos(0.1), math.sin(0.1)
        moved = np.array([c * r[0] - s * r[1], s * r[0] + c * r[1]])
        err = max(err, float(np.hypot(*(flow[0, :, i, j] - (moved - r)))))
        # small-angle closed form omega x r
        assert np.hypot(flow[0, 0, i, j] + 0.1 * r[1], flow[0, 1, i, j] - 0.1 * r[0]) <= 0.05 * 8
    assert err <= 0.05
