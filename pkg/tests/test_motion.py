import numpy as np
import pytest

from moalign.motion import (NonFiniteLoss, compress, decode_flow, epe, flow_loss, flow_target_frames,
                            init_compressor, init_flow_decoder, make_stage1_state, stage1_step)


def test_desk_shapes(rng):
    psi = init_compressor(0, 96, 16)
    omega = init_flow_decoder(1, 16, (2, 32, 48))
    M = compress(psi, rng.standard_normal((3, 4, 6, 96)).astype(np.float32))
    assert M.shape == (3, 4, 6, 16)
    assert decode_flow(omega, M).shape == (2, 2, 32, 48)
    assert decode_flow(omega, rng.standard_normal((5, 3, 4, 6, 16))).shape == (5, 2, 2, 32, 48)


def test_decoder_starts_at_zero_flow(rng):
    omega = init_flow_decoder(1, 16, (2, 32, 48))
    assert not decode_flow(omega, rng.standard_normal((3, 4, 6, 16))).data.any()


def test_compressor_is_local_in_space(rng):
    # a change at one token only reaches that token's spatial column
    psi = init_compressor(0, 24, 4, dtype=np.float64)
    S = rng.standard_normal((3, 4, 6, 24))
    S2 = S.copy()
    S2[1, 2, 3] += 1.0
    diff = np.abs(compress(psi, S2).data - compress(psi, S).data).sum(axis=(0, -1))
    assert diff[2, 3] > 0 and diff.sum() == diff[2, 3]


def test_invalid_dims():
    with pytest.raises(ValueError, match="D_m"):
        init_compressor(0, 16, 16)
    psi = init_compressor(0, 96, 16)
    with pytest.raises(ValueError, match="96"):
        compress(psi, np.zeros((3, 4, 6, 32)))
    omega = init_flow_decoder(0, 16, (2, 32, 48))
    with pytest.raises(ValueError, match="2 feature frames"):
        decode_flow(omega, np.zeros((1, 4, 6, 16)))


def test_epe_closed_form():
    pred = np.zeros((1, 2, 1, 2))
    target = np.zeros((1, 2, 1, 2))
    target[0, :, 0, 0] = (3.0, 4.0)
    assert epe(pred, target) == 2.5
    with pytest.raises(ValueError):
        epe(np.zeros((3, 1, 1)), np.zeros((3, 1, 1)))
    with pytest.raises(ValueError, match="flow_loss"):
        flow_loss(np.zeros(3), np.zeros(4))


def test_flow_target_frames():
    assert flow_target_frames(9, 3, 2) == [2, 5]
    assert flow_target_frames(9, 3, 2, pair_stride=2) == [1, 2]
    with pytest.raises(ValueError):
        flow_target_frames(6, 3, 2)


def test_stage1_memorizes_a_batch(rng):
    S = rng.standard_normal((2, 3, 4, 6, 32)).astype(np.float32)
    target = np.zeros((2, 2, 2, 32, 48), np.float32)
    target[:, :, 0] = 1.5
    target[:, :, 1] = -0.5
    st = make_stage1_state(init_compressor(0, 32, 8), init_flow_decoder(1, 8, (2, 32, 48), (16, 16, 8)), lr=3e-3)
    first = None
    for _ in range(60):
        st, m = stage1_step(st, (S, target))
        first = first if first is not None else m["loss_flow"]
    assert st.step == 60 and m["loss_flow"] < 0.8 * first


def test_zero_lr_changes_nothing(rng):
    st = make_stage1_state(init_compressor(0, 32, 8), init_flow_decoder(1, 8, (2, 32, 48), (8, 8, 8)), lr=0.0)
    before = [p.data.copy() for p in st.params()]
    S = rng.standard_normal((1, 3, 4, 6, 32)).astype(np.float32)
    st, _ = stage1_step(st, (S, np.ones((1, 2, 2, 32, 48), np.float32)))
    assert all(a.tobytes() == p.data.tobytes() for a, p in zip(before, st.params()))


def test_nonfinite_loss_raises(rng):
    st = make_stage1_state(init_compressor(0, 32, 8), init_flow_decoder(1, 8, (2, 32, 48), (8, 8, 8)))
    S = rng.standard_normal((1, 3, 4, 6, 32)).astype(np.float32)
    with pytest.raises(NonFiniteLoss) as err:
        stage1_step(st, (S, np.full((1, 2, 2, 32, 48), np.nan, np.float32)))
    assert err.value.step == 0


def test_zero_features_give_constant_grid():
    psi = init_compressor(0, 96, 16)
    M = compress(psi, np.zeros((3, 4, 6, 96), np.float32)).data
    np.testing.assert_array_equal(M, np.broadcast_to(M[0, 0, 0], M.shape))


def test_flow_loss_values(rng):
    t = rng.standard_normal((2, 2, 4, 5))
    assert flow_loss(t, t).item() == 0.0
    assert abs(flow_loss(t + 1.0, t).item() - 1.0) < 1e-12
    p = rng.standard_normal(t.shape)
    want = sum(abs(a - b) for a, b in zip(p.ravel(), t.ravel())) / t.size
    assert abs(flow_loss(p, t).item() - want) <= 1e-12
    assert epe(t + np.array([3.0, 4.0])[:, None, None], t) == pytest.approx(5.0, abs=1e-12)


def test_one_small_step_lowers_loss_on_that_clip():
    passed = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        S = rng.standard_normal((1, 3, 4, 6, 32))
        target = rng.uniform(-2, 2, (1, 2, 2, 32, 48))
        psi = init_compressor(seed, 32, 8, dtype=np.float64)
        omega = init_flow_decoder(seed + 1, 8, (2, 32, 48), (8, 8, 8), dtype=np.float64)
        st = make_stage1_state(psi, omega, lr=1e-4)
        st, m = stage1_step(st, (S, target))
        after = flow_loss(decode_flow(st.omega, compress(st.psi, S)), target).item()
        passed += after < m["loss_flow"]
    assert passed >= 18
