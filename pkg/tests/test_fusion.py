import numpy as np
import pytest

from core.errors import ConfigError, DataError
from core.features import VertexFeatureSet
from core.fusion import (
    CanonicalFusion,
    CanonicalState,
    coverage,
    fuse_batch_oracle,
    fuse_frame,
    init_canonical,
    load_state,
    save_state,
)
from core.raster import VisibilityMap
from core.tensorio import write_bundle


def observation(rng, M, L, t=0, p=0.5):
    vis = (rng.uniform(size=M) < p).astype(np.int64)
    rows = rng.normal(size=(M, L)) * vis[:, None]
    return VertexFeatureSet(rows, t), VisibilityMap(vis)


def test_init_is_empty():
    state = init_canonical(5, 3)
    assert state.bank.shape == (5, 3)
    assert state.bank.dtype == np.float32
    assert state.vis_count.dtype == np.int64
    assert not state.observed.any()
    assert coverage(state) == 0.0
    with pytest.raises(ConfigError):
        init_canonical(0, 3)


def test_first_frame_copies_visible_rows():
    rows = np.arange(12, dtype=np.float64).reshape(4, 3)
    vis = VisibilityMap(np.array([1, 0, 1, 0]))
    state = fuse_frame(init_canonical(4, 3), VertexFeatureSet(rows), vis)
    np.testing.assert_array_equal(state.bank[[0, 2]], rows[[0, 2]])
    np.testing.assert_array_equal(state.bank[[1, 3]], 0.0)
    np.testing.assert_array_equal(state.vis_count, [1, 0, 1, 0])
    assert state.frames_fused == 1
    assert coverage(state) == 0.5


def test_running_mean_of_two_frames():
    state = init_canonical(2, 1)
    state = fuse_frame(state, VertexFeatureSet([[2.0], [5.0]]), VisibilityMap(np.array([1, 1])))
    state = fuse_frame(state, VertexFeatureSet([[4.0], [9.0]]), VisibilityMap(np.array([1, 0])))
    np.testing.assert_allclose(state.bank[:, 0], [3.0, 5.0])
    np.testing.assert_array_equal(state.vis_count, [2, 1])


def test_streaming_fusion_matches_the_batch_mean():
    rng = np.random.default_rng(1234)
    for _ in range(300):
        M, L, T = rng.integers(1, 51), rng.integers(1, 9), rng.integers(1, 21)
        obs = [observation(rng, M, L, t, p=rng.uniform(0.05, 0.95)) for t in range(T)]
        state = init_canonical(M, L)
        for s_t, v_t in obs:
            state = fuse_frame(state, s_t, v_t)
        oracle = fuse_batch_oracle(obs)
        np.testing.assert_allclose(state.bank, oracle.bank, rtol=1e-5, atol=1e-6)
        np.testing.assert_array_equal(state.vis_count, oracle.vis_count)


@pytest.mark.parametrize("seed", range(4))
def test_fusion_is_order_independent(seed):
    rng = np.random.default_rng(seed)
    M, L, T = rng.integers(10, 51), rng.integers(1, 9), rng.integers(5, 21)
    obs = [observation(rng, M, L, t) for t in range(T)]
    forward = fuse_batch_oracle(obs)
    for _ in range(10):
        state = init_canonical(M, L)
        for k in rng.permutation(len(obs)):
            state = fuse_frame(state, *obs[k])
        np.testing.assert_allclose(state.bank, forward.bank, rtol=1e-5, atol=1e-6)
        np.testing.assert_array_equal(state.vis_count, forward.vis_count)


def test_unseen_rows_and_counts_never_change():
    rng = np.random.default_rng(2)
    state = fuse_frame(init_canonical(10, 2), *observation(rng, 10, 2, p=1.0))
    before = state.bank.copy()
    after = fuse_frame(state, VertexFeatureSet(rng.normal(size=(10, 2))), VisibilityMap(np.zeros(10, dtype=int)))
    np.testing.assert_array_equal(after.bank, before)
    np.testing.assert_array_equal(after.vis_count, state.vis_count)


def test_fuse_rejects_mismatched_shapes_and_counts():
    state = init_canonical(3, 2)
    with pytest.raises(ConfigError):
        fuse_frame(state, VertexFeatureSet(np.zeros((3, 4))), VisibilityMap(np.ones(3, dtype=int)))
    with pytest.raises(ConfigError):
        fuse_frame(state, VertexFeatureSet(np.zeros((3, 2))), VisibilityMap(np.ones(4, dtype=int)))
    with pytest.raises(DataError):
        fuse_frame(state, VertexFeatureSet(np.zeros((3, 2))), VisibilityMap(np.array([0, 2, 1]), accumulated=True))
    with pytest.raises(ConfigError):
        fuse_batch_oracle([])


def test_state_validation():
    with pytest.raises(DataError):
        CanonicalState(np.zeros((2, 2)), np.array([1, -1]))
    with pytest.raises(ConfigError):
        CanonicalState(np.zeros((2, 2)), np.array([1, 1, 1]))
    with pytest.raises(DataError, match="never observed"):
        CanonicalState(np.array([[1.0, 2.0], [0.0, 0.5]]), np.array([1, 0]))
    assert CanonicalState(np.array([[1.0, 2.0], [0.0, 0.0]]), np.array([1, 0])).observed.tolist() == [True, False]


def test_loading_a_snapshot_with_unseen_nonzero_rows_is_a_data_error(tmp_path):
    bank = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    write_bundle(tmp_path / "bad.cft", {"bank": bank, "vis_count": np.array([2, 0])}, {"frames_fused": 2})
    with pytest.raises(DataError, match="never observed"):
        load_state(tmp_path / "bad.cft")


def test_fusion_wrapper_tracks_a_monotone_coverage_curve():
    rng = np.random.default_rng(5)
    fusion = CanonicalFusion(30, 4)
    for t in range(8):
        fusion.push(*observation(rng, 30, 4, t, p=0.2))
    curve = fusion.coverage_curve
    assert len(curve) == 8
    assert all(b >= a for a, b in zip(curve, curve[1:]))
    acc = fusion.accumulated_visibility()
    assert acc.accumulated
    np.testing.assert_array_equal(acc.values, fusion.snapshot().vis_count)
    assert curve[-1] == pytest.approx(acc.count / 30)


def test_snapshot_survives_a_save_and_load(tmp_path):
    rng = np.random.default_rng(9)
    fusion = CanonicalFusion(12, 3)
    for t in range(3):
        fusion.push(*observation(rng, 12, 3, t))
    state = fusion.snapshot()
    save_state(tmp_path / "canonical.cft", state, {"coverage": fusion.coverage_curve})
    loaded, meta = load_state(tmp_path / "canonical.cft")
    np.testing.assert_array_equal(loaded.bank, state.bank)
    np.testing.assert_array_equal(loaded.vis_count, state.vis_count)
    assert loaded.frames_fused == 3
    assert meta["coverage"] == fusion.coverage_curve


def test_loading_a_missing_snapshot_is_a_data_error(tmp_path):
    with pytest.raises(DataError):
        load_state(tmp_path / "nope.cft")
