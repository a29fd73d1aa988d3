import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from handfit.corr_space import discretize, label_finger
from handfit.hand_model import pose_hand
from handfit.matching import MatchConfig, Observation, match, median_hand_depth, segment_index
from handfit.raster import DEFAULT_CAMERA, rasterize

from conftest import dorsal_params


@pytest.fixture(scope="module")
def scene(model, space):
    hand = pose_hand(dorsal_params(model, **{"1_0_flexion": 0.6, "0_0_flexion": 0.4}), model)
    rb = rasterize(hand, space.coords, DEFAULT_CAMERA)
    return hand, Observation(rb.corr, rb.mask, rb.depth, DEFAULT_CAMERA)


def test_config_validation():
    with pytest.raises(ValueError):
        MatchConfig(t_d=0)
    with pytest.raises(ValueError):
        MatchConfig(pixel_stride=0)


def test_median_examples():
    D = np.array([[0.4, 0.5, 0.6, 9.0]])
    M = np.array([[True, True, True, False]])
    assert median_hand_depth(D, M) == 0.5
    assert median_hand_depth(np.array([[0.4, 0.6]]), np.ones((1, 2), bool)) == 0.4
    with pytest.raises(ValueError):
        median_hand_depth(D, np.zeros_like(M))


def test_observation_resolution_checked():
    with pytest.raises(ValueError):
        Observation(np.zeros((4, 4, 3)), np.zeros((4, 4)), np.zeros((4, 5)), DEFAULT_CAMERA)


def test_self_match_accuracy(model, space, scene):
    hand, obs = scene
    pairs = match(obs, model, posed=hand)
    err = np.linalg.norm(pairs.p - hand.vertices[pairs.vertex], axis=1)
    assert err.mean() < 0.005
    u, v, _ = DEFAULT_CAMERA.project(hand.vertices[pairs.vertex])
    px = np.hypot(u - pairs.pixel[:, 0] - 0.5, v - pairs.pixel[:, 1] - 0.5)
    assert np.count_nonzero(px <= 2.0) >= 0.95 * obs.M.sum()


def test_label_consistency_and_brute_force_oracle(model, space, scene):
    _, obs = scene
    pairs = match(obs, model)
    F = obs.F[pairs.pixel[:, 1], pairs.pixel[:, 0]]
    assert np.array_equal(discretize(F, space), pairs.label)
    assert np.array_equal(space.vertex_labels[pairs.vertex], pairs.label)
    rng = np.random.default_rng(0)
    for i in rng.choice(len(pairs), 200, replace=False):
        cand = np.flatnonzero(space.vertex_labels == pairs.label[i])
        d = np.linalg.norm(space.coords[cand] - F[i], axis=1)
        assert cand[np.argmin(d)] == pairs.vertex[i]  # argmin picks the lowest index on ties


def test_segment_gate_overrides_global_nn(model, space):
    # push middle-finger coordinates just across the index band edge and keep
    # those whose global nearest vertex is still on the middle finger
    edge = space.band_edges[1]
    idx = segment_index(model)
    found = 0
    for v in np.flatnonzero(np.isin(space.vertex_labels, [7, 8, 9, 18])):
        coord = space.coords[v].copy()
        coord[0] = edge - 1e-4
        lab = discretize(coord, space)
        glob = np.argmin(np.linalg.norm(space.coords - coord, axis=1))
        if label_finger(lab) != 1 or label_finger(space.vertex_labels[glob]) != 2:
            continue
        got = idx.nearest(coord[None], np.array([lab]))[0]
        assert space.vertex_labels[got] == lab
        found += 1
    assert found > 0


def test_depth_filter_rejects_bleed(model, scene):
    hand, obs = scene
    D = obs.D.copy()
    rows, cols = np.nonzero(obs.M)
    rng = np.random.default_rng(1)
    bleed = rng.choice(len(rows), len(rows) // 10, replace=False)
    D[rows[bleed], cols[bleed]] = 1.5
    noisy = Observation(obs.F, obs.M, D, obs.cam)
    assert median_hand_depth(D, obs.M) == pytest.approx(0.4, abs=0.05)
    pairs = match(noisy, model)
    assert not np.any(pairs.p[:, 2] > 1.0)


def test_normal_filter(model, scene):
    _, obs = scene
    loose = match(obs, model, MatchConfig(t_n=np.deg2rad(89.9)))
    tight = match(obs, model, MatchConfig(t_n=np.deg2rad(20)))
    assert len(tight) < len(loose)


def test_three_d_filter(model, scene):
    hand, obs = scene
    shifted = pose_hand(dorsal_params(model, **{"1_0_flexion": 0.6, "0_0_flexion": 0.4}), model)
    shifted.vertices = shifted.vertices + [0.0, 0.0, 0.03]
    assert len(match(obs, model, MatchConfig(t_3d=0.02), posed=shifted)) == 0
    assert len(match(obs, model, MatchConfig(t_3d=0.5), posed=shifted)) > 0


@settings(max_examples=10, deadline=None)
@given(st.floats(0.005, 0.2), st.floats(0.2, 1.5), st.floats(0.002, 0.05), st.floats(0.3, 1.0))
def test_shrinking_thresholds_never_adds_pairs(t_d, t_n, t_3d, shrink):
    from conftest import dorsal_params as dp
    from handfit.corr_space import encode
    from handfit.hand_model import load_model
    m = load_model()
    hand = pose_hand(dp(m, **{"2_0_flexion": 0.4}), m)
    rb = rasterize(hand, encode(m).coords, DEFAULT_CAMERA)
    obs = Observation(rb.corr, rb.mask, rb.depth, DEFAULT_CAMERA)
    base = len(match(obs, m, MatchConfig(t_d, t_n, t_3d), posed=hand))
    for cfg in (MatchConfig(t_d * shrink, t_n, t_3d), MatchConfig(t_d, t_n * shrink, t_3d),
                MatchConfig(t_d, t_n, t_3d * shrink)):
        assert len(match(obs, m, cfg, posed=hand)) <= base


def test_deterministic_and_empty(model, scene):
    hand, obs = scene
    a, b = match(obs, model), match(obs, model)
    assert np.array_equal(a.vertex, b.vertex) and np.array_equal(a.p, b.p)
    empty = Observation(obs.F, np.zeros_like(obs.M), obs.D, obs.cam)
    assert len(match(empty, model)) == 0


def test_stride_and_offset(model, scene):
    _, obs = scene
    full = match(obs, model)
    sub = match(obs, model, MatchConfig(pixel_stride=2))
    assert 0 < len(sub) < len(full)
    assert np.all(sub.pixel % 2 == 0)
    shifted = match(obs, model, MatchConfig(pixel_offset=(3, 0)))
    assert len(shifted) != len(full) or not np.array_equal(shifted.p, full.p)
