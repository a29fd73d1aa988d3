import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from handfit.energy import EnergyBreakdown
from handfit.hand_model import PoseParams, keypoints, log_rotation, pose_hand, rodrigues
from handfit.matching import CorrSet3D
from handfit.optimizer import (DegenerateError, OptimizerConfig, TrackerState, TrackingLost, _is_lost,
                               fit_frame, fit_procrustes, initialize, kabsch, refine, track)
from handfit.pose_prior import build_pca_prior, bundled_prior, generate_pose_corpus, load_pose_corpus
from handfit.synth import SceneSpec, dorsal_pose, render_frame, render_sequence

from conftest import dorsal_params


def _mepe_mm(params, gt, model):
    a = keypoints(pose_hand(params, model), model)
    b = keypoints(pose_hand(gt, model), model)
    return 1000 * np.linalg.norm(a - b, axis=1).mean()


def _obs(model, params):
    return render_frame(SceneSpec(params=[params]), model, params, 0).obs


# -- Procrustes -------------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_kabsch_recovers_rigid_transform(seed):
    rng = np.random.default_rng(seed)
    src = rng.normal(size=(30, 3)) * 0.05
    R = rodrigues(rng.normal(size=3))
    t = rng.normal(size=3) * 0.3
    R_est, t_est = kabsch(src, src @ R.T + t)
    assert np.linalg.norm(R_est - R) < 1e-6
    assert np.linalg.norm(t_est - t) < 1e-6
    assert np.linalg.det(R_est) == pytest.approx(1.0)


def test_kabsch_never_returns_reflection():
    rng = np.random.default_rng(2)
    src = rng.normal(size=(20, 3))
    mirrored = src * np.array([1.0, 1.0, -1.0])
    R, _ = kabsch(src, mirrored)
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_kabsch_degenerate():
    line = np.outer(np.arange(6), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateError, match="degenerate"):
        kabsch(line, line + 1)
    with pytest.raises(DegenerateError):
        kabsch(np.eye(3)[:2], np.eye(3)[:2])


def test_procrustes_on_pairs(model):
    rest = pose_hand(PoseParams(), model)
    idx = np.arange(0, model.n_vertices, 37)
    R = rodrigues(np.array([0.3, -1.0, 0.5]))
    t = np.array([0.01, 0.05, 0.4])
    p = rest.vertices[idx] @ R.T + t
    pairs = CorrSet3D(p, idx, np.zeros((len(idx), 2), int), np.ones(len(idx), int))
    R_est, t_est = fit_procrustes(pairs, rest)
    assert np.allclose(R_est, R, atol=1e-9) and np.allclose(t_est, t, atol=1e-9)


# -- pose prior -------------------------------------------------------------------


def test_bundled_corpus_matches_generator(model):
    assert np.array_equal(np.round(generate_pose_corpus(model), 6), load_pose_corpus())


def test_corpus_within_limits(model):
    lo, hi = model.joint_limits.T
    X = load_pose_corpus()
    assert np.all(X >= lo - 1e-6) and np.all(X <= hi + 1e-6)


def test_pca_properties():
    prior = bundled_prior(12)
    B = prior.basis
    assert B.shape == (23, 12)
    assert np.allclose(B.T @ B, np.eye(12), atol=1e-10)
    assert np.all(np.diff(prior.variances) <= 1e-12)
    c = np.random.default_rng(0).normal(size=12)
    assert np.allclose(prior.project(prior.reconstruct(c)), c)
    X = load_pose_corpus()
    assert np.allclose(prior.mean, X.mean(axis=0))
    # leading variance equals the variance of the projected corpus
    assert prior.variances[0] == pytest.approx(np.var((X - prior.mean) @ B[:, 0], ddof=1))


def test_pca_errors():
    with pytest.raises(ValueError):
        build_pca_prior(np.zeros((50, 22)))
    with pytest.raises(ValueError):
        build_pca_prior(np.zeros((5, 23)), k=12)
    with pytest.raises(ValueError):
        build_pca_prior(np.zeros((50, 23)), k=0)


# -- configuration ----------------------------------------------------------------


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown"):
        OptimizerConfig.from_dict({"max_iter": 3})
    assert OptimizerConfig.from_dict({"max_iters": 3}).max_iters == 3


def test_lost_rules():
    cfg = OptimizerConfig()

    def energy(e3d, jac=0.9):
        return EnergyBreakdown(0.0, e3d, 0.0, 0.0, 0.0, 0.0, 7.0, jac)

    state = TrackerState()
    assert "correspondences" in _is_lost(energy(1e-6), 10, state, cfg)
    assert "overlap" in _is_lost(energy(1e-6, 0.1), 500, state, cfg)
    assert _is_lost(energy(1e-6), 500, state, cfg) == ""
    state.e3d_history = [1e-6] * 5
    assert _is_lost(energy(5e-5), 500, state, cfg) == ""      # a jump, but below the floor
    state.e3d_history = [1e-4] * 5
    assert "e_3d" in _is_lost(energy(5e-4), 500, state, cfg)


# -- fitting ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def mean_pose_frame(model):
    gt = dorsal_pose(bundled_prior(12).mean.copy())
    return _obs(model, gt), gt


def test_initialize_mean_pose(model, mean_pose_frame):
    obs, gt = mean_pose_frame
    init = initialize(obs, model)
    assert _mepe_mm(init, gt, model) < 3.0
    assert np.all(init.beta == 0)


def test_initialize_rejects_empty_frame(model):
    frame = render_sequence(SceneSpec(n_frames=2, blank_frames=[0]), model)[0]
    with pytest.raises(DegenerateError):
        initialize(frame.obs, model)


def test_refine_recovers_perturbation(model):
    gt = dorsal_params(model, **{"1_0_abduction": 0.2, "2_1_flexion": 0.4, "4_0_flexion": 0.3})
    obs = _obs(model, gt)
    rng = np.random.default_rng(5)
    start = gt.copy()
    start.theta = start.theta + rng.normal(size=23) * 0.08
    start.t = start.t + np.array([0.004, -0.003, 0.005])
    start.R = log_rotation(rodrigues(np.array([0.0, 0.05, 0.03])) @ rodrigues(start.R))
    assert _mepe_mm(start, gt, model) > 3.0
    params, energy, pairs, info = refine(start, obs, model)
    assert _mepe_mm(params, gt, model) < 1.0
    assert energy.jaccard > 0.95
    assert info.accepted > 0


def test_refine_energy_non_increasing_without_rematch(model):
    gt = dorsal_params(model, **{"2_0_flexion": 0.3})
    start = gt.copy()
    start.theta = start.theta + 0.05
    start.t = start.t + 0.003
    _, _, _, info = refine(start, _obs(model, gt), model,
                           cfg=OptimizerConfig(rematch_every=1000, max_iters=15))
    assert np.all(np.diff(info.energies) <= 0)


def test_refine_fixed_point(model):
    gt = dorsal_params(model, **{"3_0_abduction": -0.2})
    params, _, _, info = refine(gt, _obs(model, gt), model)
    assert info.iterations <= 10
    assert _mepe_mm(params, gt, model) < 0.5


def test_refine_zero_iterations_returns_init(model):
    gt = dorsal_params(model)
    start = gt.copy()
    start.t = start.t + 0.01
    params, energy, _, info = refine(start, _obs(model, gt), model, cfg=OptimizerConfig(max_iters=0))
    assert np.array_equal(params.to_vector(), start.to_vector())
    assert info.iterations == 0 and np.isfinite(energy.total)


def test_refine_rejects_nan(model):
    gt = dorsal_params(model)
    bad = gt.copy()
    bad.t = np.array([np.nan, 0, 0.4])
    with pytest.raises(TrackingLost):
        refine(bad, _obs(model, gt), model)


def test_fit_frame_cold(model):
    gt = dorsal_params(model, **{"1_0_abduction": 0.25, "4_0_abduction": -0.25})
    params, energy, pairs, _ = fit_frame(_obs(model, gt), model)
    assert _mepe_mm(params, gt, model) < 3.0
    assert len(pairs) > 1000


# -- tracking ---------------------------------------------------------------------


def test_track_constant_sequence(model):
    gt = dorsal_params(model, **{"2_0_flexion": 0.2})
    frames = render_sequence(SceneSpec(params=[gt] * 4), model)
    seen = []
    results = track([f.obs for f in frames], model, callback=lambda *a: seen.append(a))
    assert [r.status for r in results] == ["initialized", "tracked", "tracked", "tracked"]
    for r in results:
        assert _mepe_mm(r.params, gt, model) < 1.0
    assert seen and {a[0] for a in seen} <= {0, 1, 2, 3}
    assert all(isinstance(a[3], EnergyBreakdown) for a in seen)


def test_track_blank_frame_is_lost_then_recovers(model):
    spec = SceneSpec(script="abduction_adduction", n_frames=6, blank_frames=[2])
    frames = render_sequence(spec, model)
    results = track([f.obs for f in frames], model)
    assert results[2].status == "lost" and results[2].params is None
    assert results[2].to_dict()["params"] is None
    assert results[3].status == "reinitialized"
    for k in (0, 1, 3, 4, 5):
        assert _mepe_mm(results[k].params, frames[k].params, model) < 3.0
