import hashlib
import json
import os

import numpy as np
import pytest

from handfit.corr_space import encode, segment_label, segment_pixels
from handfit.hand_model import keypoints, pose_hand
from handfit.raster import rasterize
from handfit.synth import (SCRIPTS, Corruption, Occluder, SceneError, SceneSpec, generate, load_sequence,
                           motion_script, render_frame, render_sequence)


def _digest(directory):
    h = hashlib.sha256()
    for name in sorted(os.listdir(directory)):
        with open(os.path.join(directory, name), "rb") as fh:
            h.update(name.encode() + fh.read())
    return h.hexdigest()


def _first(spec, model):
    return render_frame(spec, model, spec.frame_params(model)[0], 0)


def test_generate_is_byte_reproducible(tmp_path, model):
    spec = SceneSpec(n_frames=3, depth_noise_sigma=0.002, corr_noise_sigma=0.01, seed=7)
    generate(spec, tmp_path / "a", model)
    generate(spec, tmp_path / "b", model)
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    names = sorted(os.listdir(tmp_path / "a"))
    assert names[:3] == ["frame_0000.corr.pfm", "frame_0000.depth.pfm", "frame_0000.mask.pgm"]
    assert "gt.json" in names


def test_parallel_generation_matches_serial(tmp_path, model):
    spec = SceneSpec(n_frames=4, depth_noise_sigma=0.001, seed=3)
    generate(spec, tmp_path / "a", model)
    generate(spec, tmp_path / "b", model, jobs=3)
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def test_ground_truth_file_and_round_trip(tmp_path, model):
    spec = SceneSpec(n_frames=2)
    frames = generate(spec, tmp_path, model)
    gt = json.loads((tmp_path / "gt.json").read_text())
    assert len(gt["frames"]) == 2
    assert np.allclose(gt["frames"][1]["joints"], frames[1].joints)
    loaded = load_sequence(tmp_path)
    assert len(loaded) == 2
    assert np.array_equal(loaded[1].M, frames[1].obs.M)
    assert np.allclose(loaded[1].D, frames[1].obs.D, atol=1e-6)
    assert loaded[0].cam == spec.camera


def test_load_sequence_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_sequence(tmp_path)


def test_clean_render_matches_rasterizer(model):
    spec = SceneSpec(n_frames=2)
    params = spec.frame_params(model)[0]
    fr = render_frame(spec, model, params, 0)
    rb = rasterize(pose_hand(params, model), encode(model).coords, spec.camera)
    assert np.array_equal(fr.obs.M, rb.mask)
    assert np.array_equal(fr.obs.F, rb.corr)
    assert np.array_equal(fr.obs.D, rb.depth)
    assert np.allclose(fr.joints, keypoints(pose_hand(params, model), model))


def test_depth_noise_statistics(model):
    sigma = 0.004
    clean = _first(SceneSpec(n_frames=2), model)
    noisy = _first(SceneSpec(n_frames=2, depth_noise_sigma=sigma, seed=11), model)
    d = (noisy.obs.D - clean.obs.D)[clean.obs.M]
    assert d.size >= 5000
    # two frames' worth of samples to reach 10^4
    noisy2 = render_frame(SceneSpec(n_frames=2, depth_noise_sigma=sigma, seed=12), model,
                          SceneSpec(n_frames=2).frame_params(model)[0], 0)
    d = np.concatenate([d, (noisy2.obs.D - clean.obs.D)[clean.obs.M]])
    assert d.size >= 10_000
    assert abs(d.std() - sigma) < 0.1 * sigma


def test_corr_noise_stays_in_unit_cube(model):
    fr = _first(SceneSpec(n_frames=2, corr_noise_sigma=0.2, seed=1), model)
    assert fr.obs.F.min() >= 0.0 and fr.obs.F.max() <= 1.0
    assert np.all(fr.obs.F[~fr.obs.M] == 0)


def test_finger_occluder_removes_finger(model, space):
    spec = SceneSpec(n_frames=2, occluders=[Occluder(finger="index")])
    fr = _first(spec, model)
    index = np.isin(fr.clean_labels, [segment_label(1, s) for s in range(3)])
    assert index.any()
    assert not (fr.obs.M & index).any()
    assert np.all(fr.obs.D[index] == 0) and np.all(fr.obs.F[index] == 0)
    pix = segment_pixels(fr.obs.F, fr.obs.M, space)
    for s in range(3):
        assert len(pix[segment_label(1, s)]) == 0


def test_rect_occluder_and_frame_selection(model, space):
    spec = SceneSpec(n_frames=2, occluders=[Occluder(rect=(100, 60, 220, 140), frames=[1])])
    frames = render_sequence(spec, model)
    assert frames[0].obs.M[60:140, 100:220].any()
    assert not frames[1].obs.M[60:140, 100:220].any()
    # occluded pixels never reach a segment pixel set
    for pts in segment_pixels(frames[1].obs.F, frames[1].obs.M, space).values():
        if len(pts):
            inside = (pts[:, 0] >= 60) & (pts[:, 0] < 140) & (pts[:, 1] >= 100) & (pts[:, 1] < 220)
            assert not inside.any()


def test_blank_frame(model):
    frames = render_sequence(SceneSpec(n_frames=3, blank_frames=[1]), model)
    assert frames[0].obs.M.any() and frames[2].obs.M.any()
    assert not frames[1].obs.M.any() and not frames[1].obs.D.any()


def test_corruption_shifts_only_its_segment(model):
    clean = _first(SceneSpec(n_frames=2), model)
    bad = _first(SceneSpec(n_frames=2, corruptions=[Corruption(segment=8, hue_shift=0.1)]), model)
    seg = clean.clean_labels == 8
    diff = bad.obs.F - clean.obs.F
    assert np.allclose(diff[~seg], 0)
    assert np.allclose(diff[seg, 1:], 0)
    assert np.allclose(diff[seg, 0], np.minimum(0.1, 1 - clean.obs.F[seg, 0]))


@pytest.mark.parametrize("kwargs", [dict(), dict(rect=(0, 0, 10, 10), finger=1),
                                    dict(rect=(5, 5, 5, 10)), dict(rect=(0, 0, 1)),
                                    dict(finger=7)])
def test_invalid_occluders(kwargs):
    with pytest.raises((SceneError, ValueError)):
        Occluder(**kwargs)


def test_scene_validation():
    with pytest.raises(SceneError):
        SceneSpec(depth_noise_sigma=-1)
    with pytest.raises(SceneError):
        SceneSpec(script="juggling")
    with pytest.raises(SceneError):
        SceneSpec.from_dict({"bogus": 1})
    with pytest.raises(SceneError):
        Corruption(segment=21, hue_shift=0.1)
    spec = SceneSpec(occluders=[{"finger": 2}], corruptions=[{"segment": 3, "hue_shift": 0.2}])
    again = SceneSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
    assert again.to_dict() == spec.to_dict()


def test_motion_script_errors(model):
    with pytest.raises(SceneError):
        motion_script("juggling", 10, model)
    with pytest.raises(SceneError):
        motion_script("hyperextension", 1, model)


@pytest.mark.parametrize("name", SCRIPTS)
def test_scripts_respect_limits(model, name):
    lo, hi = model.joint_limits.T
    for p in motion_script(name, 24, model):
        assert np.all(p.theta >= lo) and np.all(p.theta <= hi)


def test_ball_rotation_holds_pose(model):
    seq = motion_script("ball_rotation", 12, model)
    for p in seq[1:]:
        assert np.array_equal(p.theta, seq[0].theta)
    assert not np.allclose(seq[3].R, seq[0].R)
    # the hand centre stays put while the wrist rolls
    from handfit.hand_model import rodrigues
    from handfit.synth import HAND_CENTRE
    centres = [rodrigues(p.R) @ HAND_CENTRE + p.t for p in seq]
    assert np.allclose(centres, centres[0])


def test_abduction_sweep_period(model):
    n = 30
    seq = motion_script("abduction_adduction", n, model)
    assert np.allclose(seq[0].theta, seq[n // 3].theta)
    assert np.allclose(seq[0].theta, 0)
    i = model.theta_index(1, 0, "abduction")
    assert max(p.theta[i] for p in seq) == pytest.approx(0.3)


def test_hyperextension_sweeps_negative(model):
    seq = motion_script("hyperextension", 30, model)
    i = model.theta_index(2, 0, "flexion")
    vals = [p.theta[i] for p in seq]
    assert min(vals) == pytest.approx(-0.25)
    assert max(vals) <= 0
