import numpy as np
import pytest
from hypothesis import given, strategies as st

from handfit.corr_space import (CorrSpaceError, LABELS, discretize, encode, label_finger,
                                pixel_labels, segment_pixels, segment_vertices,
                                skinning_reference_labels, wrist_label)
from handfit.hand_model import PoseParams, finger_bones, load_model, pose_hand
from handfit.raster import DEFAULT_CAMERA, rasterize

from conftest import dorsal_params


def test_channels_in_unit_cube(space):
    assert space.coords.min() >= 0 and space.coords.max() <= 1


def test_endpoint_examples(model, space):
    tip = model.tip_vertices()[2]
    assert space.coords[tip, 1] == pytest.approx(1.0)
    assert space.vertex_labels[tip] == 9  # middle distal

    palm = np.flatnonzero(space.vertex_labels >= 16)
    nearest = palm[np.argmin(np.linalg.norm(model.vertices[palm], axis=1))]
    assert space.coords[nearest, 1] < 0.05

    up = np.flatnonzero(model.rest_normals[:, 1] > 1 - 1e-12)
    assert len(up) and np.allclose(space.coords[up, 2], 1.0)


def test_encode_is_cached_and_deterministic(model):
    a = encode(model)
    assert encode(model) is a
    fresh = load_model()
    assert np.array_equal(encode(fresh).coords, a.coords)


def test_degenerate_model_rejected(model):
    import dataclasses
    flat = dataclasses.replace(model, vertices=np.zeros_like(model.vertices))
    with pytest.raises(CorrSpaceError):
        encode(flat)


def test_low_saturation_thumb_hue_is_thumb_wrist(space):
    coord = np.array([space.band_edges[0] / 2, 0.01, 0.5])
    assert discretize(coord, space) == wrist_label(0) == 16


def test_labels_agree_with_dominant_bone(model, space):
    ref = skinning_reference_labels(model)
    assert np.mean(ref == space.vertex_labels) >= 0.99


@given(st.lists(st.floats(0, 1), min_size=3, max_size=3))
def test_discretize_total(coord):
    space = encode(load_model())
    assert discretize(np.array(coord), space) in LABELS


def test_vertex_sets_partition(model, space):
    sets = segment_vertices(space)
    allv = np.concatenate(list(sets.values()))
    assert len(allv) == model.n_vertices
    assert len(np.unique(allv)) == model.n_vertices
    assert all(len(sets[i]) for i in range(1, 16))


def test_saturation_monotone_along_chain(model, space):
    for f in range(5):
        joints = model.rest_joints[[0, *finger_bones(f)]]
        axis = space.axes[f]
        s = (joints - space.origin) @ axis / space.lengths[f]
        assert np.all(np.diff(s) > 0)
        assert np.all(np.diff(space.thresholds[f]) > 0)


def test_finger_hue_bands_disjoint(model, space):
    owner = np.argmax(model.skinning_weights, axis=1)
    bands = []
    for f in range(5):
        h = space.coords[np.isin(owner, finger_bones(f)), 0]
        bands.append((h.min(), h.max()))
    for (lo0, hi0), (lo1, hi1) in zip(bands[:-1], bands[1:]):
        assert hi0 < lo1


def test_label_finger():
    assert list(label_finger([1, 3, 4, 15, 16, 20])) == [0, 0, 1, 4, 0, 4]


def test_segment_pixels_edge_cases(model, space):
    F = np.zeros((4, 5, 3))
    M = np.zeros((4, 5), dtype=bool)
    assert all(len(v) == 0 for v in segment_pixels(F, M, space).values())
    tip = model.tip_vertices()[1]
    F[2, 3] = space.coords[tip]
    M[2, 3] = True
    sets = segment_pixels(F, M, space)
    nonempty = {k: v for k, v in sets.items() if len(v)}
    assert list(nonempty) == [6]
    assert nonempty[6].tolist() == [[2, 3]]
    with pytest.raises(ValueError):
        segment_pixels(F, np.zeros((3, 5), dtype=bool), space)


def geometric_labels(points, model):
    """Label rest-pose surface points from raw geometry: nearest finger ray by
    angle, then how many of that finger's joints lie behind the point."""
    origin = model.rest_joints[0]
    d = points - origin
    ang = np.arctan2(d[:, 2], d[:, 0])
    roots = np.array([model.rest_joints[finger_bones(f)[0]] - origin for f in range(5)])
    root_ang = np.arctan2(roots[:, 2], roots[:, 0])
    finger = np.argmin(np.abs(ang[:, None] - root_ang[None]), axis=1)
    tips = model.vertices[model.tip_vertices()] - origin
    tips[:, 1] = 0
    axes = tips / np.linalg.norm(tips, axis=1, keepdims=True)
    proj = np.einsum("ij,ij->i", d, axes[finger])
    joints = np.array([[(model.rest_joints[b] - origin) @ axes[f] for b in finger_bones(f)]
                       for f in range(5)])
    seg = (proj[:, None] >= joints[finger]).sum(axis=1)
    return np.where(seg == 0, 16 + finger, 3 * finger + seg)


def test_rendered_pixel_labels_match_geometry(model, space):
    hand = pose_hand(dorsal_params(model, **{"1_0_flexion": 0.5, "3_1_flexion": 0.7}), model)
    rb = rasterize(hand, space.coords, DEFAULT_CAMERA)
    rest_points = rasterize(hand, model.vertices, DEFAULT_CAMERA).corr[rb.mask]
    pix = pixel_labels(rb.corr, rb.mask, space)[rb.mask]
    assert np.mean(geometric_labels(rest_points, model) == pix) >= 0.99
    sets = segment_pixels(rb.corr, rb.mask, space)
    assert sum(len(v) for v in sets.values()) == rb.mask.sum()
