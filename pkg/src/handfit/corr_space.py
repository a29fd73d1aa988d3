"""Canonical correspondence space and its discretisation into hand segments.

Each rest-pose vertex gets an HSV-like coordinate:

* hue - angle of the vertex around the wrist origin in the coronal (x-z)
  plane, rescaled so the model's angular extent fills [0, 1];
* saturation - projection onto the axis wrist origin -> fingertip of the
  finger whose hue band the vertex falls in, normalised so the tip is 1;
* value - (n_y + 1) / 2 of the rest-pose normal (front/back of the hand).

Labels: finger ``f`` (0 = thumb .. 4 = pinky), segment ``k`` (0 proximal ..
2 distal) maps to ``1 + 3f + k``; the five wrist regions are ``16 + f``. The
finger segment labels coincide with the bone indices of the kinematic tree.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .hand_model import finger_bones

N_LABELS = 20
LABELS = tuple(range(1, N_LABELS + 1))


def segment_label(finger, segment):
    return 1 + 3 * finger + segment


def wrist_label(finger):
    return 16 + finger


def label_finger(label):
    """Finger index (0..4) a label belongs to."""
    label = np.asarray(label)
    return np.where(label >= 16, label - 16, (label - 1) // 3)


def value_from_normal(normal):
    return (np.asarray(normal, dtype=float)[..., 1] + 1.0) / 2.0


@dataclass(frozen=True, eq=False)
class CorrSpace:
    coords: np.ndarray          # (V, 3) per-vertex (h, s, v)
    angle_range: tuple          # coronal angle (rad) mapped to hue 0 and 1
    root_angles: np.ndarray     # (5,) coronal angle of each finger root
    band_edges: np.ndarray      # (4,) hue boundaries between fingers
    axes: np.ndarray            # (5, 3) unit wrist -> fingertip directions
    lengths: np.ndarray         # (5,) projection of the fingertip on its axis
    thresholds: np.ndarray      # (5, 3) saturation of the three chain joints
    origin: np.ndarray          # wrist origin
    vertex_labels: np.ndarray   # (V,) discretised label of every vertex

    def hue(self, angle):
        lo, hi = self.angle_range
        return (np.asarray(angle) - lo) / (hi - lo)


class CorrSpaceError(ValueError):
    pass


def _coronal_angle(points, origin):
    d = np.asarray(points, dtype=float) - origin
    return np.arctan2(d[..., 2], d[..., 0])


@lru_cache(maxsize=8)
def encode(model):
    """Correspondence coordinates of every vertex of ``model`` (cached per model)."""
    origin = model.rest_joints[0]
    verts = model.vertices
    extent = np.ptp(verts, axis=0)
    if extent[0] <= 1e-9 or extent[2] <= 1e-9:
        raise CorrSpaceError("degenerate model: zero extent in the coronal plane")

    angles = _coronal_angle(verts, origin)
    lo, hi = float(angles.min()), float(angles.max())
    if hi - lo <= 1e-9:
        raise CorrSpaceError("degenerate model: no angular extent")

    roots = np.array([_coronal_angle(model.rest_joints[finger_bones(f)[0]], origin)
                      for f in range(5)])
    if np.any(np.diff(roots) <= 0):
        raise CorrSpaceError("finger roots must be ordered thumb -> pinky by coronal angle")
    root_hue = (roots - lo) / (hi - lo)
    edges = 0.5 * (root_hue[1:] + root_hue[:-1])

    tips = model.vertices[model.tip_vertices()]
    axes = tips - origin
    axes[:, 1] = 0.0  # keep the axes in the coronal plane
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    lengths = np.einsum("ij,ij->i", tips - origin, axes)
    thresholds = np.array([
        [(model.rest_joints[b] - origin) @ axes[f] / lengths[f] for b in finger_bones(f)]
        for f in range(5)
    ])

    hue = (angles - lo) / (hi - lo)
    finger = np.searchsorted(edges, hue, side="right")
    sat = np.einsum("ij,ij->i", verts - origin, axes[finger]) / lengths[finger]
    val = value_from_normal(model.rest_normals)
    coords = np.clip(np.stack([hue, sat, val], axis=1), 0.0, 1.0)

    space = CorrSpace(coords, (lo, hi), roots, edges, axes, lengths, thresholds,
                      np.array(origin, dtype=float), np.zeros(0, dtype=int))
    labels = discretize(coords, space)
    for a in (coords, labels):
        a.setflags(write=False)
    object.__setattr__(space, "vertex_labels", labels)
    return space


def discretize(coord, space):
    """Segment label(s) in 1..20 for correspondence coordinate(s) ``(..., 3)``."""
    coord = np.asarray(coord, dtype=float)
    h, s = coord[..., 0], coord[..., 1]
    finger = np.searchsorted(space.band_edges, h, side="right")
    th = space.thresholds[finger]
    seg = (s >= th[..., 0]).astype(int) + (s >= th[..., 1]) + (s >= th[..., 2])
    return np.where(seg == 0, 16 + finger, 1 + 3 * finger + seg - 1)


def segment_vertices(space):
    """Map label -> sorted vertex indices; the 20 sets partition the vertices."""
    labels = space.vertex_labels
    return {i: np.flatnonzero(labels == i) for i in LABELS}


def segment_pixels(F, M, space):
    """Map label -> (n, 2) array of (row, col) masked pixels with that label."""
    F = np.asarray(F)
    M = np.asarray(M, dtype=bool)
    if F.shape[:2] != M.shape:
        raise ValueError(f"resolution mismatch: F {F.shape[:2]} vs M {M.shape}")
    rows, cols = np.nonzero(M)
    labels = discretize(F[rows, cols], space) if len(rows) else np.zeros(0, dtype=int)
    return {i: np.stack([rows[labels == i], cols[labels == i]], axis=1) for i in LABELS}


def pixel_labels(F, M, space):
    """Label image (0 outside the mask)."""
    M = np.asarray(M, dtype=bool)
    out = np.zeros(M.shape, dtype=int)
    if M.any():
        out[M] = discretize(np.asarray(F)[M], space)
    return out


def skinning_reference_labels(model):
    """Labels from dominant skinning bones (geometric, independent of the space).

    Finger-bone vertices take their bone's label; wrist-bone vertices take the
    wrist region of the finger whose root direction is angularly nearest.
    """
    dominant = np.argmax(model.skinning_weights, axis=1)
    origin = model.rest_joints[0]
    roots = np.array([_coronal_angle(model.rest_joints[finger_bones(f)[0]], origin)
                      for f in range(5)])
    ang = _coronal_angle(model.vertices, origin)
    nearest = np.argmin(np.abs(ang[:, None] - roots[None, :]), axis=1)
    return np.where(dominant == 0, 16 + nearest, dominant)
