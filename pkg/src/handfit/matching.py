"""Per-segment nearest-neighbour matching of observed pixels to model vertices.

Every masked pixel is labelled by discretising its predicted correspondence
value; it may only match vertices carrying the same label. Three filters drop
unreliable pairs: depth far from the hand's median depth, surface normals
nearly perpendicular to the view ray, and 3D pairs farther apart than a
distance threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree

from .corr_space import LABELS, discretize, encode, segment_vertices
from .raster import Camera, backproject_all, depth_normals


@dataclass(frozen=True)
class MatchConfig:
    t_d: float = 0.10
    t_n: float = float(np.deg2rad(75.0))
    t_3d: float = 0.05
    channel_weights: tuple = (1.0, 1.0, 1.0)
    pixel_stride: int = 1
    pixel_offset: tuple = (0, 0)  # (dx, dy) shift from corr raster into depth raster

    def __post_init__(self):
        for name in ("t_d", "t_n", "t_3d"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if int(self.pixel_stride) < 1:
            raise ValueError("pixel_stride must be >= 1")
        if len(self.channel_weights) != 3 or min(self.channel_weights) <= 0:
            raise ValueError("channel_weights needs three positive entries")


@dataclass
class Observation:
    """One frame: predicted correspondences F, hand mask M, depth D (metres)."""

    F: np.ndarray
    M: np.ndarray
    D: np.ndarray
    cam: Camera

    def __post_init__(self):
        self.F = np.asarray(self.F, dtype=float)
        self.M = np.asarray(self.M, dtype=bool)
        self.D = np.asarray(self.D, dtype=float)
        if not (self.F.shape[:2] == self.M.shape == self.D.shape == self.cam.shape):
            raise ValueError(
                f"resolution mismatch: F {self.F.shape[:2]}, M {self.M.shape}, "
                f"D {self.D.shape}, camera {self.cam.shape}")


@dataclass(frozen=True)
class CorrPair:
    p: np.ndarray
    v: int
    pixel: tuple
    label: int


@dataclass
class CorrSet3D:
    p: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    vertex: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    pixel: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=int))  # (x, y)
    label: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __len__(self):
        return len(self.vertex)

    def __iter__(self):
        for i in range(len(self)):
            yield CorrPair(self.p[i], int(self.vertex[i]), tuple(self.pixel[i]), int(self.label[i]))

    def subset(self, keep):
        return CorrSet3D(self.p[keep], self.vertex[keep], self.pixel[keep], self.label[keep])


class SegmentIndex:
    """Immutable per-label k-d trees over the correspondence coordinates."""

    def __init__(self, space, channel_weights=(1.0, 1.0, 1.0)):
        self.space = space
        self.weights = np.asarray(channel_weights, dtype=float)
        self.members = segment_vertices(space)
        self.trees = {}
        for label, idx in self.members.items():
            if len(idx):
                self.trees[label] = cKDTree(space.coords[idx] * self.weights)

    def nearest(self, coords, labels):
        """Nearest same-label vertex per query; ties go to the lowest vertex index."""
        coords = np.asarray(coords, dtype=float) * self.weights
        out = np.full(len(coords), -1, dtype=int)
        for label in LABELS:
            q = np.flatnonzero(labels == label)
            if len(q) == 0 or label not in self.trees:
                continue
            members = self.members[label]
            k = min(2, len(members))
            d, i = self.trees[label].query(coords[q], k=k)
            if k == 1:
                out[q] = members[i]
                continue
            first, second = members[i[:, 0]], members[i[:, 1]]
            tie = np.abs(d[:, 1] - d[:, 0]) <= 1e-12
            out[q] = np.where(tie, np.minimum(first, second), first)
        return out


@lru_cache(maxsize=8)
def _index_for(model, channel_weights):
    return SegmentIndex(encode(model), channel_weights)


def segment_index(model, cfg=None):
    cfg = cfg or MatchConfig()
    return _index_for(model, tuple(float(w) for w in cfg.channel_weights))


def median_hand_depth(D, M):
    """Median of the masked depths; the lower middle value for even counts."""
    vals = np.sort(np.asarray(D, dtype=float)[np.asarray(M, dtype=bool)])
    if len(vals) == 0:
        raise ValueError("empty mask: no hand depth to take a median of")
    return float(vals[(len(vals) - 1) // 2])


def match(obs, model, cfg=None, posed=None, index=None):
    """Filtered 3D correspondence set between the observation and ``model``.

    When ``posed`` (a PosedHand) is given, pairs farther apart than ``t_3d``
    are dropped; without it that filter is skipped.
    """
    cfg = cfg or MatchConfig()
    index = index or segment_index(model, cfg)
    H, W = obs.M.shape
    dx, dy = (int(o) for o in cfg.pixel_offset)
    stride = int(cfg.pixel_stride)

    rows, cols = np.nonzero(obs.M)
    keep = (rows % stride == 0) & (cols % stride == 0)
    rows, cols = rows[keep], cols[keep]
    dr, dc = rows + dy, cols + dx
    inside = (dr >= 0) & (dr < H) & (dc >= 0) & (dc < W)
    rows, cols, dr, dc = rows[inside], cols[inside], dr[inside], dc[inside]
    depth = obs.D[dr, dc]
    ok = depth > 0
    rows, cols, dr, dc, depth = rows[ok], cols[ok], dr[ok], dc[ok], depth[ok]
    if len(rows) == 0:
        return CorrSet3D()

    depth_mask = np.zeros_like(obs.M)
    depth_mask[dr, dc] = True
    med = median_hand_depth(obs.D, depth_mask)
    ok = np.abs(depth - med) <= cfg.t_d

    P = backproject_all(obs.D, obs.cam)[dr, dc]
    N = depth_normals(obs.D, obs.cam)[dr, dc]
    to_cam = -P / np.linalg.norm(P, axis=1, keepdims=True)
    cos = np.einsum("ij,ij->i", N, to_cam)
    has_normal = np.any(N != 0, axis=1)
    ok &= has_normal & (cos >= np.cos(cfg.t_n))

    rows, cols, P = rows[ok], cols[ok], P[ok]
    coords = obs.F[rows, cols]
    labels = discretize(coords, index.space)
    verts = index.nearest(coords, labels)
    found = verts >= 0
    pairs = CorrSet3D(P[found], verts[found], np.stack([cols, rows], axis=1)[found], labels[found])

    if posed is not None and len(pairs):
        dist = np.linalg.norm(pairs.p - posed.vertices[pairs.vertex], axis=1)
        pairs = pairs.subset(dist <= cfg.t_3d)
    return pairs
