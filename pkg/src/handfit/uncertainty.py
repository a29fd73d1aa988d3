"""Binary per-segment uncertainty flags computed after a fit.

A segment is *unobserved* when too few of its vertices take part in any 3D
correspondence, and *error-prone* when too many of its pixels keep a large
correspondence-image residual or too many of its vertices keep a large depth
gap to their matched points. Unobserved takes precedence.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from .corr_space import LABELS, encode, pixel_labels, segment_vertices
from .hand_model import pose_hand
from .raster import rasterize

REASONS = ("observed-ok", "unobserved", "error-prone-2d", "error-prone-3d")


@dataclass(frozen=True)
class UncertaintyConfig:
    tau_v: float = 0.15
    tau_2d: float = 0.3
    tau_3d: float = 0.3
    eps_2d: float = 0.01    # squared correspondence-space units
    eps_3d: float = 0.015   # metres

    def __post_init__(self):
        for name in ("tau_v", "tau_2d", "tau_3d"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        for name in ("eps_2d", "eps_3d"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown uncertainty keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class SegmentFlag:
    segment_id: int
    u: int
    reason: str
    visibility: float
    r2d: float
    r3d: float


@dataclass(frozen=True)
class UncertaintyReport:
    segments: tuple  # SegmentFlag for labels 1..20

    def flag(self, segment):
        return self.segments[segment - 1].u

    @property
    def uncertain(self):
        return {s.segment_id for s in self.segments if s.u}

    def to_list(self):
        return [asdict(s) for s in self.segments]

    @classmethod
    def from_list(cls, items):
        segs = tuple(SegmentFlag(int(d["segment_id"]), int(d["u"]), str(d["reason"]),
                                 float(d["visibility"]), float(d["r2d"]), float(d["r3d"]))
                     for d in items)
        if [s.segment_id for s in segs] != list(LABELS):
            raise ValueError("uncertainty report must list segments 1..20 in order")
        return cls(segs)


def visibility_ratio(pairs, segment_verts):
    """Fraction of a segment's vertices that appear in at least one pair."""
    segment_verts = np.asarray(segment_verts)
    if len(segment_verts) == 0:
        raise ValueError("empty segment: the model has no vertices with this label")
    if len(pairs) == 0:
        return 0.0
    return float(np.count_nonzero(np.isin(segment_verts, pairs.vertex)) / len(segment_verts))


def vertex_depth_gaps(pairs, vertices):
    """E_z per vertex: mean |p_z - v_z| over the pairs containing it (NaN if none)."""
    n = len(vertices)
    out = np.full(n, np.nan)
    if len(pairs) == 0:
        return out
    gap = np.abs(pairs.p[:, 2] - vertices[pairs.vertex, 2])
    total = np.bincount(pairs.vertex, weights=gap, minlength=n)
    count = np.bincount(pairs.vertex, minlength=n)
    seen = count > 0
    out[seen] = total[seen] / count[seen]
    return out


def pixel_residuals(F, Fv, M, Mv):
    """Squared correspondence difference per pixel on M & Mv; NaN elsewhere."""
    both = np.asarray(M, dtype=bool) & np.asarray(Mv, dtype=bool)
    out = np.full(both.shape, np.nan)
    d = np.asarray(F, dtype=float)[both] - np.asarray(Fv, dtype=float)[both]
    out[both] = np.einsum("ij,ij->i", d, d)
    return out


def error_prone_ratios(pixel_res, vertex_ez, cfg):
    """(r2d, r3d) for one segment.

    ``pixel_res`` holds the residual of every pixel labelled with the segment
    (NaN where the pixel is outside the residual set), ``vertex_ez`` the depth
    gap of every segment vertex (NaN where it has no pair). NaN entries count
    toward the denominators but are never error-prone.
    """
    pixel_res = np.asarray(pixel_res, dtype=float)
    vertex_ez = np.asarray(vertex_ez, dtype=float)
    with np.errstate(invalid="ignore"):
        r2d = np.count_nonzero(pixel_res > cfg.eps_2d) / len(pixel_res) if len(pixel_res) else 0.0
        r3d = np.count_nonzero(vertex_ez > cfg.eps_3d) / len(vertex_ez) if len(vertex_ez) else 0.0
    return float(r2d), float(r3d)


def classify(visibility, r2d, r3d, cfg):
    if visibility < cfg.tau_v:
        return "unobserved"
    if r2d > cfg.tau_2d:
        return "error-prone-2d"
    if r3d > cfg.tau_3d:
        return "error-prone-3d"
    return "observed-ok"


@dataclass
class SegmentEvidence:
    """Threshold-free per-segment fit statistics (index 0 is segment 1)."""

    visibility: np.ndarray
    pixel_res: list
    vertex_ez: list


def gather_evidence(obs, params, pairs, model, hand=None):
    space = encode(model)
    hand = hand or pose_hand(params, model)
    rb = rasterize(hand, space.coords, obs.cam)
    res2d = pixel_residuals(obs.F, rb.corr, obs.M, rb.mask)
    ez = vertex_depth_gaps(pairs, hand.vertices)
    labels = pixel_labels(obs.F, obs.M, space)
    members = segment_vertices(space)
    vis = np.array([visibility_ratio(pairs, members[i]) for i in LABELS])
    return SegmentEvidence(vis, [res2d[labels == i] for i in LABELS],
                           [ez[members[i]] for i in LABELS])


def report_from_evidence(ev, cfg):
    out = []
    for k, i in enumerate(LABELS):
        r2d, r3d = error_prone_ratios(ev.pixel_res[k], ev.vertex_ez[k], cfg)
        reason = classify(ev.visibility[k], r2d, r3d, cfg)
        out.append(SegmentFlag(i, int(reason != "observed-ok"), reason,
                               float(ev.visibility[k]), r2d, r3d))
    return UncertaintyReport(tuple(out))


def assess(obs, params, pairs, model, cfg=None, hand=None):
    """Uncertainty report for a finished fit of ``obs``."""
    return report_from_evidence(gather_evidence(obs, params, pairs, model, hand),
                                cfg or UncertaintyConfig())


def vertex_flags(report, model):
    """Per-vertex 0/1 uncertainty taken from the vertex's segment."""
    u = np.array([0] + [s.u for s in report.segments])
    return u[encode(model).vertex_labels]


def write_ply(path, hand, model, report):
    """ASCII PLY mesh with an ``uncertainty`` vertex property."""
    u = vertex_flags(report, model)
    V, T = hand.vertices, model.triangles
    lines = ["ply", "format ascii 1.0", f"element vertex {len(V)}",
             "property float x", "property float y", "property float z",
             "property uchar uncertainty", f"element face {len(T)}",
             "property list uchar int vertex_indices", "end_header"]
    lines += [f"{x:.6f} {y:.6f} {z:.6f} {int(f)}" for (x, y, z), f in zip(V, u)]
    lines += [f"3 {a} {b} {c}" for a, b, c in T]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def reports_to_json(reports):
    return json.dumps([None if r is None else r.to_list() for r in reports], indent=1)


def reports_from_json(text):
    return [None if r is None else UncertaintyReport.from_list(r) for r in json.loads(text)]

