"""Keypoint error metrics and finger-abduction assessment.

Abduction angles are measured in the wrist plane, the least-squares plane
through the wrist and the five MCP joints (the thumb's MCP, not its CMC). Each
finger's MCP -> PIP vector (thumb: MCP -> IP) is projected onto the plane and
compared with the projected middle-finger vector. The plane normal points to
the back of a right hand, so positive angles lean toward the thumb; for a left
hand the normal is taken the other way, which makes a mirrored pose read with
the opposite sign.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corr_space import segment_label
from .hand_model import FINGERS, keypoints, pose_hand

WRIST = 0


def mcp_index(finger):
    """Keypoint index of the finger's MCP joint (thumb: the joint after CMC)."""
    return 2 if finger == 0 else 1 + 3 * finger


def pip_index(finger):
    return 3 if finger == 0 else 2 + 3 * finger


def _joint_arrays(pred, gt):
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ValueError(f"joint arrays disagree: {pred.shape} vs {gt.shape}")
    return pred.reshape(-1, 3), gt.reshape(-1, 3)


def mepe(pred_joints, gt_joints):
    """Mean end-point error in millimetres (inputs in metres)."""
    pred, gt = _joint_arrays(pred_joints, gt_joints)
    if len(pred) == 0:
        raise ValueError("no joints to compare")
    return float(np.linalg.norm(pred - gt, axis=1).mean() * 1000.0)


def pck(pred_joints, gt_joints, threshold_mm):
    """Fraction of joint instances with error strictly below ``threshold_mm``."""
    pred, gt = _joint_arrays(pred_joints, gt_joints)
    if len(pred) == 0:
        raise ValueError("no joints to compare")
    err = np.linalg.norm(pred - gt, axis=1) * 1000.0
    return float(np.count_nonzero(err < threshold_mm) / len(err))


def wrist_plane_normal(joints, side="right"):
    joints = np.asarray(joints, dtype=float)
    pts = joints[[WRIST] + [mcp_index(f) for f in range(5)]]
    centred = pts - pts.mean(axis=0)
    _, s, vt = np.linalg.svd(centred)
    if s[0] <= 0 or s[1] <= 1e-9 * s[0]:
        raise ValueError("degenerate wrist plane: MCP joints are collinear")
    n = vt[2]
    across = np.cross(joints[mcp_index(1)] - joints[WRIST], joints[mcp_index(4)] - joints[WRIST])
    sign = -1.0 if side == "right" else 1.0
    if sign * (n @ across) < 0:
        n = -n
    return n


def angles_from_joints(joints, side="right"):
    """Signed abduction angle (degrees) per finger relative to the middle finger."""
    joints = np.asarray(joints, dtype=float)
    n = wrist_plane_normal(joints, side)
    P = np.eye(3) - np.outer(n, n)
    vecs = np.array([P @ (joints[pip_index(f)] - joints[mcp_index(f)]) for f in range(5)])
    ref = vecs[2]
    cross = np.cross(ref[None, :], vecs) @ n
    dot = vecs @ ref
    return np.degrees(np.arctan2(cross, dot))


def abduction_angles(params, model):
    return angles_from_joints(keypoints(pose_hand(params, model), model), model.side)


@dataclass
class AngleTrace:
    """Per-frame, per-finger angles in degrees; invalid entries are NaN."""

    angles: np.ndarray                      # (n_frames, 5)
    frames: list = field(default_factory=list)

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=float).reshape(-1, 5)
        if not self.frames:
            self.frames = list(range(len(self.angles)))

    @property
    def valid(self):
        return np.isfinite(self.angles)

    def __len__(self):
        return len(self.angles)

    def rows(self):
        """(frame, finger name, angle or None, valid) tuples."""
        for k, frame in enumerate(self.frames):
            for f in range(5):
                a = self.angles[k, f]
                yield frame, FINGERS[f], (None if np.isnan(a) else float(a)), bool(np.isfinite(a))


def angle_trace(param_seq, model):
    """Trace over a fitted sequence; frames without parameters are invalid."""
    rows = []
    for p in param_seq:
        rows.append(np.full(5, np.nan) if p is None else abduction_angles(p, model))
    return AngleTrace(np.array(rows).reshape(-1, 5))


def finger_flags(reports):
    """(n_frames, 5) bool: any of the finger's three segments uncertain.
    A missing report (lost frame) counts as uncertain everywhere."""
    out = np.zeros((len(reports), 5), dtype=bool)
    for k, rep in enumerate(reports):
        for f in range(5):
            out[k, f] = rep is None or any(rep.flag(segment_label(f, s)) for s in range(3))
    return out


def filter_by_uncertainty(trace, reports, window=3):
    """Invalidate a finger's angle in every frame of a run of ``window``
    consecutive frames that all flag one of its segments."""
    if len(reports) != len(trace):
        raise ValueError(f"{len(trace)} trace frames but {len(reports)} reports")
    if window < 1:
        raise ValueError("window must be >= 1")
    flags = finger_flags(reports)
    n = len(trace)
    kill = np.zeros_like(flags)
    for s in range(0, n - window + 1):
        run = flags[s:s + window].all(axis=0)
        kill[s:s + window] |= run[None, :]
    angles = trace.angles.copy()
    angles[kill] = np.nan
    return AngleTrace(angles, list(trace.frames))


@dataclass
class VarianceReport:
    fingers: dict     # name -> {"variance", "std", "range", "n_valid"}
    omitted: dict     # name -> reason


def variance_report(trace):
    """Sample variance (deg^2), standard deviation and range over valid frames."""
    fingers, omitted = {}, {}
    for f, name in enumerate(FINGERS):
        vals = trace.angles[:, f]
        vals = vals[np.isfinite(vals)]
        if len(vals) < 2:
            omitted[name] = f"only {len(vals)} valid frame(s)"
            continue
        var = float(np.var(vals, ddof=1))
        fingers[name] = {"variance": var, "std": float(np.sqrt(var)),
                         "range": float(np.ptp(vals)), "n_valid": int(len(vals))}
    return VarianceReport(fingers, omitted)
