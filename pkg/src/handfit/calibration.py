"""Constructed suite for choosing the uncertainty thresholds.

Thirty single frames, each fitted from scratch: ten clean, ten with one whole
finger occluded and ten with the hue of one segment shifted onto the
neighbouring finger. A threshold set passes when no clean frame raises a flag,
every segment of an occluded finger is flagged unobserved, and at least 90%
of corruptions are flagged error-prone (on the corrupted segment or on the
segment its pixels were relabelled to).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .corr_space import discretize, encode, segment_label
from .hand_model import PoseParams, log_rotation, rodrigues
from .optimizer import DegenerateError, TrackingLost, fit_frame
from .synth import (DORSAL_ROTATION, DORSAL_TRANSLATION, HAND_CENTRE, Corruption, Occluder, SceneSpec,
                    render_frame)
from .uncertainty import UncertaintyConfig, gather_evidence, report_from_evidence

KINDS = ("clean", "occluded", "corrupted")
MIN_CORRUPTION_DETECTION = 0.9

THRESHOLD_GRID = {
    "tau_v": (0.02, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.4),
    "tau_2d": (0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6),
    "tau_3d": (0.05, 0.1, 0.2, 0.3, 0.5, 0.8),
    "eps_2d": (0.001, 0.003, 0.01, 0.02, 0.04, 0.08),
    "eps_3d": (0.002, 0.005, 0.01, 0.015, 0.03, 0.05),
}


@dataclass
class CalibrationCase:
    kind: str
    index: int
    spec: SceneSpec
    params: PoseParams
    targets: tuple = ()        # segments expected to be flagged
    receivers: tuple = ()      # corruption only: labels the shifted pixels fall into


def _suite_pose(model, j, n):
    """Abduction spread and camera-axis roll that vary with ``j``."""
    w = j / max(n - 1, 1)
    theta = np.zeros(23)
    for f, slot, a in ((1, "abduction", 0.3), (3, "abduction", -0.25), (4, "abduction", -0.3),
                       (0, "abduction", 0.4)):
        theta[model.theta_index(f, 0, slot)] = a * w
    for f in range(1, 5):
        theta[model.theta_index(f, 0, "flexion")] = 0.15 * np.sin(1.3 * j + f)
    roll = 0.3 * np.sin(1.7 * j)
    R = rodrigues(np.array([0.0, 0.0, roll])) @ DORSAL_ROTATION
    centre = DORSAL_ROTATION @ HAND_CENTRE + DORSAL_TRANSLATION
    return PoseParams(R=log_rotation(R), t=centre - R @ HAND_CENTRE, theta=theta)


def _neighbour(f):
    return f + 1 if f < 4 else 3


def build_suite(model, n_per_kind=10):
    space = encode(model)
    root_hue = space.hue(space.root_angles)
    cases = []
    for j in range(n_per_kind):
        params = _suite_pose(model, j, n_per_kind)
        cases.append(CalibrationCase("clean", j, SceneSpec(params=[params]), params))

        f = j % 5
        occ = SceneSpec(params=[params], occluders=[Occluder(finger=f)])
        cases.append(CalibrationCase("occluded", j, occ, params,
                                     tuple(segment_label(f, s) for s in range(3))))

        seg = segment_label(f, j % 3)
        shift = float(root_hue[_neighbour(f)] - root_hue[f])
        cor = SceneSpec(params=[params], corruptions=[Corruption(seg, shift)])
        cases.append(CalibrationCase("corrupted", j, cor, params, (seg,)))
    return cases


@dataclass
class CaseEvidence:
    case: CalibrationCase
    evidence: object          # SegmentEvidence, None when the fit failed
    receivers: tuple
    error: str = ""


def collect_evidence(cases, model, weights=None, cfg=None, match_cfg=None, progress=None,
                     fitter=None):
    """Render and fit every case; keeps threshold-free statistics.

    ``fitter(case, obs) -> (params, pairs)`` replaces the cold fit when given.
    """
    space = encode(model)
    if fitter is None:
        def fitter(case, obs):
            params, _, pairs, _ = fit_frame(obs, model, None, weights, cfg, match_cfg)
            return params, pairs
    out = []
    for case in cases:
        frame = render_frame(case.spec, model, case.params, 0)
        receivers = ()
        if case.kind == "corrupted":
            seg = case.targets[0]
            sel = frame.clean_labels == seg
            shifted = frame.obs.F[sel]
            labels = discretize(shifted, space)
            receivers = tuple(sorted(set(int(v) for v in labels) - {seg}))
        try:
            params, pairs = fitter(case, frame.obs)
            ev = gather_evidence(frame.obs, params, pairs, model)
            out.append(CaseEvidence(case, ev, receivers))
        except (DegenerateError, TrackingLost) as exc:
            out.append(CaseEvidence(case, None, receivers, str(exc)))
        if progress:
            progress(case)
    return out


def score(evidence, cfg):
    """Flag rates of one threshold set over the suite."""
    clean_fp = 0
    clean_frames = 0
    occ_hit = occ_total = 0
    cor_hit = cor_total = 0
    for ce in evidence:
        kind = ce.case.kind
        if ce.evidence is None:
            # a failed fit counts against the thresholds
            clean_fp += kind == "clean"
            occ_total += len(ce.case.targets) if kind == "occluded" else 0
            cor_total += kind == "corrupted"
            continue
        rep = report_from_evidence(ce.evidence, cfg)
        if kind == "clean":
            clean_frames += 1
            clean_fp += len(rep.uncertain)
        elif kind == "occluded":
            for s in ce.case.targets:
                occ_total += 1
                occ_hit += rep.segments[s - 1].reason == "unobserved"
        else:
            cor_total += 1
            candidates = ce.case.targets + ce.receivers
            cor_hit += any(rep.segments[s - 1].reason.startswith("error-prone") for s in candidates)
    occ_rate = occ_hit / occ_total if occ_total else 1.0
    cor_rate = cor_hit / cor_total if cor_total else 1.0
    return {
        "clean_false_positives": int(clean_fp),
        "occluded_detection": occ_rate,
        "corrupted_detection": cor_rate,
        "passed": bool(clean_fp == 0 and occ_rate == 1.0 and cor_rate >= MIN_CORRUPTION_DETECTION),
    }


def feasible_ranges(evidence, base=None, grid=None):
    """For each threshold, the grid values that pass with the others held at ``base``."""
    base = base or UncertaintyConfig()
    grid = grid or THRESHOLD_GRID
    out = {}
    for name, values in grid.items():
        ok = []
        for v in values:
            try:
                cfg = replace(base, **{name: v})
            except ValueError:
                continue
            if score(evidence, cfg)["passed"]:
                ok.append(v)
        out[name] = ok
    return out


def calibration_report(evidence, base=None, grid=None):
    base = base or UncertaintyConfig()
    return {
        "config": {k: getattr(base, k) for k in THRESHOLD_GRID},
        "score": score(evidence, base),
        "feasible": feasible_ranges(evidence, base, grid),
        "failed_fits": [f"{ce.case.kind}#{ce.case.index}: {ce.error}"
                        for ce in evidence if ce.evidence is None],
    }
