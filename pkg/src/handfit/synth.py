"""Synthetic observations: rendered depth, mask and correspondence images.

Stands in for a trained correspondence regressor. Each frame is rendered
cleanly from ground-truth parameters; then correspondence corruptions are
applied (selected by the clean segment labels), then occluders cut pixels out,
then Gaussian noise is added. Noise uses one RNG stream per (seed, frame).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .corr_space import encode, pixel_labels, segment_label
from .hand_model import FINGERS, PoseParams, keypoints, load_model, log_rotation, pose_hand, rodrigues
from .imageio import read_pfm, read_pgm, write_pfm, write_pgm
from .matching import Observation
from .raster import DEFAULT_CAMERA, Camera, rasterize

# back of the hand toward the camera, fingers pointing up in the image
DORSAL_ROTATION = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
DORSAL_TRANSLATION = np.array([0.0, 0.08, 0.40])
HAND_CENTRE = np.array([0.09, 0.0, 0.0])  # model-frame point kept fixed by ball_rotation

SCRIPTS = ("abduction_adduction", "hyperextension", "ball_rotation")


class SceneError(ValueError):
    pass


def dorsal_pose(theta=None, beta=None):
    return PoseParams(R=log_rotation(DORSAL_ROTATION), t=DORSAL_TRANSLATION.copy(),
                      theta=np.zeros(23) if theta is None else theta,
                      beta=np.zeros(10) if beta is None else beta)


def _frames_ok(frames, k):
    return frames is None or k in frames


@dataclass
class Occluder:
    """Either an image rectangle (x0, y0, x1, y1), half-open, or a whole finger."""

    rect: tuple | None = None
    finger: int | None = None
    frames: list | None = None

    def __post_init__(self):
        if (self.rect is None) == (self.finger is None):
            raise SceneError("occluder needs exactly one of rect or finger")
        if self.rect is not None:
            if len(self.rect) != 4:
                raise SceneError("occluder rect must be (x0, y0, x1, y1)")
            x0, y0, x1, y1 = self.rect
            if not (x1 > x0 and y1 > y0):
                raise SceneError(f"invalid occluder rectangle {self.rect}")
        if isinstance(self.finger, str):
            self.finger = FINGERS.index(self.finger)
        if self.finger is not None and not 0 <= self.finger < 5:
            raise SceneError(f"invalid occluder finger {self.finger}")

    def mask(self, labels, k):
        out = np.zeros(labels.shape, dtype=bool)
        if not _frames_ok(self.frames, k):
            return out
        if self.rect is not None:
            x0, y0, x1, y1 = (int(v) for v in self.rect)
            out[max(y0, 0):max(y1, 0), max(x0, 0):max(x1, 0)] = True
        else:
            segs = [segment_label(self.finger, s) for s in range(3)]
            out = np.isin(labels, segs)
        return out

    def to_dict(self):
        return {"rect": None if self.rect is None else list(self.rect),
                "finger": self.finger, "frames": self.frames}


@dataclass
class Corruption:
    """Shift the hue of every pixel of ``segment`` by ``hue_shift``."""

    segment: int
    hue_shift: float
    frames: list | None = None

    def __post_init__(self):
        if not 1 <= int(self.segment) <= 20:
            raise SceneError(f"invalid corruption segment {self.segment}")

    def to_dict(self):
        return {"segment": int(self.segment), "hue_shift": float(self.hue_shift),
                "frames": self.frames}


@dataclass
class SceneSpec:
    model_path: str | None = None
    camera: Camera = DEFAULT_CAMERA
    script: str | None = "abduction_adduction"
    n_frames: int = 20
    params: list | None = None          # explicit per-frame PoseParams (overrides script)
    depth_noise_sigma: float = 0.0
    corr_noise_sigma: float = 0.0
    occluders: list = field(default_factory=list)
    corruptions: list = field(default_factory=list)
    blank_frames: list = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if self.depth_noise_sigma < 0 or self.corr_noise_sigma < 0:
            raise SceneError("noise sigmas must be nonnegative")
        self.occluders = [o if isinstance(o, Occluder) else Occluder(**o) for o in self.occluders]
        self.corruptions = [c if isinstance(c, Corruption) else Corruption(**c)
                            for c in self.corruptions]
        if self.params is None and self.script not in SCRIPTS:
            raise SceneError(f"unknown motion script {self.script!r}")

    def frame_params(self, model):
        if self.params is not None:
            return [p if isinstance(p, PoseParams) else PoseParams.from_dict(p) for p in self.params]
        return motion_script(self.script, self.n_frames, model)

    def to_dict(self):
        return {
            "model_path": self.model_path, "camera": self.camera.to_dict(),
            "script": self.script, "n_frames": self.n_frames,
            "depth_noise_sigma": self.depth_noise_sigma, "corr_noise_sigma": self.corr_noise_sigma,
            "occluders": [o.to_dict() for o in self.occluders],
            "corruptions": [c.to_dict() for c in self.corruptions],
            "blank_frames": list(self.blank_frames), "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "camera" in d and isinstance(d["camera"], dict):
            d["camera"] = Camera.from_dict(d["camera"])
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise SceneError(f"unknown scene keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# motion scripts


def _sweep(n, reps=3):
    k = np.arange(n)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * reps * k / n))


GRASP = {  # (finger, joint, slot) -> angle, a loose grip around a ball
    (0, 0, "abduction"): 0.4, (0, 0, "flexion"): 0.2, (0, 1, "flexion"): 0.2,
    (0, 2, "flexion"): 0.2,
    **{(f, 0, "flexion"): 0.3 for f in range(1, 5)},
    **{(f, 1, "flexion"): 0.35 for f in range(1, 5)},
    **{(f, 2, "flexion"): 0.15 for f in range(1, 5)},
}


def motion_script(name, n_frames, model):
    """Ground-truth parameter sequence for a named motion."""
    if name not in SCRIPTS:
        raise SceneError(f"unknown motion script {name!r}")
    if n_frames < 2:
        raise SceneError("a motion script needs at least 2 frames")
    out = []
    if name == "abduction_adduction":
        amp = {(1, "abduction"): 0.30, (3, "abduction"): -0.25, (4, "abduction"): -0.30,
               (0, "abduction"): 0.40}
        w = _sweep(n_frames)
        for k in range(n_frames):
            theta = np.zeros(23)
            for (f, slot), a in amp.items():
                theta[model.theta_index(f, 0, slot)] = a * w[k]
            out.append(dorsal_pose(theta))
    elif name == "hyperextension":
        w = _sweep(n_frames)
        for k in range(n_frames):
            theta = np.zeros(23)
            for f in range(1, 5):
                theta[model.theta_index(f, 0, "flexion")] = -0.25 * w[k]
            out.append(dorsal_pose(theta))
    else:
        theta = np.zeros(23)
        for (f, j, slot), a in GRASP.items():
            theta[model.theta_index(f, j, slot)] = a
        centre = DORSAL_ROTATION @ HAND_CENTRE + DORSAL_TRANSLATION
        for k in range(n_frames):
            roll = 0.6 * np.sin(2.0 * np.pi * k / n_frames)
            R = rodrigues(np.array([0.0, 0.0, roll])) @ DORSAL_ROTATION
            out.append(PoseParams(R=log_rotation(R), t=centre - R @ HAND_CENTRE, theta=theta.copy()))
    lo, hi = model.joint_limits[:, 0], model.joint_limits[:, 1]
    assert all(np.all((p.theta >= lo) & (p.theta <= hi)) for p in out)
    return out


# ---------------------------------------------------------------------------
# rendering


@dataclass
class SynthFrame:
    obs: Observation
    params: PoseParams
    joints: np.ndarray
    clean_labels: np.ndarray


def render_frame(spec, model, params, k):
    space = encode(model)
    cam = spec.camera
    hand = pose_hand(params, model)
    rb = rasterize(hand, space.coords, cam)
    F, M, D = rb.corr.copy(), rb.mask.copy(), rb.depth.copy()
    labels = pixel_labels(F, M, space)

    for c in spec.corruptions:
        if _frames_ok(c.frames, k):
            sel = labels == int(c.segment)
            F[sel, 0] = np.clip(F[sel, 0] + c.hue_shift, 0.0, 1.0)

    cut = np.zeros_like(M)
    for o in spec.occluders:
        cut |= o.mask(labels, k)
    if k in spec.blank_frames:
        cut[:] = True
    M &= ~cut
    D[~M] = 0.0
    F[~M] = 0.0

    rng = np.random.default_rng([int(spec.seed), int(k)])
    if spec.depth_noise_sigma > 0:
        D[M] += rng.normal(0.0, spec.depth_noise_sigma, np.count_nonzero(M))
        D[M] = np.maximum(D[M], 1e-6)
    if spec.corr_noise_sigma > 0:
        F[M] = np.clip(F[M] + rng.normal(0.0, spec.corr_noise_sigma, (np.count_nonzero(M), 3)), 0, 1)
    return SynthFrame(Observation(F, M, D, cam), params, keypoints(hand, model), labels)


def render_sequence(spec, model=None):
    model = model or load_model(spec.model_path)
    return [render_frame(spec, model, p, k) for k, p in enumerate(spec.frame_params(model))]


def frame_paths(out_dir, k):
    base = os.path.join(out_dir, f"frame_{k:04d}")
    return base + ".depth.pfm", base + ".mask.pgm", base + ".corr.pfm"


def generate(spec, out_dir, model=None, jobs=1):
    """Write frame rasters and ``gt.json`` into ``out_dir``; returns the frames."""
    model = model or load_model(spec.model_path)
    os.makedirs(out_dir, exist_ok=True)
    params = spec.frame_params(model)

    def one(k):
        fr = render_frame(spec, model, params[k], k)
        d, m, c = frame_paths(out_dir, k)
        write_pfm(d, fr.obs.D)
        write_pgm(m, fr.obs.M)
        write_pfm(c, fr.obs.F)
        return fr

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(jobs) as pool:
            frames = list(pool.map(one, range(len(params))))
    else:
        frames = [one(k) for k in range(len(params))]

    gt = {
        "camera": spec.camera.to_dict(),
        "scene": spec.to_dict(),
        "frames": [{"frame": k, "params": fr.params.to_dict(), "joints": fr.joints.tolist()}
                   for k, fr in enumerate(frames)],
    }
    with open(os.path.join(out_dir, "gt.json"), "w") as fh:
        json.dump(gt, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return frames


def load_sequence(in_dir, cam=None):
    """Observations from a directory written by :func:`generate`."""
    if cam is None:
        gt_path = os.path.join(in_dir, "gt.json")
        if os.path.exists(gt_path):
            with open(gt_path) as fh:
                cam = Camera.from_dict(json.load(fh)["camera"])
        else:
            cam = DEFAULT_CAMERA
    frames = []
    k = 0
    while os.path.exists(frame_paths(in_dir, k)[0]):
        d, m, c = frame_paths(in_dir, k)
        frames.append(Observation(read_pfm(c), read_pgm(m), read_pfm(d), cam))
        k += 1
    if not frames:
        raise FileNotFoundError(f"no frame_0000.depth.pfm in {in_dir}")
    return frames
