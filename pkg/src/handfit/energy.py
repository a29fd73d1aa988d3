"""Fitting energy: 3D correspondence term, 2D correspondence-image term and priors.

    E = w_3d * lam * E_3d + w_2d * E_2d + E_shape + E_pose + E_temp,
    lam = exp(J + 1)

with J the Jaccard index between the observed and rendered hand masks. E_3d
blends point-to-point and point-to-plane distances; both data terms are means
over their residual sets so the weights do not depend on image resolution.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .corr_space import encode
from .hand_model import (N_PARAMS, SL_BETA, SL_THETA, PoseParams, limit_violation, pose_hand,
                         posed_subset)
from .raster import jaccard, rasterize

FD_STEP = 1e-4
FD_SUBSAMPLE = 2


@dataclass(frozen=True)
class EnergyWeights:
    w_3d: float = 1.0
    w_2d: float = 1e-3
    w_shape: float = 1e-5
    w_pose: float = 10.0
    w_temp: float = 1e-6
    lambda_pt: float = 0.5

    def __post_init__(self):
        for name in ("w_3d", "w_2d", "w_shape", "w_pose", "w_temp", "lambda_pt"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.lambda_pt > 1:
            raise ValueError("lambda_pt must lie in [0, 1]")


@dataclass
class EnergyBreakdown:
    total: float
    e_3d: float
    e_2d: float
    e_shape: float
    e_pose: float
    e_temp: float
    lam: float
    jaccard: float
    empty_2d: bool = False
    residuals_3d: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    residuals_2d: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    @property
    def e_reg(self):
        return self.e_shape + self.e_pose + self.e_temp

    def to_dict(self):
        return {
            "total": self.total, "e_3d": self.e_3d, "e_2d": self.e_2d,
            "e_shape": self.e_shape, "e_pose": self.e_pose, "e_temp": self.e_temp,
            "lambda": self.lam, "jaccard": self.jaccard, "empty_2d": self.empty_2d,
            "n_pairs": int(len(self.residuals_3d)), "n_pixels_2d": int(len(self.residuals_2d)),
        }


def mask_lambda(J):
    return float(np.exp(J + 1.0))


def e_3d(pairs, hand, lambda_pt=0.5):
    """Mean blended point-to-point / point-to-plane error and per-pair residuals."""
    if len(pairs) == 0:
        return 0.0, np.zeros(0)
    d = pairs.p - hand.vertices[pairs.vertex]
    plane = np.einsum("ij,ij->i", d, hand.per_vertex_normals[pairs.vertex])
    res = lambda_pt * np.einsum("ij,ij->i", d, d) + (1.0 - lambda_pt) * plane ** 2
    return float(res.mean()), res


def e_2d(F, Fv, M, Mv):
    """Mean squared correspondence difference over M & Mv.

    Returns (value, per-pixel residuals, empty) where ``empty`` flags a missing
    intersection, in which case the value is 0.
    """
    F, Fv = np.asarray(F, dtype=float), np.asarray(Fv, dtype=float)
    M, Mv = np.asarray(M, dtype=bool), np.asarray(Mv, dtype=bool)
    if not (F.shape == Fv.shape and F.shape[:2] == M.shape == Mv.shape):
        raise ValueError(f"resolution mismatch: {F.shape}, {Fv.shape}, {M.shape}, {Mv.shape}")
    both = M & Mv
    if not both.any():
        warnings.warn("no pixel lies in both masks; 2D correspondence term set to 0",
                      RuntimeWarning, stacklevel=2)
        return 0.0, np.zeros(0), True
    diff = F[both] - Fv[both]
    res = np.einsum("ij,ij->i", diff, diff)
    return float(res.mean()), res, False


def e_reg(params, prev, weights, model):
    """(E_shape, E_pose, E_temp); E_temp is 0 without a previous frame."""
    e_shape = weights.w_shape * float(params.beta @ params.beta)
    hinge = limit_violation(params.theta, model)
    e_pose = weights.w_pose * float(hinge @ hinge)
    e_temp = 0.0
    if prev is not None:
        d = params.to_vector() - prev.to_vector()
        e_temp = weights.w_temp * float(d @ d)
    return e_shape, e_pose, e_temp


def _render(hand, model, cam):
    return rasterize(hand, encode(model).coords, cam)


def total_energy(params, obs, pairs, model, weights=None, prev=None, lam=None, hand=None):
    """Pose, render and evaluate every term for a fixed correspondence set.

    ``lam`` freezes the mask weight instead of computing it from the render.
    """
    weights = weights or EnergyWeights()
    hand = hand or pose_hand(params, model)
    rb = _render(hand, model, obs.cam)
    J = jaccard(obs.M, rb.mask)
    lam_val = mask_lambda(J) if lam is None else float(lam)
    v3, r3 = e_3d(pairs, hand, weights.lambda_pt)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        v2, r2, empty = e_2d(obs.F, rb.corr, obs.M, rb.mask)
    e_s, e_p, e_t = e_reg(params, prev, weights, model)
    total = weights.w_3d * lam_val * v3 + weights.w_2d * v2 + e_s + e_p + e_t
    return EnergyBreakdown(total, v3, v2, e_s, e_p, e_t, lam_val, J, empty, r3, r2)


def residual_system(params, pairs, model, weights, prev=None, lam=np.e ** 2):
    """Residual vector r and Jacobian dr/dparams with ||r||^2 equal to
    w_3d * lam * E_3d + E_reg at ``params`` (``lam`` held fixed)."""
    n = len(pairs)
    blocks_r, blocks_J = [], []
    if n:
        uniq, inv = np.unique(pairs.vertex, return_inverse=True)
        sj = posed_subset(params, model, uniq, normals=weights.lambda_pt < 1)
        v, nv, Jv = sj.vertices[inv], sj.normals[inv], sj.Jv[inv]
        Jn = None if sj.Jn is None else sj.Jn[inv]
        d = v - pairs.p
        scale = weights.w_3d * lam / n
        if weights.lambda_pt > 0:
            a = np.sqrt(scale * weights.lambda_pt)
            blocks_r.append(a * d.ravel())
            blocks_J.append(a * Jv.reshape(3 * n, N_PARAMS))
        if weights.lambda_pt < 1:
            b = np.sqrt(scale * (1.0 - weights.lambda_pt))
            blocks_r.append(b * np.einsum("ij,ij->i", d, nv))
            blocks_J.append(b * (np.einsum("ij,ijk->ik", nv, Jv) + np.einsum("ij,ijk->ik", d, Jn)))

    x = params.to_vector()
    if weights.w_shape > 0:
        Js = np.zeros((x[SL_BETA].size, N_PARAMS))
        Js[:, SL_BETA] = np.eye(x[SL_BETA].size)
        blocks_r.append(np.sqrt(weights.w_shape) * x[SL_BETA])
        blocks_J.append(np.sqrt(weights.w_shape) * Js)
    if weights.w_pose > 0:
        lo, hi = model.joint_limits[:, 0], model.joint_limits[:, 1]
        theta = x[SL_THETA]
        sign = np.where(theta > hi, 1.0, np.where(theta < lo, -1.0, 0.0))
        Jp = np.zeros((theta.size, N_PARAMS))
        Jp[:, SL_THETA] = np.diag(sign)
        blocks_r.append(np.sqrt(weights.w_pose) * limit_violation(theta, model))
        blocks_J.append(np.sqrt(weights.w_pose) * Jp)
    if weights.w_temp > 0 and prev is not None:
        blocks_r.append(np.sqrt(weights.w_temp) * (x - prev.to_vector()))
        blocks_J.append(np.sqrt(weights.w_temp) * np.eye(N_PARAMS))
    if not blocks_r:
        return np.zeros(0), np.zeros((0, N_PARAMS))
    return np.concatenate(blocks_r), np.concatenate(blocks_J)


def analytic_gradient(params, pairs, model, weights=None, prev=None, lam=np.e ** 2):
    """Gradient of w_3d * lam * E_3d + E_reg with the mask weight frozen."""
    weights = weights or EnergyWeights()
    r, J = residual_system(params, pairs, model, weights, prev, lam)
    return 2.0 * J.T @ r


def subsample_observation(obs, step=FD_SUBSAMPLE):
    from .matching import Observation
    k = int(step)
    return Observation(obs.F[::k, ::k], obs.M[::k, ::k], obs.D[::k, ::k], obs.cam.subsampled(k))


def image_gradient(params, obs, pairs, model, weights=None, step=FD_STEP, small=None):
    """Central-difference gradient of the render-dependent parts,
    w_3d * e_3d * d(lam) + w_2d * d(E_2d), on a subsampled image."""
    weights = weights or EnergyWeights()
    small = small or subsample_observation(obs)
    coords = encode(model).coords
    v3 = e_3d(pairs, pose_hand(params, model), weights.lambda_pt)[0]

    def phi(x):
        hand = pose_hand(PoseParams.from_vector(x), model)
        rb = rasterize(hand, coords, small.cam)
        lam = mask_lambda(jaccard(small.M, rb.mask))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            v2 = e_2d(small.F, rb.corr, small.M, rb.mask)[0]
        return weights.w_3d * v3 * lam + weights.w_2d * v2

    x0 = params.to_vector()
    grad = np.zeros(N_PARAMS)
    for k in range(N_PARAMS):
        xp, xm = x0.copy(), x0.copy()
        xp[k] += step
        xm[k] -= step
        grad[k] = (phi(xp) - phi(xm)) / (2 * step)
    return grad


def energy_gradient(params, obs, pairs, model, weights=None, prev=None, image_terms=True,
                    step=FD_STEP):
    """Gradient of the total energy over the 39 parameters.

    E_3d and E_reg are differentiated analytically with the mask weight at its
    current value; the mask weight and E_2d use central differences. Both are
    piecewise constant at the pixel scale, so steps well below a pixel mostly
    see individual pixels flipping; pass a larger ``step`` for a smoothed slope.
    """
    weights = weights or EnergyWeights()
    hand = pose_hand(params, model)
    lam = mask_lambda(jaccard(obs.M, _render(hand, model, obs.cam).mask))
    grad = analytic_gradient(params, pairs, model, weights, prev, lam)
    if image_terms:
        grad = grad + image_gradient(params, obs, pairs, model, weights, step=step)
    return grad
