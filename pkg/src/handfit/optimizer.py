"""Per-frame pose estimation and sequence tracking.

A frame without a usable previous fit is initialized: a rigid wrist fit by
orthogonal Procrustes against the mean pose, then L-BFGS over the wrist and
PCA pose coefficients. Every frame is then refined over all 39 parameters with
damped Gauss-Newton (Levenberg-Marquardt) steps on E_3d + E_reg; a step is
kept only if the full energy (with E_2d and the mask weight) does not rise.
Correspondences are re-matched every ``rematch_every`` iterations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.optimize import minimize

from .energy import (EnergyWeights, image_gradient, mask_lambda, residual_system, subsample_observation,
                     total_energy)
from .hand_model import N_PARAMS, SL_BETA, SL_THETA, PoseParams, pose_hand
from .matching import MatchConfig, match, segment_index
from .pose_prior import bundled_prior
from .raster import jaccard, rasterize

log = logging.getLogger(__name__)


class DegenerateError(ValueError):
    pass


class TrackingLost(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    max_iters: int = 100
    rematch_every: int = 5
    step_tol: float = 1e-5
    lost_e3d_factor: float = 4.0
    lost_e3d_floor: float = 1e-4   # m^2; below this E_3d never counts as a jump
    lost_jaccard: float = 0.3
    min_pairs: int = 50
    pca_components: int = 12
    init_rounds: int = 3
    init_stride: int = 2
    image_gradient: bool = False
    image_step: float = 2e-3

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown optimizer keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# rigid fit


def kabsch(src, dst):
    """Proper rotation R and translation t minimizing sum ||dst - (R src + t)||^2."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if len(src) < 3 or len(src) != len(dst):
        raise DegenerateError("degenerate configuration: need at least 3 point pairs")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    A, B = src - mu_s, dst - mu_d
    for pts in (A, B):
        s = np.linalg.svd(pts, compute_uv=False)
        if s[0] == 0 or s[1] <= 1e-9 * s[0]:
            raise DegenerateError("degenerate configuration: points are collinear")
    U, _, Vt = np.linalg.svd(A.T @ B)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, mu_d - R @ mu_s


def fit_procrustes(pairs, hand_at_rest):
    """Wrist rotation and translation aligning the rest-placed hand to the pairs."""
    return kabsch(hand_at_rest.vertices[pairs.vertex], pairs.p)


# ---------------------------------------------------------------------------
# helpers


@dataclass
class FitInfo:
    iterations: int = 0
    accepted: int = 0
    rematches: int = 0
    status: str = "ok"
    energies: list = field(default_factory=list)


def _current_lambda(params, obs, model, hand=None):
    hand = hand or pose_hand(params, model)
    from .corr_space import encode
    rb = rasterize(hand, encode(model).coords, obs.cam)
    return mask_lambda(jaccard(obs.M, rb.mask))


def _wrist_pairs(pairs):
    wrist = pairs.label >= 16
    if np.count_nonzero(wrist) >= 10:
        return pairs.subset(wrist)
    return pairs


# ---------------------------------------------------------------------------
# initialization


def initialize(obs, model, prior=None, weights=None, match_cfg=None, cfg=None):
    """Cold start: Procrustes wrist fit, then wrist + PCA coefficients by L-BFGS."""
    cfg = cfg or OptimizerConfig()
    weights = weights or EnergyWeights()
    match_cfg = match_cfg or MatchConfig()
    prior = prior or bundled_prior(cfg.pca_components)
    sparse_cfg = MatchConfig(match_cfg.t_d, match_cfg.t_n, match_cfg.t_3d,
                             match_cfg.channel_weights,
                             max(match_cfg.pixel_stride, cfg.init_stride), match_cfg.pixel_offset)
    index = segment_index(model, match_cfg)

    pairs = match(obs, model, sparse_cfg, index=index)
    if len(pairs) < 3:
        raise DegenerateError("degenerate configuration: too few correspondences to initialize")
    mean_params = PoseParams(theta=prior.mean)
    rest = pose_hand(mean_params, model)
    try:
        R, t = fit_procrustes(_wrist_pairs(pairs), rest)
    except DegenerateError:
        R, t = fit_procrustes(pairs, rest)
    from .hand_model import log_rotation
    params = PoseParams(R=log_rotation(R), t=t, theta=prior.mean.copy())

    B = prior.basis
    coeffs = np.zeros(prior.k)
    for round_ in range(cfg.init_rounds):
        if round_ > 0:
            pairs = match(obs, model, sparse_cfg, posed=pose_hand(params, model), index=index)
            if len(pairs) < 3:
                raise DegenerateError("degenerate configuration: correspondences lost during initialization")
        lam = _current_lambda(params, obs, model)

        def fun(z):
            p = PoseParams(R=z[:3], t=z[3:6], theta=prior.reconstruct(z[6:]))
            r, J = residual_system(p, pairs, model, weights, None, lam)
            g = 2.0 * J.T @ r
            gz = np.concatenate([g[:6], B.T @ g[SL_THETA]])
            return float(r @ r), gz

        z0 = np.concatenate([params.R, params.t, coeffs])
        res = minimize(fun, z0, jac=True, method="L-BFGS-B",
                       options={"maxiter": 200, "ftol": 1e-12, "gtol": 1e-12})
        if not np.all(np.isfinite(res.x)):
            raise TrackingLost("non-finite parameters during initialization")
        coeffs = res.x[6:]
        params = PoseParams(R=res.x[:3], t=res.x[3:6], theta=prior.reconstruct(coeffs))
    return params


# ---------------------------------------------------------------------------
# refinement


def refine(init, obs, model, weights=None, prev=None, cfg=None, match_cfg=None, callback=None):
    """Levenberg-Marquardt refinement of all parameters.

    Returns (params, EnergyBreakdown, pairs, FitInfo). The energy is
    non-increasing over accepted steps between re-matches. ``callback(it,
    breakdown)`` is called after every iteration with the current energy.
    """
    cfg = cfg or OptimizerConfig()
    weights = weights or EnergyWeights()
    match_cfg = match_cfg or MatchConfig()
    index = segment_index(model, match_cfg)
    info = FitInfo()
    x = init.to_vector()
    if not np.all(np.isfinite(x)):
        raise TrackingLost("non-finite initial parameters")

    params = PoseParams.from_vector(x)
    pairs = match(obs, model, match_cfg, posed=pose_hand(params, model), index=index)
    current = total_energy(params, obs, pairs, model, weights, prev)
    info.energies.append(current.total)
    if cfg.max_iters <= 0:
        return params, current, pairs, info

    small = subsample_observation(obs) if cfg.image_gradient else None
    mu = 1e-4
    g_img = None
    since_match = 0
    for it in range(cfg.max_iters):
        info.iterations = it + 1
        if since_match >= cfg.rematch_every:
            pairs = match(obs, model, match_cfg, posed=pose_hand(params, model), index=index)
            current = total_energy(params, obs, pairs, model, weights, prev)
            info.rematches += 1
            since_match = 0
            g_img = None
            mu = 1e-4
        since_match += 1
        if not np.isfinite(current.total):
            info.status = "nan"
            raise TrackingLost("energy became non-finite during refinement")

        r, J = residual_system(params, pairs, model, weights, prev, current.lam)
        g = 2.0 * J.T @ r
        if cfg.image_gradient:
            if g_img is None:
                g_img = image_gradient(params, obs, pairs, model, weights,
                                       step=cfg.image_step, small=small)
            g = g + g_img
        H = 2.0 * J.T @ J
        diag = np.maximum(np.diag(H), 1e-12)

        step = None
        while mu < 1e10:
            delta = np.linalg.solve(H + mu * np.diag(diag), -g)
            cand = PoseParams.from_vector(x + delta)
            trial = total_energy(cand, obs, pairs, model, weights, prev)
            if np.isfinite(trial.total) and trial.total <= current.total:
                step = delta
                mu = max(mu / 3.0, 1e-9)
                break
            mu *= 4.0
        if step is None:
            # no descent step for these pairs: re-match once, then stop
            if since_match == 1:
                info.status = "stalled"
                break
            since_match = cfg.rematch_every
            continue
        x = x + step
        params = cand
        current = trial
        info.accepted += 1
        info.energies.append(current.total)
        if callback is not None:
            callback(info.iterations, current)
        if np.max(np.abs(step)) < cfg.step_tol:
            info.status = "converged"
            break
    return params, current, pairs, info


# ---------------------------------------------------------------------------
# tracking


@dataclass
class TrackerState:
    prev_params: PoseParams | None = None
    tracked: bool = False
    frame_index: int = 0
    consecutive_failures: int = 0
    e3d_history: list = field(default_factory=list)


@dataclass
class FrameResult:
    frame: int
    params: PoseParams | None
    energy: object
    status: str            # "tracked", "initialized", "reinitialized" or "lost"
    iterations: int = 0
    n_pairs: int = 0
    error: str = ""
    pairs: object = None
    uncertainty: object = None

    def to_dict(self):
        return {
            "frame": self.frame,
            "status": self.status,
            "params": None if self.params is None else self.params.to_dict(),
            "energy": None if self.energy is None else self.energy.to_dict(),
            "iterations": self.iterations,
            "n_pairs": self.n_pairs,
            "error": self.error,
        }


def _is_lost(energy, n_pairs, state, cfg):
    if n_pairs < cfg.min_pairs:
        return f"only {n_pairs} correspondences"
    if energy.jaccard < cfg.lost_jaccard:
        return f"mask overlap {energy.jaccard:.3f} below {cfg.lost_jaccard}"
    hist = state.e3d_history[-10:]
    jump = cfg.lost_e3d_factor * np.median(hist) if len(hist) >= 3 else np.inf
    if energy.e_3d > max(jump, cfg.lost_e3d_floor):
        return f"e_3d {energy.e_3d:.3g} above {cfg.lost_e3d_factor}x recent median"
    return ""


def fit_frame(obs, model, prior=None, weights=None, cfg=None, match_cfg=None, callback=None):
    """Fit a single frame from scratch: initialize, then refine."""
    init = initialize(obs, model, prior, weights, match_cfg, cfg)
    return refine(init, obs, model, weights, None, cfg, match_cfg, callback)


def track_frame(obs, model, state, prior=None, weights=None, cfg=None, match_cfg=None,
                callback=None):
    """Fit one frame and update ``state`` in place."""
    cfg = cfg or OptimizerConfig()
    k = state.frame_index
    state.frame_index += 1
    attempts = []
    if state.tracked and state.prev_params is not None:
        attempts.append("tracked")
    attempts.append("reinitialized" if k > 0 else "initialized")

    reason = ""
    for mode in attempts:
        hook = None
        if callback is not None:
            def hook(it, energy, mode=mode):
                callback(k, mode, it, energy)
        try:
            if mode == "tracked":
                params, energy, pairs, info = refine(state.prev_params, obs, model, weights,
                                                     state.prev_params, cfg, match_cfg, hook)
            else:
                params, energy, pairs, info = fit_frame(obs, model, prior, weights, cfg, match_cfg,
                                                        hook)
        except (DegenerateError, TrackingLost, np.linalg.LinAlgError) as exc:
            reason = str(exc)
            continue
        reason = _is_lost(energy, len(pairs), state, cfg)
        if not reason:
            state.prev_params = params
            state.tracked = True
            state.consecutive_failures = 0
            state.e3d_history.append(energy.e_3d)
            return FrameResult(k, params, energy, mode, info.iterations, len(pairs), pairs=pairs)
        log.info("frame %d: %s fit rejected: %s", k, mode, reason)

    state.tracked = False
    state.consecutive_failures += 1
    return FrameResult(k, None, None, "lost", 0, 0, error=reason)


def track(frames, model, prior=None, weights=None, cfg=None, match_cfg=None, assess=None,
          callback=None):
    """Track a sequence of observations.

    ``assess(obs, result)`` may attach uncertainty to each fitted frame;
    ``callback(frame, mode, iteration, breakdown)`` sees every refinement step.
    """
    state = TrackerState()
    results = []
    for obs in frames:
        res = track_frame(obs, model, state, prior, weights, cfg, match_cfg, callback)
        if assess is not None and res.params is not None:
            res.uncertainty = assess(obs, res)
        results.append(res)
    return results
