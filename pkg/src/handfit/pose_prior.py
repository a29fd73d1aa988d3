"""PCA pose prior over the 23 anatomical angles and its bundled training corpus.

The corpus is synthetic: each sample draws a shared grasp level that drives
correlated flexion of all fingers, plus per-DoF beta-distributed abduction,
twist and flexion jitter, everything inside the joint limits. Regenerate the
bundled file with::

    python -m handfit.pose_prior src/handfit/data/pose_corpus.json
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np

from .hand_model import N_THETA, SLOT_NAMES, load_model

CORPUS_SIZE = 2000
CORPUS_SEED = 20240


@dataclass(frozen=True, eq=False)
class PcaPosePrior:
    mean: np.ndarray       # (23,)
    basis: np.ndarray      # (23, k) orthonormal columns
    variances: np.ndarray  # (k,) non-increasing

    @property
    def k(self):
        return self.basis.shape[1]

    def project(self, theta):
        return (np.asarray(theta, dtype=float) - self.mean) @ self.basis

    def reconstruct(self, coeffs):
        return self.mean + self.basis @ np.asarray(coeffs, dtype=float)


def build_pca_prior(samples, k=12):
    """Principal components of θ samples, by descending variance."""
    X = np.asarray(samples, dtype=float)
    if X.ndim != 2 or X.shape[1] != N_THETA:
        raise ValueError(f"pose samples must have shape (n, {N_THETA}), got {X.shape}")
    if not 1 <= k <= N_THETA:
        raise ValueError(f"k must lie in 1..{N_THETA}")
    if len(X) < k + 1:
        raise ValueError(f"too few samples: {len(X)} for {k} components")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=True)
    var = np.zeros(N_THETA)
    var[:len(s)] = s ** 2 / (len(X) - 1)
    return PcaPosePrior(mean, vt[:k].T.copy(), var[:k])


def generate_pose_corpus(model, n=CORPUS_SIZE, seed=CORPUS_SEED):
    rng = np.random.default_rng(seed)
    lo, hi = model.joint_limits[:, 0], model.joint_limits[:, 1]
    slots = model.theta_slots
    finger = slots // 9
    joint = (slots // 3) % 3
    slot = slots % 3
    flex_gain = np.array([1.0, 1.15, 0.8])  # MCP/PIP/DIP (CMC/MCP/IP for the thumb)

    out = np.zeros((n, N_THETA))
    for i in range(n):
        grasp = rng.beta(1.6, 3.0)
        curl = np.clip(grasp + 0.15 * rng.standard_normal(5), 0.0, 1.0)
        for d in range(N_THETA):
            f, j, s = finger[d], joint[d], slot[d]
            if SLOT_NAMES[s] == "flexion":
                u = np.clip(curl[f] * flex_gain[j] + 0.05 * rng.standard_normal(), 0.0, 1.0)
                val = lo[d] + 0.12 * (hi[d] - lo[d]) + 0.8 * (hi[d] - lo[d]) * u
            else:
                spread = 0.7 if SLOT_NAMES[s] == "abduction" else 0.4
                mid = 0.5 * (lo[d] + hi[d])
                val = mid + spread * (hi[d] - lo[d]) * (rng.beta(4.0, 4.0) - 0.5)
            out[i, d] = np.clip(val, lo[d], hi[d])
    return out


def load_pose_corpus(path=None):
    """θ samples from a JSON array of 23-float arrays (bundled corpus by default)."""
    if path is None:
        text = resources.files("handfit").joinpath("data", "pose_corpus.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    samples = np.asarray(json.loads(text), dtype=float)
    if samples.ndim != 2 or samples.shape[1] != N_THETA:
        raise ValueError(f"pose corpus entries must be {N_THETA}-float arrays")
    return samples


@lru_cache(maxsize=4)
def bundled_prior(k=12):
    return build_pca_prior(load_pose_corpus(), k)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 1:
        print("usage: python -m handfit.pose_prior OUT.json", file=sys.stderr)
        return 2
    corpus = generate_pose_corpus(load_model())
    with open(argv[0], "w") as fh:
        json.dump(np.round(corpus, 6).tolist(), fh, separators=(",", ":"))
        fh.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
