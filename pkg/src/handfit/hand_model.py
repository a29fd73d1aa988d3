"""Parametric skinned hand model.

Pose parameters follow an anatomical layout: every finger joint owns three raw
angle slots (flexion, abduction, twist) expressed in that joint's anatomical
frame, and a boolean mask selects which of the 45 slots are optimisable. The
optimiser only ever sees the 23 enabled slots (``theta``).

Parameter vector layout used by the Jacobians::

    [ R (3, axis-angle) | t (3) | theta (23) | beta (10) ]
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

FINGERS = ("thumb", "index", "middle", "ring", "pinky")
N_BONES = 16
N_JOINTS = 15
N_RAW = 45
N_THETA = 23
N_BETA = 10
N_PARAMS = 3 + 3 + N_THETA + N_BETA
SLOT_NAMES = ("flexion", "abduction", "twist")

SL_R = slice(0, 3)
SL_T = slice(3, 6)
SL_THETA = slice(6, 6 + N_THETA)
SL_BETA = slice(6 + N_THETA, N_PARAMS)

REGRESSOR_NEIGHBOURS = 20


class ModelError(ValueError):
    """Raised when a model file cannot be parsed or violates an invariant."""


def finger_bones(finger):
    """Bone indices (proximal to distal) of finger ``finger`` (0 = thumb)."""
    return [1 + 3 * finger, 2 + 3 * finger, 3 + 3 * finger]


def bundled_model_path():
    return Path(str(resources.files("handfit") / "data" / "simplehand.json"))


# ---------------------------------------------------------------------------
# rotations


def skew(v):
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def rodrigues(r):
    """Rotation matrix of an axis-angle vector."""
    r = np.asarray(r, dtype=float)
    angle = np.linalg.norm(r)
    K = skew(r)
    if angle < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return (
        np.eye(3)
        + np.sin(angle) / angle * K
        + (1.0 - np.cos(angle)) / angle**2 * K @ K
    )


def right_jacobian(r):
    """Right Jacobian of SO(3): d(exp(r) x)/dr = -exp(r) [x]x J_r(r)."""
    r = np.asarray(r, dtype=float)
    angle = np.linalg.norm(r)
    K = skew(r)
    if angle < 1e-6:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    return (
        np.eye(3)
        - (1.0 - np.cos(angle)) / angle**2 * K
        + (angle - np.sin(angle)) / angle**3 * K @ K
    )


def log_rotation(R):
    """Axis-angle vector of a rotation matrix."""
    R = np.asarray(R, dtype=float)
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(cos)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < 1e-8:
        return 0.5 * w
    if np.pi - angle < 1e-6:
        # near pi the antisymmetric part vanishes; take the axis from R + I
        M = (R + np.eye(3)) / 2.0
        axis = M[np.argmax(np.diag(M))]
        axis = axis / np.linalg.norm(axis)
        return angle * axis
    return angle / (2.0 * np.sin(angle)) * w


def _axis_rotation(axis, angle):
    c, s = np.cos(angle), np.sin(angle)
    R = np.eye(3)
    i, j = [(1, 2), (2, 0), (0, 1)][axis]
    R[i, i] = c
    R[j, j] = c
    R[i, j] = -s
    R[j, i] = s
    return R


# ---------------------------------------------------------------------------
# data types


@dataclass(frozen=True, eq=False)
class HandModel:
    vertices: np.ndarray
    triangles: np.ndarray
    skinning_weights: np.ndarray
    parents: np.ndarray
    rest_joints: np.ndarray
    shape_basis: np.ndarray
    joint_axes: np.ndarray
    dof_mask: np.ndarray
    joint_limits: np.ndarray
    joint_regressor: np.ndarray
    side: str = "right"
    name: str = "hand"

    @property
    def n_vertices(self):
        return len(self.vertices)

    def descendants(self, bone):
        """Boolean mask over bones of the subtree rooted at ``bone``."""
        return self._subtrees[bone]

    @property
    def _subtrees(self):
        cached = self.__dict__.get("_subtree_cache")
        if cached is None:
            cached = np.eye(N_BONES, dtype=bool)
            for b in range(N_BONES - 1, 0, -1):
                cached[self.parents[b]] |= cached[b]
            object.__setattr__(self, "_subtree_cache", cached)
        return cached

    @property
    def theta_slots(self):
        """Raw slot index (0..44) of each of the 23 theta entries."""
        return np.flatnonzero(self.dof_mask)

    def theta_index(self, finger, joint, slot):
        """Position inside theta of a (finger, joint-in-chain, slot) DoF."""
        raw = 3 * (3 * finger + joint) + SLOT_NAMES.index(slot)
        hits = np.flatnonzero(self.theta_slots == raw)
        if len(hits) == 0:
            raise KeyError(f"DoF {FINGERS[finger]}/{joint}/{slot} is not enabled")
        return int(hits[0])

    @property
    def rest_normals(self):
        cached = self.__dict__.get("_rest_normals")
        if cached is None:
            cached = vertex_normals(self.vertices, self.triangles)
            cached.setflags(write=False)
            object.__setattr__(self, "_rest_normals", cached)
        return cached

    @property
    def joint_shape_basis(self):
        """(10, 16, 3) joint displacement per unit shape coefficient."""
        cached = self.__dict__.get("_joint_shape_basis")
        if cached is None:
            cached = np.einsum("bv,kvi->kbi", self.joint_regressor, self.shape_basis)
            cached.setflags(write=False)
            object.__setattr__(self, "_joint_shape_basis", cached)
        return cached

    def tip_vertices(self):
        """Index of the fingertip vertex (farthest along its finger) per finger."""
        dominant = np.argmax(self.skinning_weights, axis=1)
        tips = []
        for f in range(5):
            distal = finger_bones(f)[-1]
            direction = self.rest_joints[distal] - self.rest_joints[0]
            direction = direction / np.linalg.norm(direction)
            cand = np.flatnonzero(dominant == distal)
            proj = (self.vertices[cand] - self.rest_joints[0]) @ direction
            tips.append(int(cand[np.argmax(proj)]))
        return np.array(tips)


@dataclass
class PoseParams:
    R: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    theta: np.ndarray = field(default_factory=lambda: np.zeros(N_THETA))
    beta: np.ndarray = field(default_factory=lambda: np.zeros(N_BETA))

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float).reshape(3)
        self.t = np.asarray(self.t, dtype=float).reshape(3)
        self.theta = np.asarray(self.theta, dtype=float).reshape(N_THETA)
        self.beta = np.asarray(self.beta, dtype=float).reshape(N_BETA)

    def to_vector(self):
        return np.concatenate([self.R, self.t, self.theta, self.beta])

    @classmethod
    def from_vector(cls, x):
        x = np.asarray(x, dtype=float)
        return cls(x[SL_R], x[SL_T], x[SL_THETA], x[SL_BETA])

    def copy(self):
        return PoseParams.from_vector(self.to_vector())

    def to_dict(self):
        return {
            "R": self.R.tolist(),
            "t": self.t.tolist(),
            "theta": self.theta.tolist(),
            "beta": self.beta.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["R"], d["t"], d["theta"], d["beta"])

    def is_finite(self):
        return bool(np.all(np.isfinite(self.to_vector())))


@dataclass
class PosedHand:
    vertices: np.ndarray
    joint_positions: np.ndarray
    per_vertex_normals: np.ndarray
    triangles: np.ndarray


# ---------------------------------------------------------------------------
# loading


_REQUIRED_KEYS = (
    "vertices",
    "triangles",
    "skinning_weights",
    "tree_parents",
    "rest_joints",
    "shape_basis",
    "joint_axes",
    "dof_mask",
    "joint_limits",
)


def _array(data, key, shape_tail, dtype=float):
    try:
        arr = np.asarray(data[key], dtype=dtype)
    except (TypeError, ValueError) as exc:
        raise ModelError(f"{key}: not a numeric array ({exc})") from None
    if arr.ndim != len(shape_tail) + 1 or any(
        want is not None and got != want for got, want in zip(arr.shape[1:], shape_tail)
    ):
        raise ModelError(f"{key}: unexpected shape {arr.shape}")
    return arr


def _check_tree(parents):
    if len(parents) != N_BONES:
        raise ModelError(f"kinematic tree must have {N_BONES} bones, got {len(parents)}")
    roots = [b for b, p in enumerate(parents) if p < 0]
    if roots != [0]:
        raise ModelError("kinematic tree must have the wrist (bone 0) as single root")
    for b in range(N_BONES):
        seen = set()
        node = b
        while node >= 0:
            if node in seen:
                raise ModelError("kinematic tree cyclic")
            seen.add(node)
            if node >= N_BONES:
                raise ModelError("kinematic tree references unknown bone")
            node = parents[node]
    for b in range(1, N_BONES):
        if parents[b] >= b:
            # forward kinematics visits bones in index order
            raise ModelError("kinematic tree must list parents before children")
    for f in range(5):
        b1, b2, b3 = finger_bones(f)
        if (parents[b1], parents[b2], parents[b3]) != (0, b1, b2):
            raise ModelError(f"finger {FINGERS[f]} is not a 3-joint chain off the wrist")


def _joint_regressor(vertices, rest_joints):
    """Per-joint averaging weights over the template vertices nearest to it.

    Joints follow the shape blendshapes through this regressor; the wrist row
    stays empty so the root never moves with shape.
    """
    reg = np.zeros((N_BONES, len(vertices)))
    k = min(REGRESSOR_NEIGHBOURS, len(vertices))
    for b in range(1, N_BONES):
        d = np.linalg.norm(vertices - rest_joints[b], axis=1)
        nearest = np.argsort(d, kind="stable")[:k]
        reg[b, nearest] = 1.0 / k
    return reg


def model_from_dict(data):
    """Build and validate a :class:`HandModel` from the JSON dictionary."""
    missing = [k for k in _REQUIRED_KEYS if k not in data]
    if missing:
        raise ModelError(f"missing keys: {', '.join(missing)}")
    if data.get("schema_version", 1) != 1:
        raise ModelError(f"unsupported schema_version {data.get('schema_version')}")

    vertices = _array(data, "vertices", (3,))
    triangles = _array(data, "triangles", (3,), dtype=np.int64)
    weights = _array(data, "skinning_weights", (N_BONES,))
    parents = np.asarray(data["tree_parents"], dtype=np.int64)
    rest_joints = _array(data, "rest_joints", (3,))
    shape = _array(data, "shape_basis", (None, 3))
    axes = _array(data, "joint_axes", (3, 3))
    dof_mask = np.asarray(data["dof_mask"], dtype=bool).reshape(-1)
    limits = _array(data, "joint_limits", (2,))

    nv = len(vertices)
    if nv == 0:
        raise ModelError("model has no vertices")
    if triangles.min() < 0 or triangles.max() >= nv:
        raise ModelError("triangle index out of range")
    if weights.shape[0] != nv:
        raise ModelError("skinning_weights row count differs from vertex count")
    if np.any(weights < 0):
        raise ModelError("skinning weights negative")
    if np.any(np.abs(weights.sum(axis=1) - 1.0) > 1e-6):
        raise ModelError("skinning weights not normalized")
    _check_tree(parents.tolist())
    if rest_joints.shape[0] != N_BONES:
        raise ModelError(f"rest_joints must have {N_BONES} rows")
    if shape.shape[0] != N_BETA or shape.shape[1] != nv:
        raise ModelError(f"shape_basis must be {N_BETA} x {nv} x 3")
    if axes.shape[0] != N_JOINTS:
        raise ModelError(f"joint_axes must have {N_JOINTS} frames")
    for j, A in enumerate(axes):
        if np.abs(A.T @ A - np.eye(3)).max() > 1e-6 or np.linalg.det(A) < 0:
            raise ModelError(f"joint_axes[{j}] is not a proper orthonormal frame")
    if dof_mask.size != N_RAW:
        raise ModelError(f"dof_mask must have {N_RAW} entries")
    if int(dof_mask.sum()) != N_THETA:
        raise ModelError(f"dof_mask must enable exactly {N_THETA} DoF, got {int(dof_mask.sum())}")
    if limits.shape[0] != N_THETA or np.any(limits[:, 0] > limits[:, 1]):
        raise ModelError("joint_limits must be 23 [min, max] pairs with min <= max")
    if not np.all(np.isfinite(vertices)) or not np.all(np.isfinite(shape)):
        raise ModelError("model contains non-finite values")

    # re-orthonormalise the frames so rounding in the file cannot leak into poses
    U, _, Vt = np.linalg.svd(axes)
    axes = U @ Vt

    regressor = _joint_regressor(vertices, rest_joints)
    arrays = [vertices, triangles, weights, parents, rest_joints, shape, axes,
              dof_mask, limits, regressor]
    for a in arrays:
        a.setflags(write=False)
    side = data.get("side", "right")
    if side not in ("right", "left"):
        raise ModelError(f"side must be 'right' or 'left', got {side!r}")
    return HandModel(*arrays, side=side, name=str(data.get("name", "hand")))


def load_model(path=None):
    """Load a model JSON file; ``None`` loads the bundled simple hand."""
    path = bundled_model_path() if path is None else Path(path)
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelError(f"{path}: parse failure at line {exc.lineno} col {exc.colno}: {exc.msg}") from None
    return model_from_dict(data)


# ---------------------------------------------------------------------------
# pose evaluation


def expand_pose(theta, model):
    """Scatter the 23 anatomical angles into the 45 raw slots (others zero)."""
    raw = np.zeros(N_RAW)
    raw[model.dof_mask] = np.asarray(theta, dtype=float)
    return raw


def extract_pose(raw, model):
    return np.asarray(raw, dtype=float)[model.dof_mask]


def clamp_to_limits(theta, model):
    """Return a clamped copy of theta; the input array is left untouched."""
    lo, hi = model.joint_limits[:, 0], model.joint_limits[:, 1]
    return np.clip(np.asarray(theta, dtype=float), lo, hi)


def limit_violation(theta, model):
    """Per-DoF distance outside the joint limits (0 inside)."""
    theta = np.asarray(theta, dtype=float)
    lo, hi = model.joint_limits[:, 0], model.joint_limits[:, 1]
    return np.maximum(lo - theta, 0.0) + np.maximum(theta - hi, 0.0)


def _joint_rotations(theta, model):
    """Local rotations per bone plus the factor matrices needed for derivatives.

    Each joint rotates as Rf @ Ra @ Rt, the three factors being rotations about
    the joint frame's flexion, abduction and twist axes.
    """
    raw = expand_pose(theta, model).reshape(N_JOINTS, 3)
    local = np.tile(np.eye(3), (N_BONES, 1, 1))
    factors = np.zeros((N_JOINTS, 3, 3, 3))
    for j in range(N_JOINTS):
        A = model.joint_axes[j]
        mats = []
        for slot in range(3):
            if raw[j, slot] == 0.0:
                mats.append(np.eye(3))
            else:
                Rk = _axis_rotation(slot, raw[j, slot])
                mats.append(np.eye(3) + A @ (Rk - np.eye(3)) @ A.T)
        factors[j] = mats
        local[j + 1] = mats[0] @ mats[1] @ mats[2]
    return local, factors


@dataclass
class _Forward:
    Rg: np.ndarray
    local_rot: np.ndarray
    factors: np.ndarray
    world_rot: np.ndarray     # per bone, model frame (before global R)
    world_joint: np.ndarray   # per bone, model frame
    shaped_joints: np.ndarray
    shaped_vertices: np.ndarray
    blend_rot: np.ndarray     # per vertex sum_b w_b Rw_b
    blend_trans: np.ndarray   # per vertex sum_b w_b T_b
    local_vertices: np.ndarray


def _forward(params, model, idx=None):
    """Forward kinematics; vertex quantities only for ``idx`` (all when None)."""
    sel = slice(None) if idx is None else idx
    basis = model.shape_basis[:, sel]
    shaped = model.vertices[sel] + np.tensordot(params.beta, basis, axes=1)
    joints = model.rest_joints + np.tensordot(params.beta, model.joint_shape_basis, axes=1)

    local, factors = _joint_rotations(params.theta, model)
    Rw = np.zeros((N_BONES, 3, 3))
    Jw = np.zeros((N_BONES, 3))
    Rw[0] = local[0]
    Jw[0] = joints[0]
    for b in range(1, N_BONES):
        p = model.parents[b]
        Rw[b] = Rw[p] @ local[b]
        Jw[b] = Rw[p] @ (joints[b] - joints[p]) + Jw[p]
    T = Jw - np.einsum("bij,bj->bi", Rw, joints)

    W = model.skinning_weights[sel]
    blend_rot = (W @ Rw.reshape(N_BONES, 9)).reshape(-1, 3, 3)
    blend_trans = W @ T
    local_v = (blend_rot @ shaped[:, :, None])[:, :, 0] + blend_trans
    return _Forward(rodrigues(params.R), local, factors, Rw, Jw, joints, shaped,
                    blend_rot, blend_trans, local_v)


def pose_hand(params, model):
    """Shape, skin and rigidly place the hand."""
    fw = _forward(params, model)
    verts = fw.local_vertices @ fw.Rg.T + params.t
    joints = fw.world_joint @ fw.Rg.T + params.t
    m = np.einsum("vij,vj->vi", fw.blend_rot, model.rest_normals) @ fw.Rg.T
    normals = m / np.linalg.norm(m, axis=1, keepdims=True)
    return PosedHand(verts, joints, normals, model.triangles)


def keypoints(hand, model):
    """21 evaluation keypoints: wrist, 3 joints per finger, then fingertips."""
    tips = hand.vertices[model.tip_vertices()]
    return np.concatenate([hand.joint_positions, tips], axis=0)


def vertex_normals(vertices, triangles):
    """Area-weighted unit vertex normals."""
    v0 = vertices[triangles[:, 0]]
    fn = np.cross(vertices[triangles[:, 1]] - v0, vertices[triangles[:, 2]] - v0)
    acc = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(acc, triangles[:, k], fn)
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    return acc / np.where(norm > 0, norm, 1.0)


# ---------------------------------------------------------------------------
# Jacobians


def _theta_world_axes(fw, model):
    """World-frame (model frame, before global R) rotation axis and pivot bone per theta."""
    slots = model.theta_slots
    axes = np.zeros((N_THETA, 3))
    bones = np.zeros(N_THETA, dtype=int)
    for i, raw in enumerate(slots):
        j, slot = divmod(int(raw), 3)
        b = j + 1
        A = model.joint_axes[j]
        w = A[:, slot]
        F = fw.factors[j]
        if slot >= 1:
            w = F[0] @ w if slot == 1 else F[0] @ F[1] @ w
        axes[i] = fw.world_rot[model.parents[b]] @ w
        bones[i] = b
    return axes, bones


@dataclass
class SubsetJacobian:
    vertices: np.ndarray   # (n, 3) posed positions
    normals: np.ndarray    # (n, 3) posed unit normals
    Jv: np.ndarray         # (n, 3, 39)
    Jn: np.ndarray | None  # (n, 3, 39) when requested


def _jacobians(params, model, idx, normals=False):
    idx = np.asarray(idx, dtype=int)
    fw = _forward(params, model, idx)
    W = model.skinning_weights[idx]
    xs = fw.shaped_vertices
    lv = fw.local_vertices
    Rg = fw.Rg
    n = len(idx)
    sub = model._subtrees.astype(float)  # sub[b, c] = 1 when c is in the subtree of b

    Jv = np.zeros((n, 3, N_PARAMS))
    Jv[:, :, SL_R] = -(Rg @ skew(lv)) @ right_jacobian(params.R)
    Jv[:, :, SL_T] = np.eye(3)

    # per-bone transformed point G_c(x), accumulated over each bone's subtree
    offs = fw.world_joint - np.einsum("bij,bj->bi", fw.world_rot, fw.shaped_joints)
    G = (fw.world_rot.reshape(-1, 3) @ xs.T).T.reshape(n, N_BONES, 3) + offs[None]
    acc = sub @ (W[:, :, None] * G)                  # sum over subtree of w * G
    wsum = W @ sub.T                                   # subtree weight per bone
    axes, bones = _theta_world_axes(fw, model)
    moved = acc[:, bones] - wsum[:, bones, None] * fw.world_joint[bones][None]
    Jv[:, :, SL_THETA] = (np.cross(axes[None], moved) @ Rg.T).transpose(0, 2, 1)

    # shape: joints move through the regressor, vertices through the basis
    dJ = model.joint_shape_basis
    dJw = np.zeros((N_BETA, N_BONES, 3))
    dJw[:, 0] = dJ[:, 0]
    for b in range(1, N_BONES):
        p = model.parents[b]
        dJw[:, b] = dJw[:, p] + (dJ[:, b] - dJ[:, p]) @ fw.world_rot[p].T
    dT = dJw - np.einsum("bij,kbj->kbi", fw.world_rot, dJ)
    d_local = (fw.blend_rot @ model.shape_basis[:, idx].transpose(1, 2, 0)
               + (W @ dT.transpose(1, 0, 2).reshape(N_BONES, -1)).reshape(n, N_BETA, 3).transpose(0, 2, 1))
    Jv[:, :, SL_BETA] = Rg @ d_local

    verts = lv @ Rg.T + params.t
    n0 = model.rest_normals[idx]
    ml = (fw.blend_rot @ n0[:, :, None])[:, :, 0]
    m = ml @ Rg.T
    mnorm = np.linalg.norm(m, axis=1)
    nrm = m / mnorm[:, None]
    if not normals:
        return SubsetJacobian(verts, nrm, Jv, None)

    Jm = np.zeros((n, 3, N_PARAMS))
    Jm[:, :, SL_R] = -(Rg @ skew(ml)) @ right_jacobian(params.R)
    Rn = (fw.world_rot.reshape(-1, 3) @ n0.T).T.reshape(n, N_BONES, 3)
    rot = (sub @ (W[:, :, None] * Rn))[:, bones]
    Jm[:, :, SL_THETA] = (np.cross(axes[None], rot) @ Rg.T).transpose(0, 2, 1)
    proj = (np.eye(3)[None] - nrm[:, :, None] * nrm[:, None, :]) / mnorm[:, None, None]
    Jn = proj @ Jm
    return SubsetJacobian(verts, nrm, Jv, Jn)


def posed_subset(params, model, vertex_subset, normals=False):
    """Posed positions, normals and their parameter Jacobians for a vertex subset."""
    return _jacobians(params, model, vertex_subset, normals)


def pose_jacobian(params, model, vertex_subset):
    """d(posed vertex)/d(parameters) for the selected vertices: shape (n, 3, 39)."""
    return _jacobians(params, model, vertex_subset).Jv


def normal_jacobian(params, model, vertex_subset):
    """d(posed unit normal)/d(parameters) for the selected vertices: shape (n, 3, 39)."""
    return _jacobians(params, model, vertex_subset, normals=True).Jn
