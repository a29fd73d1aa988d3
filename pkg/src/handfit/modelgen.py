"""Procedural low-poly right hand in the model-file schema.

The hand lies flat in the x-z (coronal) plane with the wrist joint at the
origin, fingers pointing roughly along +x, the back of the hand facing +y and
the thumb on the -z side. Every finger is a capsule-like tube laid along a ray
from the wrist origin; the palm is a thick fan. Running the module writes the
bundled ``simplehand.json``::

    python -m handfit.modelgen src/handfit/data/simplehand.json
"""

from __future__ import annotations

import json
import sys

import numpy as np

FINGERS = ("thumb", "index", "middle", "ring", "pinky")

# angle (deg) of the finger ray in the coronal plane, joint distances from the
# wrist origin (CMC/MCP, MCP/PIP, IP/DIP), tip distance, tube radius
FINGER_TABLE = {
    "thumb": (-60.0, (0.040, 0.075, 0.105), 0.130, 0.0095),
    "index": (-16.0, (0.085, 0.125, 0.150), 0.172, 0.0085),
    "middle": (0.0, (0.088, 0.133, 0.161), 0.185, 0.0090),
    "ring": (15.0, (0.084, 0.125, 0.151), 0.173, 0.0085),
    "pinky": (30.0, (0.078, 0.110, 0.130), 0.150, 0.0075),
}

N_AROUND = 22
RING_SPACING = 0.0025
BLEND = 0.005
PALM_HALF_THICKNESS = 0.011
PALM_WALL_ROWS = 8
PALM_ANGLES = (-37.0, 38.0)
PALM_INNER_RADIUS = 0.006
N_PALM_ANGLE = 40
N_PALM_RADIUS = 28

# slots per joint: (flexion, abduction, twist); 23 enabled in total
DOF_PATTERN = {
    "thumb": ((1, 1, 0), (1, 1, 1), (1, 0, 0)),
    "index": ((1, 1, 1), (1, 0, 0), (1, 0, 0)),
    "middle": ((1, 1, 0), (1, 0, 0), (1, 0, 0)),
    "ring": ((1, 1, 0), (1, 0, 0), (1, 0, 0)),
    "pinky": ((1, 1, 0), (1, 0, 0), (1, 0, 0)),
}
LIMITS = {
    "finger": ((-0.26, 1.74), (-0.35, 0.35), (-0.30, 0.30)),
    "thumb": ((-0.60, 1.20), (-0.80, 0.80), (-0.50, 0.50)),
}


def _ray(angle_deg):
    a = np.deg2rad(angle_deg)
    return np.array([np.cos(a), 0.0, np.sin(a)])


def _ring_distances(start, joints, tip, radius):
    bounds = [start, *joints, tip - radius]
    out = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        n = max(1, int(round((hi - lo) / RING_SPACING)))
        out.extend(lo + (i + 0.5) * (hi - lo) / n for i in range(n))
    return out


def _finger_tube(angle, joints, tip, radius, start):
    u = _ray(angle)
    up = np.array([0.0, 1.0, 0.0])
    lat = np.cross(u, up)
    psi = 2.0 * np.pi * np.arange(N_AROUND) / N_AROUND
    dirs = np.cos(psi)[:, None] * up + np.sin(psi)[:, None] * lat

    rings = [(d, radius) for d in _ring_distances(start, joints, tip, radius)]
    for a in np.deg2rad([22.5, 45.0, 67.5]):
        rings.append((tip - radius + radius * np.sin(a), radius * np.cos(a)))

    verts = [start * u]  # flat base cap centre
    for d, r in rings:
        verts.extend(d * u + r * dirs)
    verts.append(tip * u)
    verts = np.asarray(verts)

    tris = []
    n_rings = len(rings)
    ring0 = 1
    for k in range(N_AROUND):
        tris.append((0, ring0 + (k + 1) % N_AROUND, ring0 + k))
    for i in range(n_rings - 1):
        a = ring0 + i * N_AROUND
        b = a + N_AROUND
        for k in range(N_AROUND):
            k1 = (k + 1) % N_AROUND
            tris.append((a + k, b + k1, b + k))
            tris.append((a + k, a + k1, b + k1))
    apex = len(verts) - 1
    last = ring0 + (n_rings - 1) * N_AROUND
    for k in range(N_AROUND):
        tris.append((last + k, last + (k + 1) % N_AROUND, apex))
    return verts, np.asarray(tris)


def _palm_edge_radius(angle):
    angles = [FINGER_TABLE[f][0] for f in FINGERS[1:]]
    mcps = [FINGER_TABLE[f][1][0] for f in FINGERS[1:]]
    xs = [PALM_ANGLES[0], *angles, PALM_ANGLES[1]]
    ys = [0.060, *mcps, 0.068]
    return np.interp(angle, xs, ys) - 0.004


def _palm():
    angles = np.linspace(*PALM_ANGLES, N_PALM_ANGLE)
    grid = np.zeros((2, N_PALM_ANGLE, N_PALM_RADIUS, 3))
    for i, a in enumerate(angles):
        radii = np.linspace(PALM_INNER_RADIUS, _palm_edge_radius(a), N_PALM_RADIUS)
        for j, r in enumerate(radii):
            p = r * _ray(a)
            grid[0, i, j] = p + [0.0, PALM_HALF_THICKNESS, 0.0]
            grid[1, i, j] = p - [0.0, PALM_HALF_THICKNESS, 0.0]
    idx = np.arange(grid[..., 0].size).reshape(2, N_PALM_ANGLE, N_PALM_RADIUS)

    tris = []
    for i in range(N_PALM_ANGLE - 1):
        for j in range(N_PALM_RADIUS - 1):
            a, b = idx[0, i, j], idx[0, i + 1, j]
            c, d = idx[0, i + 1, j + 1], idx[0, i, j + 1]
            tris += [(a, b, c), (a, c, d)]
            a, b = idx[1, i, j], idx[1, i + 1, j]
            c, d = idx[1, i + 1, j + 1], idx[1, i, j + 1]
            tris += [(a, c, b), (a, d, c)]

    # boundary loop of the (angle, radius) grid, walked once around; the side
    # wall between the two faces gets intermediate rows of vertices
    loop = [(i, 0) for i in range(N_PALM_ANGLE)]
    loop += [(N_PALM_ANGLE - 1, j) for j in range(1, N_PALM_RADIUS)]
    loop += [(i, N_PALM_RADIUS - 1) for i in range(N_PALM_ANGLE - 2, -1, -1)]
    loop += [(0, j) for j in range(N_PALM_RADIUS - 2, 0, -1)]
    verts = grid.reshape(-1, 3)
    rows = [np.array([idx[0, i, j] for i, j in loop])]
    extra = []
    base = len(verts)
    for r in range(1, PALM_WALL_ROWS):
        y = PALM_HALF_THICKNESS * (1.0 - 2.0 * r / PALM_WALL_ROWS)
        for i, j in loop:
            extra.append(grid[0, i, j] * [1.0, 0.0, 1.0] + [0.0, y, 0.0])
        rows.append(base + np.arange(len(loop)) + (r - 1) * len(loop))
    rows.append(np.array([idx[1, i, j] for i, j in loop]))
    n = len(loop)
    for upper, lower in zip(rows[:-1], rows[1:]):
        for k in range(n):
            k1 = (k + 1) % n
            tris += [(upper[k], lower[k1], upper[k1]), (upper[k], lower[k], lower[k1])]
    return np.concatenate([verts, np.asarray(extra)]), np.asarray(tris)


def _orient_outward(verts, tris):
    """Flip the winding of a closed component if its signed volume is negative."""
    v0, v1, v2 = verts[tris[:, 0]], verts[tris[:, 1]], verts[tris[:, 2]]
    vol = np.einsum("ij,ij->i", v0, np.cross(v1, v2)).sum()
    return tris if vol > 0 else tris[:, ::-1].copy()


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def build_simple_hand():
    """Return the model-file dictionary of the procedural hand."""
    verts, tris, owner = [], [], []
    offset = 0
    pv, pt = _palm()
    pt = _orient_outward(pv, pt)
    verts.append(pv)
    tris.append(pt + offset)
    owner.append(np.full(len(pv), -1))
    offset += len(pv)
    for f, name in enumerate(FINGERS):
        angle, joints, tip, radius = FINGER_TABLE[name]
        start = 0.030 if name == "thumb" else joints[0] - 0.008
        fv, ft = _finger_tube(angle, joints, tip, radius, start)
        ft = _orient_outward(fv, ft)
        verts.append(fv)
        tris.append(ft + offset)
        owner.append(np.full(len(fv), f))
        offset += len(fv)
    verts = np.concatenate(verts)
    tris = np.concatenate(tris)
    owner = np.concatenate(owner)

    rays = np.array([_ray(FINGER_TABLE[f][0]) for f in FINGERS])
    root_angles = np.array([FINGER_TABLE[f][0] for f in FINGERS])
    vert_angles = np.rad2deg(np.arctan2(verts[:, 2], verts[:, 0]))
    nearest = np.argmin(np.abs(vert_angles[:, None] - root_angles[None, :]), axis=1)
    finger = np.where(owner >= 0, owner, nearest)
    dist = np.einsum("ij,ij->i", verts, rays[finger])

    n_bones = 16
    weights = np.zeros((len(verts), n_bones))
    joint_d = np.array([FINGER_TABLE[f][1] for f in FINGERS])
    for v in range(len(verts)):
        f = finger[v]
        t = [_smoothstep((dist[v] - j + BLEND) / (2 * BLEND)) for j in joint_d[f]]
        weights[v, 0] = 1.0 - t[0]
        weights[v, 1 + 3 * f] = t[0] - t[1]
        weights[v, 2 + 3 * f] = t[1] - t[2]
        weights[v, 3 + 3 * f] = t[2]

    parents = [-1]
    rest_joints = [np.zeros(3)]
    joint_axes = []
    dof_mask = []
    limits = []
    up = np.array([0.0, 1.0, 0.0])
    for f, name in enumerate(FINGERS):
        u = rays[f]
        frame = np.stack([np.cross(up, u), up, u], axis=1)
        lim = LIMITS["thumb" if name == "thumb" else "finger"]
        for k in range(3):
            parents.append(0 if k == 0 else 3 * f + k)
            rest_joints.append(joint_d[f, k] * u)
            joint_axes.append(frame)
            for slot, on in enumerate(DOF_PATTERN[name][k]):
                dof_mask.append(bool(on))
                if on:
                    limits.append(lim[slot])

    shape = np.zeros((10, len(verts), 3))
    shape[0] = 0.05 * verts
    shape[1, :, 2] = 0.10 * verts[:, 2]
    shape[2, :, 1] = 0.12 * verts[:, 1]
    for f in range(5):
        sel = owner == f
        ext = np.maximum(0.0, dist[sel] - joint_d[f, 0])
        shape[3 + f, sel] = 0.10 * ext[:, None] * rays[f]
    tube = owner >= 0
    radial = verts - dist[:, None] * rays[finger]
    shape[8, tube] = 0.12 * radial[tube]
    shape[9] = 0.06 * np.minimum(dist, joint_d[finger, 0])[:, None] * rays[finger]

    def r6(a, digits=7):
        return np.round(np.asarray(a, dtype=float), digits).tolist()

    return {
        "schema_version": 1,
        "name": "simplehand",
        "side": "right",
        "vertices": r6(verts),
        "triangles": tris.astype(int).tolist(),
        "skinning_weights": r6(weights),
        "tree_parents": parents,
        "rest_joints": r6(rest_joints),
        "shape_basis": r6(shape),
        "joint_axes": r6(joint_axes, 15),
        "dof_mask": dof_mask,
        "joint_limits": r6(limits),
    }


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 1:
        print("usage: python -m handfit.modelgen OUT.json", file=sys.stderr)
        return 2
    with open(argv[0], "w") as fh:
        json.dump(build_simple_hand(), fh, separators=(",", ":"))
        fh.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
