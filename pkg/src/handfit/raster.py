"""Pinhole camera and a vectorised software z-buffer rasterizer.

Pixel ``(x, y)`` (column, row) covers the continuous image square
``[x, x+1) x [y, y+1)`` and is sampled at its centre ``(x + 0.5, y + 0.5)``.
A camera-space point ``P`` projects to continuous coordinates
``u = fx * X / Z + cx``, ``v = fy * Y / Z + cy``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NEAR = 1e-3


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def shape(self):
        return (self.height, self.width)

    def project(self, points):
        """Continuous image coordinates (u, v) and depth of camera-space points."""
        P = np.asarray(points, dtype=float)
        z = P[..., 2]
        u = self.fx * P[..., 0] / z + self.cx
        v = self.fy * P[..., 1] / z + self.cy
        return u, v, z

    def unproject(self, u, v, z):
        u, v, z = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (u, v, z)))
        return np.stack([z * (u - self.cx) / self.fx, z * (v - self.cy) / self.fy, z], axis=-1)

    def scaled(self, factor):
        """Camera for an image resampled by ``factor`` (e.g. 0.5 for half size)."""
        return Camera(self.fx * factor, self.fy * factor, self.cx * factor,
                      self.cy * factor, int(round(self.width * factor)),
                      int(round(self.height * factor)))

    def subsampled(self, step):
        """Camera whose pixel (x, y) samples the centre of full pixel (step*x, step*y)."""
        k = int(step)
        return Camera(self.fx / k, self.fy / k, (self.cx - 0.5) / k + 0.5,
                      (self.cy - 0.5) / k + 0.5, -(-self.width // k), -(-self.height // k))

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


DEFAULT_CAMERA = Camera(280.0, 280.0, 160.0, 120.0, 320, 240)


@dataclass
class RasterBundle:
    depth: np.ndarray       # (H, W) metres, 0 = background
    mask: np.ndarray        # (H, W) bool
    corr: np.ndarray        # (H, W, C) interpolated vertex attributes
    triangle: np.ndarray    # (H, W) visible triangle index, -1 = background
    empty: bool = False     # True when nothing could be drawn


def rasterize(hand, corr_table, cam, triangles=None):
    """Render depth, mask and interpolated per-vertex attributes.

    ``hand`` is a :class:`~handfit.hand_model.PosedHand` (or an (V, 3) array of
    camera-space vertices, then ``triangles`` is required). Attributes are
    interpolated perspective-correctly. Triangles with a vertex closer than
    ``NEAR`` are skipped; ties in depth go to the lowest triangle index.
    """
    if triangles is None:
        verts, triangles = hand.vertices, hand.triangles
    else:
        verts = np.asarray(hand, dtype=float)
    attrs = np.asarray(corr_table, dtype=float)
    if attrs.ndim == 1:
        attrs = attrs[:, None]
    H, W = cam.height, cam.width
    C = attrs.shape[1]
    depth = np.zeros((H, W))
    corr = np.zeros((H, W, C))
    tri_img = np.full((H, W), -1, dtype=np.int64)

    tris = np.asarray(triangles, dtype=np.int64)
    z = verts[:, 2]
    u, v, _ = cam.project(np.where(z[:, None] > NEAR, verts, [0.0, 0.0, 1.0]))
    ok = np.all(z[tris] > NEAR, axis=1)
    tu, tv, tz = u[tris], v[tris], z[tris]

    x0 = np.ceil(tu.min(axis=1) - 0.5).astype(np.int64)
    x1 = np.floor(tu.max(axis=1) - 0.5).astype(np.int64)
    y0 = np.ceil(tv.min(axis=1) - 0.5).astype(np.int64)
    y1 = np.floor(tv.max(axis=1) - 0.5).astype(np.int64)
    x0, y0 = np.maximum(x0, 0), np.maximum(y0, 0)
    x1, y1 = np.minimum(x1, W - 1), np.minimum(y1, H - 1)
    area = (tu[:, 1] - tu[:, 0]) * (tv[:, 2] - tv[:, 0]) - (tu[:, 2] - tu[:, 0]) * (tv[:, 1] - tv[:, 0])
    ok &= (x1 >= x0) & (y1 >= y0) & (np.abs(area) > 1e-12)
    sel = np.flatnonzero(ok)
    if len(sel) == 0:
        return RasterBundle(depth, np.zeros((H, W), dtype=bool), corr, tri_img,
                            empty=True)

    bw = (x1 - x0 + 1)[sel]
    counts = bw * (y1 - y0 + 1)[sel]
    tid = np.repeat(sel, counts)
    starts = np.cumsum(counts) - counts
    k = np.arange(counts.sum()) - np.repeat(starts, counts)
    bwr = np.repeat(bw, counts)
    px = x0[tid] + k % bwr
    py = y0[tid] + k // bwr
    sx, sy = px + 0.5, py + 0.5

    a_u, a_v = tu[tid], tv[tid]
    inv_area = 1.0 / area[tid]
    b0 = ((a_u[:, 1] - sx) * (a_v[:, 2] - sy) - (a_u[:, 2] - sx) * (a_v[:, 1] - sy)) * inv_area
    b1 = ((a_u[:, 2] - sx) * (a_v[:, 0] - sy) - (a_u[:, 0] - sx) * (a_v[:, 2] - sy)) * inv_area
    b2 = 1.0 - b0 - b1
    inside = (b0 >= 0) & (b1 >= 0) & (b2 >= 0)
    tid, px, py = tid[inside], px[inside], py[inside]
    bary = np.stack([b0[inside], b1[inside], b2[inside]], axis=1)
    if len(tid) == 0:
        return RasterBundle(depth, np.zeros((H, W), dtype=bool), corr, tri_img,
                            empty=True)

    q = bary / tz[tid]
    qs = q.sum(axis=1)
    d = 1.0 / qs
    pid = py * W + px
    order = np.lexsort((tid, d, pid))
    pid_sorted = pid[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pid_sorted[1:] != pid_sorted[:-1]
    win = order[first]

    w = q[win] / qs[win, None]
    vals = np.einsum("nk,nkc->nc", w, attrs[tris[tid[win]]])
    rr, cc = py[win], px[win]
    depth[rr, cc] = d[win]
    corr[rr, cc] = vals
    tri_img[rr, cc] = tid[win]
    return RasterBundle(depth, depth > 0, corr, tri_img)


def jaccard(M, Mv):
    """Intersection over union of two binary masks; two empty masks give 1."""
    M = np.asarray(M, dtype=bool)
    Mv = np.asarray(Mv, dtype=bool)
    if M.shape != Mv.shape:
        raise ValueError(f"resolution mismatch: {M.shape} vs {Mv.shape}")
    union = np.count_nonzero(M | Mv)
    if union == 0:
        return 1.0
    return np.count_nonzero(M & Mv) / union


class BackgroundPixelError(ValueError):
    pass


def backproject(D, x, y, cam):
    """3D point of integer pixel ``(x, y)`` sampled at its centre."""
    d = float(D[y, x])
    if not d > 0:
        raise BackgroundPixelError(f"background pixel ({x}, {y})")
    return cam.unproject(x + 0.5, y + 0.5, d)


def backproject_all(D, cam):
    """(H, W, 3) point image; background pixels map to the origin."""
    H, W = D.shape
    xs = np.arange(W) + 0.5
    ys = np.arange(H) + 0.5
    return cam.unproject(xs[None, :], ys[:, None], D)


def _tangent(P, fg, axis):
    """Difference along ``axis`` (central, else one-sided), plus a validity mask."""
    fwd = np.roll(P, -1, axis=axis)
    bwd = np.roll(P, 1, axis=axis)
    f_ok = np.roll(fg, -1, axis=axis)
    b_ok = np.roll(fg, 1, axis=axis)
    diff = np.where((f_ok & b_ok)[..., None], (fwd - bwd) / 2.0,
                    np.where(f_ok[..., None], fwd - P, P - bwd))
    return diff, f_ok | b_ok


def depth_normals(D, cam):
    """Per-pixel unit normals facing the camera from neighbouring depths.

    Uses central differences, falling back to one-sided differences at the
    mask silhouette. Zero at background pixels, on the 1-pixel image border
    and at pixels lacking a foreground neighbour along either axis.
    """
    D = np.asarray(D, dtype=float)
    P = backproject_all(D, cam)
    fg = D > 0
    dx, ok_x = _tangent(P, fg, axis=1)
    dy, ok_y = _tangent(P, fg, axis=0)
    n = np.cross(dx, dy)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    n = n / np.where(norm > 0, norm, 1.0)
    n = np.where(n[..., 2:3] > 0, -n, n)
    valid = fg & ok_x & ok_y & (norm[..., 0] > 0)
    valid[0, :] = valid[-1, :] = False
    valid[:, 0] = valid[:, -1] = False
    return np.where(valid[..., None], n, 0.0)
