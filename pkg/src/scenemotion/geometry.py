"""3D math: exponential-map rotations, oriented boxes and signed distances.

World frame is Z-up with the ground on the XOY plane. Every query here is
vectorized over a leading batch of points; ``(3,)`` inputs give scalar-ish
outputs, ``(P, 3)`` inputs give per-point outputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

# Returned by scene_sdf when the field holds no obstacles.
SDF_EMPTY = 1e9

# Central-difference step for union seams.
FD_STEP = 1e-4

_TIE_TOL = 1e-12
_SMALL_ANGLE = 1e-6


# ---------------------------------------------------------------------------
# Rotations
# ---------------------------------------------------------------------------

def skew(v):
    """Cross-product matrices ``[v]x`` for ``v`` of shape ``(..., 3)``."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _angle_coeffs(theta):
    """``sin(t)/t``, ``(1-cos t)/t^2`` and ``(t-sin t)/t^3`` with series near 0."""
    small = theta < _SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(t) / t)
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(t)) / (t * t))
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0, (t - np.sin(t)) / (t * t * t))
    return a, b, c


def exp_map(v):
    """Rodrigues' formula: rotation vectors ``(..., 3)`` to matrices ``(..., 3, 3)``."""
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v, axis=-1)
    a, b, _ = _angle_coeffs(theta)
    K = skew(v)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def left_jacobian(v):
    """Left Jacobian of SO(3).

    Satisfies ``exp(v + d) ~= exp(J(v) d) exp(v)`` for small ``d``, so the
    columns of ``J(v)`` are the world-frame angular axes that each
    exp-map coordinate turns about.
    """
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v, axis=-1)
    _, b, c = _angle_coeffs(theta)
    K = skew(v)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + b[..., None, None] * K + c[..., None, None] * (K @ K)


def log_map(R):
    """Inverse of :func:`exp_map`, returning angles in ``[0, pi]``."""
    R = np.asarray(R, dtype=float)
    batch = R.shape[:-2]
    Rf = R.reshape(-1, 3, 3)
    tr = np.trace(Rf, axis1=1, axis2=2)
    theta = np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))
    w = np.stack([Rf[:, 2, 1] - Rf[:, 1, 2],
                  Rf[:, 0, 2] - Rf[:, 2, 0],
                  Rf[:, 1, 0] - Rf[:, 0, 1]], axis=-1) / 2.0
    out = np.empty_like(w)

    small = theta < 1e-6
    near_pi = theta > np.pi - 1e-3
    regular = ~(small | near_pi)
    out[small] = w[small] * (1.0 + theta[small, None] ** 2 / 6.0)
    out[regular] = w[regular] * (theta[regular] / np.sin(theta[regular]))[:, None]
    for i in np.flatnonzero(near_pi):
        # (R + I) / 2 ~= a a^T near pi; take its dominant column as the axis.
        B = (Rf[i] + np.eye(3)) / 2.0
        col = int(np.argmax(np.diag(B)))
        axis = B[:, col] / np.sqrt(max(B[col, col], 1e-300))
        axis /= np.linalg.norm(axis)
        if np.dot(axis, w[i]) < 0:
            axis = -axis
        out[i] = axis * theta[i]
    return out.reshape(batch + (3,))


def rot_z(yaw):
    yaw = np.asarray(yaw, dtype=float)
    c, s = np.cos(yaw), np.sin(yaw)
    out = np.zeros(yaw.shape + (3, 3))
    out[..., 0, 0] = c
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c
    out[..., 2, 2] = 1.0
    return out


# ---------------------------------------------------------------------------
# Boxes and fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OrientedBox:
    """Box with a yaw about +Z. ``half_extents`` are in the box's own frame."""

    center: np.ndarray
    half_extents: np.ndarray
    yaw: float = 0.0

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(3)
        h = np.asarray(self.half_extents, dtype=float).reshape(3)
        if not np.all(np.isfinite(c)) or not np.all(np.isfinite(h)):
            raise ValueError("box center and half extents must be finite")
        if np.any(h <= 0):
            raise ValueError(f"half extents must be positive, got {h.tolist()}")
        c.setflags(write=False)
        h.setflags(write=False)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_extents", h)
        object.__setattr__(self, "yaw", float(self.yaw))

    @property
    def rotation(self):
        return rot_z(self.yaw)

    @property
    def bottom(self):
        return float(self.center[2] - self.half_extents[2])

    @property
    def top(self):
        return float(self.center[2] + self.half_extents[2])

    def to_local(self, p):
        p = np.asarray(p, dtype=float)
        return (p - self.center) @ self.rotation

    def corners(self):
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], float)
        return self.center + (signs * self.half_extents) @ self.rotation.T

    def footprint(self):
        """Counter-clockwise XY corners of the box's ground projection, ``(4, 2)``."""
        hx, hy = self.half_extents[:2]
        local = np.array([[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]])
        Rz = self.rotation[:2, :2]
        return self.center[:2] + local @ Rz.T

    def translated(self, offset):
        return OrientedBox(self.center + np.asarray(offset, float), self.half_extents, self.yaw)

    def to_dict(self):
        return {"center": self.center.tolist(), "half_extents": self.half_extents.tolist(),
                "yaw": self.yaw}


def _box_local_d(p, b: OrientedBox):
    q = b.to_local(p)
    return q, np.abs(q) - b.half_extents


def box_sdf(p, b: OrientedBox):
    """Exact signed distance from ``p`` to the surface of ``b``.

    Negative inside, positive outside, zero on the surface.
    """
    _, d = _box_local_d(p, b)
    outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
    inside = np.minimum(np.max(d, axis=-1), 0.0)
    return outside + inside


def _box_sdf_grad_local(q, d):
    """Analytic local-frame gradient; exact interior ties break toward z, then y, then x."""
    q = np.atleast_2d(q)
    d = np.atleast_2d(d)
    sign = np.where(q < 0, -1.0, 1.0)
    pos = np.maximum(d, 0.0)
    norm = np.linalg.norm(pos, axis=-1)
    out = np.zeros_like(q)
    outside = norm > 0
    out[outside] = (pos[outside] / norm[outside, None]) * sign[outside]

    ins = ~outside
    if np.any(ins):
        di = d[ins]
        dmax = di.max(axis=-1, keepdims=True)
        tied = di >= dmax - _TIE_TOL
        # priority z > y > x
        axis = 2 - np.argmax(tied[:, ::-1], axis=-1)
        g = np.zeros_like(di)
        rows = np.arange(len(di))
        g[rows, axis] = sign[ins][rows, axis]
        out[ins] = g
    return out


def box_sdf_grad(p, b: OrientedBox):
    p = np.asarray(p, dtype=float)
    q, d = _box_local_d(p, b)
    g = _box_sdf_grad_local(q, d) @ b.rotation.T
    return g.reshape(p.shape)


class SceneField:
    """Immutable union of oriented-box obstacles inside an axis-aligned world."""

    def __init__(self, boxes: Sequence[OrientedBox] = (), bounds=None, *, check_bounds=True):
        self._boxes = tuple(boxes)
        if bounds is None:
            if self._boxes:
                pts = np.concatenate([b.corners() for b in self._boxes])
                bounds = (pts.min(axis=0), pts.max(axis=0))
            else:
                bounds = (np.full(3, -np.inf), np.full(3, np.inf))
        lo = np.asarray(bounds[0], dtype=float).reshape(3)
        hi = np.asarray(bounds[1], dtype=float).reshape(3)
        if np.any(lo > hi):
            raise ValueError("world bounds must satisfy lo <= hi")
        if check_bounds:
            for i, b in enumerate(self._boxes):
                c = b.corners()
                if np.any(c < lo - 1e-9) or np.any(c > hi + 1e-9):
                    raise ValueError(f"box {i} extends outside the world bounds")
        lo.setflags(write=False)
        hi.setflags(write=False)
        self._lo, self._hi = lo, hi
        n = len(self._boxes)
        self._centers = np.array([b.center for b in self._boxes]).reshape(n, 3)
        self._half = np.array([b.half_extents for b in self._boxes]).reshape(n, 3)
        self._rots = np.array([b.rotation for b in self._boxes]).reshape(n, 3, 3)
        # all box frames side by side so local coordinates are one matmul
        self._stacked = self._rots.transpose(1, 0, 2).reshape(3, 3 * n)
        self._offsets = np.einsum("bi,bij->bj", self._centers, self._rots).reshape(3 * n)

    @property
    def boxes(self):
        return self._boxes

    @property
    def bounds(self):
        return self._lo, self._hi

    def __len__(self):
        return len(self._boxes)

    def translated(self, offset):
        offset = np.asarray(offset, float)
        return SceneField([b.translated(offset) for b in self._boxes],
                          (self._lo + offset, self._hi + offset))

    def _local(self, p):
        # q[..., b, :] is p expressed in box b's frame
        n = len(self._boxes)
        q = (p.reshape(-1, 3) @ self._stacked - self._offsets).reshape(*p.shape[:-1], n, 3)
        return q, np.abs(q) - self._half

    def per_box_sdf(self, p):
        p = np.asarray(p, dtype=float)
        _, d = self._local(p)
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
        inside = np.minimum(np.max(d, axis=-1), 0.0)
        return outside + inside


def scene_sdf(p, f: SceneField):
    """Union SDF: minimum of the per-box distances, ``SDF_EMPTY`` when empty."""
    p = np.asarray(p, dtype=float)
    if len(f) == 0:
        return np.full(p.shape[:-1], SDF_EMPTY) if p.ndim > 1 else SDF_EMPTY
    return f.per_box_sdf(p).min(axis=-1)


def scene_sdf_grad(p, f: SceneField):
    """Gradient of :func:`scene_sdf`.

    Analytic on the nearest box. Where two boxes tie for the minimum the
    union is not differentiable and a central difference (``FD_STEP``) is
    used instead; if that also degenerates the result is ``(0, 0, 1)``.
    """
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    pts = np.atleast_2d(p)
    out = np.zeros_like(pts)
    if len(f) == 0:
        out[:, 2] = 1.0
        return out[0] if single else out

    q, d = f._local(pts)
    outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
    inside = np.minimum(np.max(d, axis=-1), 0.0)
    per_box = outside + inside
    nearest = np.argmin(per_box, axis=-1)
    rows = np.arange(len(pts))
    g_local = _box_sdf_grad_local(q[rows, nearest], d[rows, nearest])
    out = np.einsum("pij,pj->pi", f._rots[nearest], g_local)

    if len(f) > 1:
        part = np.sort(per_box, axis=-1)
        seam = np.flatnonzero(part[:, 1] - part[:, 0] <= _TIE_TOL)
        for i in seam:
            g = np.empty(3)
            for k in range(3):
                e = np.zeros(3)
                e[k] = FD_STEP
                g[k] = (scene_sdf(pts[i] + e, f) - scene_sdf(pts[i] - e, f)) / (2 * FD_STEP)
            out[i] = g if np.linalg.norm(g) > 1e-9 else np.array([0.0, 0.0, 1.0])
    return out[0] if single else out


def point_box_distance(p, b: OrientedBox):
    """Unsigned distance to the solid box (zero inside)."""
    return np.maximum(box_sdf(p, b), 0.0)
