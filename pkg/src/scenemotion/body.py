"""Kinematic skeleton, forward kinematics, its Jacobian and a capsule body.

A pose is a root translation plus one exp-map rotation per joint. Flattened,
one frame is ``[t(3), v_0(3), ..., v_{J-1}(3)]`` (``3 + 3J`` reals) and a
motion of ``N`` frames is ``N`` such rows. Joint ``j``'s own rotation moves
its children, never ``j`` itself.

The capsule body stands in for a statistical body mesh: every bone is a
capsule whose surface is sampled along the axis in four radial directions.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from importlib import resources

import numpy as np

from .exceptions import DimensionMismatch
from .geometry import exp_map, left_jacobian, skew

RADIAL_DIRECTIONS = 4


@dataclass(frozen=True, eq=False)
class SkeletonDef:
    """Joint tree in topological order (``parents[j] < j``, root is joint 0).

    ``offsets[j]`` is joint ``j``'s rest position in its parent's frame and
    ``radii[j]`` the radius of the bone ending at ``j`` (``radii[0]`` is
    unused by the capsule body).
    """

    names: tuple
    parents: np.ndarray
    offsets: np.ndarray
    radii: np.ndarray
    name: str = "custom"

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        parents = np.asarray(self.parents, dtype=int).reshape(-1)
        offsets = np.asarray(self.offsets, dtype=float).reshape(-1, 3)
        radii = np.asarray(self.radii, dtype=float).reshape(-1)
        J = len(parents)
        if J < 1 or len(names) != J or len(offsets) != J or len(radii) != J:
            raise ValueError("names, parents, offsets and radii must all have J entries")
        if parents[0] != -1:
            raise ValueError("joint 0 must be the root (parent -1)")
        for j in range(1, J):
            if not 0 <= parents[j] < j:
                raise ValueError(f"joint {j} ({names[j]}) must have a parent index in [0, {j})")
        if not np.all(np.isfinite(offsets)):
            raise ValueError("offsets must be finite")
        if np.any(radii <= 0):
            raise ValueError("radii must be positive")
        if len(set(names)) != J:
            raise ValueError("joint names must be unique")
        for arr in (parents, offsets, radii):
            arr.setflags(write=False)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "radii", radii)

    @property
    def n_joints(self):
        return len(self.parents)

    @property
    def pose_dim(self):
        return 3 + 3 * self.n_joints

    def index(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown joint {name!r}") from None

    @cached_property
    def ancestry(self):
        """``A[f, a]`` is True when ``a`` is ``f`` or one of its ancestors."""
        J = self.n_joints
        A = np.zeros((J, J), dtype=bool)
        for j in range(J):
            A[j, j] = True
            if self.parents[j] >= 0:
                A[j] |= A[self.parents[j]]
        A.setflags(write=False)
        return A

    @cached_property
    def rest_positions(self):
        pos = np.zeros((self.n_joints, 3))
        for j in range(1, self.n_joints):
            pos[j] = pos[self.parents[j]] + self.offsets[j]
        return pos

    @cached_property
    def bone_lengths(self):
        return np.linalg.norm(self.offsets, axis=1)

    def to_dict(self):
        return {"name": self.name, "names": list(self.names),
                "parents": self.parents.tolist(), "offsets": self.offsets.tolist(),
                "radii": self.radii.tolist()}

    @classmethod
    def from_dict(cls, doc):
        return cls(names=doc["names"], parents=doc["parents"], offsets=doc["offsets"],
                   radii=doc["radii"], name=doc.get("name", "custom"))

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


_DEFAULT = None


def default_skeleton() -> SkeletonDef:
    """The built-in 22-joint skeleton (pelvis root, arms hanging at rest)."""
    global _DEFAULT
    if _DEFAULT is None:
        text = resources.files("scenemotion").joinpath("data/skeleton_22.json").read_text()
        _DEFAULT = SkeletonDef.from_dict(json.loads(text))
    return _DEFAULT


# ---------------------------------------------------------------------------
# Pose containers
# ---------------------------------------------------------------------------

@dataclass
class Pose:
    root: np.ndarray
    rotations: np.ndarray

    def __post_init__(self):
        self.root = np.asarray(self.root, dtype=float).reshape(3)
        self.rotations = np.asarray(self.rotations, dtype=float).reshape(-1, 3)

    def to_vector(self):
        return np.concatenate([self.root, self.rotations.ravel()])

    @classmethod
    def from_vector(cls, x):
        x = np.asarray(x, dtype=float)
        if x.ndim != 1 or (len(x) - 3) % 3 or len(x) < 6:
            raise DimensionMismatch(f"pose vector of length {len(x)} is not 3 + 3J")
        return cls(x[:3], x[3:].reshape(-1, 3))

    @classmethod
    def rest(cls, skel: SkeletonDef, root=(0.0, 0.0, 0.0)):
        return cls(np.asarray(root, float), np.zeros((skel.n_joints, 3)))


@dataclass
class MotionSequence:
    """``N`` frames of root translations ``(N, 3)`` and rotations ``(N, J, 3)``."""

    roots: np.ndarray
    rotations: np.ndarray
    fps: float = 20.0
    skeleton_name: str = "smpl22"

    def __post_init__(self):
        self.roots = np.asarray(self.roots, dtype=float).reshape(-1, 3)
        self.rotations = np.asarray(self.rotations, dtype=float)
        if self.rotations.ndim != 3 or self.rotations.shape[2] != 3:
            raise DimensionMismatch("rotations must have shape (N, J, 3)")
        if len(self.roots) != len(self.rotations):
            raise DimensionMismatch("roots and rotations disagree on the frame count")
        if len(self.roots) < 1:
            raise ValueError("a motion needs at least one frame")
        if not self.fps > 0:
            raise ValueError("fps must be positive")
        self.fps = float(self.fps)

    @property
    def n_frames(self):
        return len(self.roots)

    @property
    def n_joints(self):
        return self.rotations.shape[1]

    def frame(self, i) -> Pose:
        return Pose(self.roots[i], self.rotations[i])

    def to_array(self):
        """Flattened ``(N, 3 + 3J)`` state."""
        return np.concatenate([self.roots, self.rotations.reshape(self.n_frames, -1)], axis=1)

    @classmethod
    def from_array(cls, x, n_joints, fps=20.0, skeleton_name="smpl22"):
        x = np.asarray(x, dtype=float).reshape(-1, 3 + 3 * n_joints)
        return cls(x[:, :3], x[:, 3:].reshape(len(x), n_joints, 3), fps, skeleton_name)

    def translated(self, offset):
        return MotionSequence(self.roots + np.asarray(offset, float), self.rotations.copy(),
                              self.fps, self.skeleton_name)


# ---------------------------------------------------------------------------
# Kinematics
# ---------------------------------------------------------------------------

def _split(pose, skel):
    """Accept a Pose, a MotionSequence, or a ``(..., 3+3J)`` array."""
    if isinstance(pose, Pose):
        trans, rots = pose.root, pose.rotations
    elif isinstance(pose, MotionSequence):
        trans, rots = pose.roots, pose.rotations
    else:
        x = np.asarray(pose, dtype=float)
        if x.shape[-1] != skel.pose_dim:
            raise DimensionMismatch(
                f"pose has {x.shape[-1]} parameters, skeleton needs {skel.pose_dim}")
        trans, rots = x[..., :3], x[..., 3:].reshape(x.shape[:-1] + (skel.n_joints, 3))
    if rots.shape[-2] != skel.n_joints:
        raise DimensionMismatch(
            f"pose has {rots.shape[-2]} joint rotations, skeleton has {skel.n_joints}")
    return np.asarray(trans, float), np.asarray(rots, float)


@dataclass
class KinematicState:
    """Everything derivative code needs from one forward pass (batched)."""

    positions: np.ndarray   # (..., J, 3)
    globals: np.ndarray     # (..., J, 3, 3) world rotation of each joint frame
    axes: np.ndarray        # (..., J, 3, 3) world axes turned by each joint's exp-map coords


def forward(pose, skel: SkeletonDef) -> KinematicState:
    trans, rots = _split(pose, skel)
    batch = trans.shape[:-1]
    J = skel.n_joints
    R_local = exp_map(rots)
    Jl = left_jacobian(rots)
    pos = np.empty(batch + (J, 3))
    G = np.empty(batch + (J, 3, 3))
    axes = np.empty(batch + (J, 3, 3))
    pos[..., 0, :] = trans
    G[..., 0, :, :] = R_local[..., 0, :, :]
    axes[..., 0, :, :] = Jl[..., 0, :, :]
    for j in range(1, J):
        p = skel.parents[j]
        Gp = G[..., p, :, :]
        pos[..., j, :] = pos[..., p, :] + Gp @ skel.offsets[j]
        G[..., j, :, :] = Gp @ R_local[..., j, :, :]
        axes[..., j, :, :] = Gp @ Jl[..., j, :, :]
    return KinematicState(pos, G, axes)


def fk(pose, skel: SkeletonDef):
    """World joint positions, shape ``(..., J, 3)``."""
    return forward(pose, skel).positions


def attached_point_jacobian(points, frames, state: KinematicState, skel: SkeletonDef):
    """Jacobian of world points rigidly attached to joint frames.

    ``points`` is ``(..., P, 3)`` and ``frames[p]`` the joint whose frame
    carries point ``p`` (``-1`` for a point that only follows the root
    translation). Returns ``(..., P, 3, 3 + 3J)``.
    """
    points = np.asarray(points, float)
    frames = np.asarray(frames, dtype=int)
    J = skel.n_joints
    out = np.zeros(points.shape + (3 + 3 * J,))
    out[..., 0, 0] = 1.0
    out[..., 1, 1] = 1.0
    out[..., 2, 2] = 1.0
    A = skel.ancestry
    for a in range(J):
        sel = np.flatnonzero((frames >= 0) & A[np.maximum(frames, 0), a])
        if sel.size == 0:
            continue
        lever = points[..., sel, :] - state.positions[..., a, None, :]
        # d x / d v_a = (Omega e_i) x (x - p_a) = -[x - p_a]x Omega
        block = -skew(lever) @ state.axes[..., a, None, :, :]
        out[..., sel, :, 3 + 3 * a: 6 + 3 * a] = block
    return out


def attached_point_vjp(points, frames, grads, state: KinematicState, skel: SkeletonDef):
    """``sum_p grads[p]^T d points[p] / d pose`` without materialising Jacobians.

    Shapes as in :func:`attached_point_jacobian`; ``grads`` matches
    ``points``. Returns ``(..., 3 + 3J)``.
    """
    points = np.asarray(points, float)
    grads = np.asarray(grads, float)
    frames = np.asarray(frames, dtype=int)
    J = skel.n_joints
    batch = points.shape[:-2]
    out = np.zeros(batch + (3 + 3 * J,))
    out[..., :3] = grads.sum(axis=-2)
    A = skel.ancestry
    for a in range(J):
        sel = np.flatnonzero((frames >= 0) & A[np.maximum(frames, 0), a])
        if sel.size == 0:
            continue
        lever = points[..., sel, :] - state.positions[..., a, None, :]
        torque = np.cross(lever, grads[..., sel, :]).sum(axis=-2)
        out[..., 3 + 3 * a: 6 + 3 * a] = np.einsum("...ij,...i->...j", state.axes[..., a, :, :], torque)
    return out


def fk_jacobian(pose, skel: SkeletonDef):
    """Analytic ``d positions / d pose``, shape ``(..., 3J, 3 + 3J)``.

    Columns are ordered like the flattened pose; rows are joint-major
    ``(x0, y0, z0, x1, ...)``.
    """
    state = forward(pose, skel)
    jac = attached_point_jacobian(state.positions, skel.parents, state, skel)
    return jac.reshape(jac.shape[:-3] + (3 * skel.n_joints, skel.pose_dim))


# ---------------------------------------------------------------------------
# Capsule body
# ---------------------------------------------------------------------------

def _perpendicular_pair(d):
    n = np.linalg.norm(d)
    u = d / n if n > 0 else np.array([0.0, 0.0, 1.0])
    ref = np.eye(3)[int(np.argmin(np.abs(u)))]
    e1 = np.cross(u, ref)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(u, e1)


_LAYOUT_CACHE: dict = {}


def capsule_layout(skel: SkeletonDef, samples_per_bone: int):
    """Static sampling pattern: ``(frames (P,), local offsets (P, 3), bone (P,))``.

    Each point lives in the frame of the bone's parent joint, at
    ``u * offset + r * radial`` with ``u`` evenly spaced on ``[0, 1]``.
    """
    if samples_per_bone < 2:
        raise ValueError("samples_per_bone must be at least 2")
    key = (id(skel), samples_per_bone)
    hit = _LAYOUT_CACHE.get(key)
    if hit is not None and hit[0] is skel:
        return hit[1]
    frames, local, bone = [], [], []
    us = np.linspace(0.0, 1.0, samples_per_bone)
    for j in range(1, skel.n_joints):
        o = skel.offsets[j]
        e1, e2 = _perpendicular_pair(o)
        radial = (e1, -e1, e2, -e2)
        for u in us:
            for d in radial:
                frames.append(skel.parents[j])
                local.append(u * o + skel.radii[j] * d)
                bone.append(j)
    layout = (np.array(frames, dtype=int), np.array(local, float), np.array(bone, dtype=int))
    for arr in layout:
        arr.setflags(write=False)
    _LAYOUT_CACHE[key] = (skel, layout)
    return layout


def capsule_points(state: KinematicState, skel: SkeletonDef, samples_per_bone: int):
    """World capsule sample points ``(..., P, 3)`` plus their carrier frames."""
    frames, local, _ = capsule_layout(skel, samples_per_bone)
    base = state.positions[..., frames, :]
    rot = state.globals[..., frames, :, :]
    return base + np.einsum("...pij,pj->...pi", rot, local), frames


def skin_capsules(pose, skel: SkeletonDef, samples_per_bone: int = 4):
    """Surface samples of the capsule body and their pose Jacobians.

    Returns ``points (..., P, 3)`` and ``jacobians (..., P, 3, 3 + 3J)`` with
    ``P = samples_per_bone * 4 * (J - 1)``.
    """
    state = forward(pose, skel)
    pts, frames = capsule_points(state, skel, samples_per_bone)
    return pts, attached_point_jacobian(pts, frames, state, skel)
