"""Motion planner: turns a spatial auxiliary and an instruction into guidance.

Guidance is a masked skeleton sequence: joint positions ``(N, J, 3)`` plus a
boolean mask ``(N, J)`` selecting the entries the sampler must follow.
"""
from __future__ import annotations

import heapq
import json
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from string import Template

import numpy as np
from sklearn.base import BaseEstimator

from .body import SkeletonDef, default_skeleton
from .exceptions import (
    BoundsViolation,
    DimensionMismatch,
    ParseFailure,
    PlanningError,
    UnknownAction,
    Unreachable,
)
from .geometry import rot_z
from .scene import FREE, NODATA, OBSTACLE, TARGET, RoadMap, SpatialAuxiliary

WALK_SPEED = 1.2
PELVIS_HEIGHT = 0.9
CONTACT_OFFSET = 0.05
CONTACT_QUANTILE = 0.75
CONTACT_FRACTION = 0.2
PROMPT_VERSION = "v1"

ACTIONS = {
    "walk": ("walk", "walking", "go", "move", "approach", "head", "stroll", "step"),
    "sit": ("sit", "sitting", "seat", "seated"),
    "lie": ("lie", "lying", "lay", "laying", "sleep", "recline"),
    "stand": ("stand", "standing"),
}


@dataclass
class GuidanceSpec:
    positions: np.ndarray
    mask: np.ndarray
    fps: float = 20.0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, float)
        self.mask = np.asarray(self.mask, bool)
        if self.positions.ndim != 3 or self.positions.shape[2] != 3:
            raise DimensionMismatch("positions must have shape (N, J, 3)")
        if self.mask.shape != self.positions.shape[:2]:
            raise DimensionMismatch("mask must have shape (N, J)")
        if self.n_frames < 1 or self.n_joints < 1:
            raise ValueError("guidance needs N >= 1 and J >= 1")
        if not np.all(np.isfinite(self.positions[self.mask])):
            raise ValueError("masked guidance entries must be finite")
        self.positions = np.where(self.mask[..., None], self.positions, 0.0)

    @property
    def n_frames(self):
        return self.positions.shape[0]

    @property
    def n_joints(self):
        return self.positions.shape[1]

    @classmethod
    def empty(cls, n_frames, n_joints, fps=20.0):
        return cls(np.zeros((n_frames, n_joints, 3)), np.zeros((n_frames, n_joints), bool), fps)

    def entries(self):
        for f, j in zip(*np.nonzero(self.mask)):
            yield int(f), int(j), self.positions[f, j]

    def to_dict(self):
        return {"n": self.n_frames, "j": self.n_joints, "fps": self.fps,
                "entries": [{"frame": f, "joint": j, "x": float(p[0]), "y": float(p[1]), "z": float(p[2])}
                            for f, j, p in self.entries()]}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, doc):
        g = cls.empty(int(doc["n"]), int(doc["j"]), float(doc.get("fps", 20.0)))
        for e in doc["entries"]:
            f, j = int(e["frame"]), int(e["joint"])
            if not (0 <= f < g.n_frames and 0 <= j < g.n_joints):
                raise BoundsViolation(f"entry ({f}, {j}) outside a {g.n_frames}x{g.n_joints} spec")
            g.positions[f, j] = (e["x"], e["y"], e["z"])
            g.mask[f, j] = True
        return cls(g.positions, g.mask, g.fps)


@dataclass
class PlanRequest:
    text: str
    aux: SpatialAuxiliary
    start: tuple
    n_frames: int = 120
    fps: float = 20.0
    ground_z: float = 0.0
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.start = tuple(float(v) for v in self.start)
        if len(self.start) != 2:
            raise ValueError("start must be an (x, y) pair")
        if self.n_frames < 1 or not self.fps > 0:
            raise ValueError("n_frames must be >= 1 and fps > 0")

    def start_cell(self):
        return self.aux.road_map.cell_of(self.start)


# ---------------------------------------------------------------------------
# Path search
# ---------------------------------------------------------------------------

_MOVES = [(dx, dy) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dx, dy) != (0, 0)]
SQRT2 = math.sqrt(2.0)


def _neighbors(rm: RoadMap, ix, iy):
    """8-connected free moves; diagonals may not cut a blocked corner."""
    cells = rm.cells
    for dx, dy in _MOVES:
        nx, ny = ix + dx, iy + dy
        if not rm.in_grid(nx, ny) or cells[ny, nx] != FREE:
            continue
        if dx and dy and (cells[iy, nx] != FREE or cells[ny, ix] != FREE):
            continue
        yield nx, ny, (SQRT2 if dx and dy else 1.0)


def target_adjacent(rm: RoadMap):
    """Predicate: FREE cell with a TARGET cell among its 8 neighbours."""
    is_target = rm.cells == TARGET
    padded = np.pad(is_target, 1)
    near = np.zeros_like(is_target)
    for dx, dy in _MOVES:
        near |= padded[1 + dy: 1 + dy + rm.height, 1 + dx: 1 + dx + rm.width]
    ok = near & (rm.cells == FREE)
    return lambda ix, iy: bool(ok[iy, ix])


def astar_path(rm: RoadMap, start, goal=None):
    """Shortest 8-connected path of cells ``(ix, iy)`` from ``start`` to a goal cell.

    ``goal`` is a predicate over cells; by default any FREE cell next to the
    target. Ties on ``f`` go to the lower ``g``, then to row-major order.
    """
    start = (int(start[0]), int(start[1]))
    if not rm.in_grid(*start) or rm.cells[start[1], start[0]] != FREE:
        raise PlanningError(f"start cell {start} is not a free cell of the road map")
    if goal is None:
        goal = target_adjacent(rm)
    goals = [(ix, iy) for iy in range(rm.height) for ix in range(rm.width)
             if rm.cells[iy, ix] == FREE and goal(ix, iy)]
    if not goals:
        raise Unreachable("no goal cell on the road map")
    goal_arr = np.array(goals, float)

    def h(c):
        d = np.abs(goal_arr - c)
        return float(np.min((SQRT2 - 1.0) * d.min(axis=1) + d.max(axis=1)))

    g_cost = {start: 0.0}
    parent = {start: None}
    heap = [(h(start), 0.0, start[1], start[0])]
    closed = set()
    while heap:
        f, g, iy, ix = heapq.heappop(heap)
        cur = (ix, iy)
        if cur in closed:
            continue
        closed.add(cur)
        if goal(ix, iy):
            path = [cur]
            while parent[path[-1]] is not None:
                path.append(parent[path[-1]])
            return path[::-1]
        for nx, ny, step in _neighbors(rm, ix, iy):
            nxt = (nx, ny)
            ng = g + step
            if nxt in closed or ng >= g_cost.get(nxt, math.inf) - 1e-12:
                continue
            g_cost[nxt] = ng
            parent[nxt] = cur
            heapq.heappush(heap, (ng + h(nxt), ng, ny, nx))
    raise Unreachable(f"target vicinity cannot be reached from cell {start}")


def path_cost(path):
    return sum(SQRT2 if (a[0] != b[0] and a[1] != b[1]) else 1.0 for a, b in zip(path, path[1:]))


# ---------------------------------------------------------------------------
# Rule-based planner
# ---------------------------------------------------------------------------

def classify_action(text, actions=None):
    table = actions or ACTIONS
    lookup = {kw: name for name, kws in table.items() for kw in kws}
    for tok in re.findall(r"[a-z]+", text.lower()):
        if tok in lookup:
            return lookup[tok]
    raise UnknownAction(f"no known action keyword in {text!r}")


def _resample_polyline(points, step):
    """Points every ``step`` metres along a polyline, always keeping its end."""
    pts = np.asarray(points, float)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1) if len(pts) > 1 else np.zeros(0)
    total = float(seg.sum())
    if total <= 1e-12:
        return pts[:1].copy()
    n = int(math.ceil(total / step - 1e-9))
    s = np.minimum(np.arange(n + 1) * step, total)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    out = np.empty((len(s), pts.shape[1]))
    for d in range(pts.shape[1]):
        out[:, d] = np.interp(s, cum, pts[:, d])
    return out


def _target_cells(rm: RoadMap):
    iy, ix = np.nonzero(rm.cells == TARGET)
    return list(zip(ix.tolist(), iy.tolist()))


def contact_height(aux: SpatialAuxiliary, quantile=CONTACT_QUANTILE):
    """Height-map quantile over TARGET cells (falls back to the box top)."""
    rm, hm = aux.road_map, aux.height_map
    offset = np.rint((hm.origin - rm.origin) / rm.cell).astype(int)
    vals = []
    for ix, iy in _target_cells(rm):
        hx, hy = ix - offset[0], iy - offset[1]
        if 0 <= hy < hm.heights.shape[0] and 0 <= hx < hm.heights.shape[1]:
            v = hm.heights[hy, hx]
            if v != NODATA:
                vals.append(v)
    if not vals:
        vals = hm.heights[hm.heights != NODATA].tolist()
    if not vals:
        return aux.target_box.top
    return float(np.quantile(vals, quantile))


class RuleBasedPlanner(BaseEstimator):
    """Deterministic planner: action keyword, A* route, waypoints, contact pose."""

    def __init__(self, speed=WALK_SPEED, pelvis_height=PELVIS_HEIGHT, contact_offset=CONTACT_OFFSET,
                 contact_quantile=CONTACT_QUANTILE, contact_fraction=CONTACT_FRACTION, actions=None):
        self.speed = speed
        self.pelvis_height = pelvis_height
        self.contact_offset = contact_offset
        self.contact_quantile = contact_quantile
        self.contact_fraction = contact_fraction
        self.actions = actions

    def fit(self, skeleton: SkeletonDef | None = None):
        self.skeleton_ = skeleton or default_skeleton()
        return self

    def predict(self, req: PlanRequest) -> GuidanceSpec:
        skel = getattr(self, "skeleton_", None) or default_skeleton()
        return plan_rule_based(req, skel, planner=self)


def _contact_pose(action, req, skel, planner, approach_xy, pelvis_z):
    """Target positions for the contact joints, keyed by joint name."""
    aux = req.aux
    rm = aux.road_map
    ground = req.ground_z
    if action in ("walk", "stand"):
        return {"pelvis": np.array([*approach_xy, ground + planner.pelvis_height])}

    h = contact_height(aux, planner.contact_quantile) + planner.contact_offset + ground
    if action == "sit":
        cells = _target_cells(rm)
        centers = np.array([rm.cell_center(ix, iy) for ix, iy in cells])
        d = np.linalg.norm(centers - approach_xy, axis=1)
        seat = centers[int(np.argmin(d))]
        forward = approach_xy - seat
        if np.linalg.norm(forward) < 1e-9:
            forward = approach_xy - aux.target_box.center[:2]
        forward = forward / max(np.linalg.norm(forward), 1e-12)
        R = rot_z(math.atan2(forward[1], forward[0]))
        pelvis = np.array([seat[0], seat[1], h])
        out = {"pelvis": pelvis}
        f3 = np.array([forward[0], forward[1], 0.0])
        for side in ("left", "right"):
            hip_j, knee_j, ankle_j = (skel.index(f"{side}_{n}") for n in ("hip", "knee", "ankle"))
            hip = pelvis + R @ skel.offsets[hip_j]
            knee = hip + f3 * skel.bone_lengths[knee_j]
            out[f"{side}_knee"] = knee
            out[f"{side}_ankle"] = knee - np.array([0.0, 0.0, skel.bone_lengths[ankle_j]])
        return out

    if action == "lie":
        box = aux.target_box
        axis_local = np.array([1.0, 0.0, 0.0]) if box.half_extents[0] >= box.half_extents[1] \
            else np.array([0.0, 1.0, 0.0])
        axis = box.rotation @ axis_local
        pelvis = np.array([box.center[0], box.center[1], h])
        head_j = skel.index("head")
        chain, j = [], head_j
        while j > 0:
            chain.append(j)
            j = skel.parents[j]
        head_reach = float(sum(skel.bone_lengths[c] for c in chain))
        out = {"pelvis": pelvis, "head": pelvis + axis * head_reach}
        for side in ("left", "right"):
            hip_j, knee_j, ankle_j = (skel.index(f"{side}_{n}") for n in ("hip", "knee", "ankle"))
            leg = skel.bone_lengths[knee_j] + skel.bone_lengths[ankle_j]
            lateral = np.cross([0.0, 0.0, 1.0], axis) * skel.offsets[hip_j][1]
            out[f"{side}_ankle"] = pelvis + lateral - axis * leg
        return out
    raise UnknownAction(action)


def plan_rule_based(req: PlanRequest, skel: SkeletonDef | None = None, planner=None) -> GuidanceSpec:
    skel = skel or default_skeleton()
    planner = planner or RuleBasedPlanner()
    action = classify_action(req.text, planner.actions)
    rm = req.aux.road_map
    path = astar_path(rm, req.start_cell())

    N, fps = int(req.n_frames), float(req.fps)
    step = planner.speed / fps
    z_walk = req.ground_z + planner.pelvis_height
    poly = [np.asarray(req.start)] + [rm.cell_center(ix, iy) for ix, iy in path[1:]]
    walk_xy = _resample_polyline(poly, step)
    approach = walk_xy[-1]

    contacts = _contact_pose(action, req, skel, planner, approach, None)
    n_contact = int(math.ceil(planner.contact_fraction * N))
    end_walk = np.array([approach[0], approach[1], z_walk])
    gap = float(np.linalg.norm(contacts["pelvis"] - end_walk))
    n_trans = max(int(math.ceil(gap / step - 1e-9)) - 1, 0)
    needed = len(walk_xy) + n_trans + n_contact
    if needed > N:
        raise PlanningError(f"route needs {needed} frames at {planner.speed} m/s, only {N} available")

    g = GuidanceSpec.empty(N, skel.n_joints, fps)
    pelvis = skel.index("pelvis")
    pelvis_track = [np.array([x, y, z_walk]) for x, y in walk_xy]
    pelvis_track += [end_walk] * (N - n_contact - n_trans - len(walk_xy))
    for i in range(1, n_trans + 1):
        t = i / (n_trans + 1)
        pelvis_track.append((1 - t) * end_walk + t * contacts["pelvis"])
    for f, p in enumerate(pelvis_track):
        g.positions[f, pelvis] = p
        g.mask[f, pelvis] = True
    for f in range(N - n_contact, N):
        for name, p in contacts.items():
            j = skel.index(name)
            g.positions[f, j] = p
            g.mask[f, j] = True
    return GuidanceSpec(g.positions, g.mask, fps)


# ---------------------------------------------------------------------------
# Posture prior
# ---------------------------------------------------------------------------

def _posture_rotations(action, skel):
    """Local joint rotations of a canonical posture (root excluded)."""
    rot = np.zeros((skel.n_joints, 3))
    if action == "sit":
        for side in ("left", "right"):
            rot[skel.index(f"{side}_hip")] = (0.0, -math.pi / 2, 0.0)
            rot[skel.index(f"{side}_knee")] = (0.0, math.pi / 2, 0.0)
    return rot


def _lying_root(axis):
    """Root rotation putting the body's up axis along ``axis``, face up."""
    from .geometry import log_map

    up = np.asarray(axis, float) / np.linalg.norm(axis)
    fwd = np.array([0.0, 0.0, 1.0])
    R = np.column_stack([fwd, np.cross(up, fwd), up])
    return log_map(R)


def posture_prior(g: GuidanceSpec, text, skel: SkeletonDef | None = None, root_height=PELVIS_HEIGHT,
                  actions=None):
    """Per-frame pose mean ``(N, 3 + 3J)`` for a Gaussian prior denoiser.

    Stands in for a text-conditioned motion model: frames that constrain
    more than the pelvis take the action's canonical posture, the rest
    stand upright. Headings follow the pelvis track, or point from the
    pelvis to the knees on contact frames; root positions interpolate the
    masked pelvis entries.
    """
    skel = skel or default_skeleton()
    N, J = g.n_frames, skel.n_joints
    action = classify_action(text, actions) if text else "stand"
    pelvis = skel.index("pelvis")
    mean = np.zeros((N, 3 + 3 * J))

    known = np.flatnonzero(g.mask[:, pelvis])
    if known.size:
        for d in range(3):
            mean[:, d] = np.interp(np.arange(N), known, g.positions[known, pelvis, d])
    else:
        mean[:, 2] = root_height

    contact = g.mask[:, [j for j in range(J) if j != pelvis]].any(axis=1)
    posture = _posture_rotations(action, skel)
    # frames lowering the pelvis toward the first contact pose blend in the posture
    blend = contact.astype(float)
    first = int(np.argmax(contact)) if contact.any() else N
    if first < N:
        drop = root_height - mean[first, 2]
        if abs(drop) > 1e-6:
            frac = np.clip((root_height - mean[:first, 2]) / drop, 0.0, 1.0)
            # flexing hip and knee by the same angle t keeps the shin vertical,
            # so this pacing keeps the feet near the floor while descending
            blend[:first] = np.arccos(1.0 - frac) * 2.0 / math.pi
    rot = blend[:, None, None] * posture[None]

    yaw = np.zeros(N)
    knees = [skel.index(n) for n in ("left_knee", "right_knee")]
    for f in range(N):
        if contact[f] and g.mask[f, knees].all():
            d = g.positions[f, knees].mean(axis=0)[:2] - mean[f, :2]
        else:
            d = mean[min(f + 1, N - 1), :2] - mean[max(f - 1, 0), :2]
        yaw[f] = math.atan2(d[1], d[0]) if np.linalg.norm(d) > 1e-6 else np.nan
    if first < N and not np.isnan(yaw[first]):
        yaw[:first][blend[:first] > 0] = yaw[first]
    ok = ~np.isnan(yaw)
    yaw = np.interp(np.arange(N), np.flatnonzero(ok), yaw[ok]) if ok.any() else np.zeros(N)
    rot[:, pelvis] = np.column_stack([np.zeros(N), np.zeros(N), np.unwrap(yaw)])

    if action == "lie":
        head = skel.index("head")
        for f in np.flatnonzero(contact & g.mask[:, head]):
            rot[f, pelvis] = _lying_root(g.positions[f, head] - g.positions[f, pelvis])
    mean[:, 3:] = rot.reshape(N, -1)
    return mean


# ---------------------------------------------------------------------------
# LLM planner
# ---------------------------------------------------------------------------

def _load_prompt(name):
    return resources.files("scenemotion").joinpath(f"data/prompts/{name}_{PROMPT_VERSION}.txt").read_text()


def _fmt(v):
    return "[" + ", ".join(f"{x:.3f}" for x in np.asarray(v, float).ravel()) + "]"


def render_planner_prompt(req: PlanRequest, skel: SkeletonDef, feedback=None):
    """``(system, user)`` prompt texts for the LLM planner."""
    rm, hm = req.aux.road_map, req.aux.height_map
    joint_table = "\n".join(f"  {j:2d} {n}" for j, n in enumerate(skel.names))
    system = Template(_load_prompt("planner_system")).substitute(
        speed=f"{WALK_SPEED:.1f}", ground_z=f"{req.ground_z:.3f}", cell=f"{rm.cell:.3f}",
        origin_x=f"{rm.origin[0]:.3f}", origin_y=f"{rm.origin[1]:.3f}", joint_table=joint_table)
    heights = "\n".join(" ".join(f"{v:.2f}" for v in row) for row in hm.heights)
    box = req.aux.target_box
    user = Template(_load_prompt("planner_user")).substitute(
        text=req.text, n_frames=req.n_frames, fps=f"{req.fps:g}", start=_fmt(req.start),
        target_label=req.aux.target_label or f"object {req.aux.target_id}",
        target_box=f"center {_fmt(box.center)}, half extents {_fmt(box.half_extents)}, yaw {box.yaw:.3f}",
        road_map=rm.to_ascii().rstrip("\n"), hm_origin=_fmt(hm.origin), height_map=heights)
    if feedback:
        user += f"\nA previous attempt failed these checks, fix them:\n{feedback}\n"
    return system, user


def parse_guidance(doc, req: PlanRequest, skel: SkeletonDef) -> GuidanceSpec:
    """Validate an LLM ``{"frames": [...]}`` payload into a GuidanceSpec."""
    if not isinstance(doc, dict) or not isinstance(doc.get("frames"), list):
        raise ParseFailure("payload must be an object with a 'frames' list")
    rm = req.aux.road_map
    lo = rm.origin
    hi = rm.origin + np.array([rm.width, rm.height]) * rm.cell
    g = GuidanceSpec.empty(req.n_frames, skel.n_joints, req.fps)
    for fr in doc["frames"]:
        try:
            idx = int(fr["index"])
            joints = dict(fr["joints"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseFailure(f"malformed frame entry {fr!r}") from exc
        if not 0 <= idx < req.n_frames:
            raise BoundsViolation(f"frame index {idx} outside [0, {req.n_frames})")
        for name, xyz in joints.items():
            try:
                j = skel.index(name)
            except KeyError:
                raise ParseFailure(f"unknown joint name {name!r}") from None
            try:
                p = np.asarray(xyz, dtype=float).reshape(3)
            except (TypeError, ValueError) as exc:
                raise ParseFailure(f"joint {name} needs three numbers") from exc
            if not np.all(np.isfinite(p)):
                raise ParseFailure(f"joint {name} has non-finite coordinates")
            if np.any(p[:2] < lo) or np.any(p[:2] > hi):
                raise BoundsViolation(f"joint {name} at frame {idx} lies outside the road map")
            g.positions[idx, j] = p
            g.mask[idx, j] = True
    if not g.mask.any():
        raise ParseFailure("payload constrains no joints")
    return GuidanceSpec(g.positions, g.mask, g.fps)


def plan_llm(req: PlanRequest, skel: SkeletonDef | None, client, *, model=None, reprompts=2,
             retries=2, timeout=30.0, feedback=None, sleep=None) -> GuidanceSpec:
    """Ask an LLM for guidance, re-prompting up to ``reprompts`` times on bad JSON."""
    from .llm import ChatRequest, complete_with_retry, default_model, extract_json_block

    skel = skel or default_skeleton()
    system, user = render_planner_prompt(req, skel, feedback)
    request = ChatRequest(model or default_model(), [("system", system), ("user", user)])
    kw = {} if sleep is None else {"sleep": sleep}
    last = None
    for _ in range(reprompts + 1):
        reply = complete_with_retry(client, request, retries=retries, timeout=timeout, **kw)
        try:
            doc = extract_json_block(reply)
            return parse_guidance(doc, req, skel)
        except ParseFailure as exc:
            last = exc
            request = request.with_message("assistant", reply).with_message(
                "user", f"That reply could not be used ({exc}). Answer again with one fenced JSON "
                        "block in the requested format.")
    raise ParseFailure(f"no valid guidance after {reprompts} re-prompts: {last}")


class LLMPlanner(BaseEstimator):
    def __init__(self, client=None, model=None, reprompts=2, retries=2, timeout=30.0):
        self.client = client
        self.model = model
        self.reprompts = reprompts
        self.retries = retries
        self.timeout = timeout

    def fit(self, skeleton=None):
        self.skeleton_ = skeleton or default_skeleton()
        return self

    def predict(self, req: PlanRequest, feedback=None) -> GuidanceSpec:
        skel = getattr(self, "skeleton_", None) or default_skeleton()
        return plan_llm(req, skel, self.client, model=self.model, reprompts=self.reprompts,
                        retries=self.retries, timeout=self.timeout, feedback=feedback)


# re-exported for callers that only need cell codes
__all__ = ["GuidanceSpec", "PlanRequest", "astar_path", "plan_rule_based", "plan_llm",
           "RuleBasedPlanner", "LLMPlanner", "classify_action", "FREE", "OBSTACLE", "TARGET"]
