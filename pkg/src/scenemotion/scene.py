"""Scene compiler: labeled boxes to road map, target height map and target box.

Input scenes are already segmented: every object carries a label, an
oriented bounding box and optionally its points. Compilation locates the
queried target, projects boxes onto the ground plane into a road map and
projects the target's points into a height map.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from ._validation import check_points, check_scalar
from .exceptions import InvalidCellSize, NoMatch, ParseFailure
from .geometry import OrientedBox, SceneField

FREE, OBSTACLE, TARGET = 0, 1, 2
ASCII_CODES = {FREE: ".", OBSTACLE: "#", TARGET: "T"}
NODATA = -1.0

DEFAULT_CELL = 0.25
WALK_HEIGHT = 2.0
GROUND_CLEARANCE = 0.1

_OVERLAP_EPS = 1e-9


# ---------------------------------------------------------------------------
# Scene description
# ---------------------------------------------------------------------------

@dataclass
class SceneObject:
    id: int
    label: str
    box: OrientedBox
    points: np.ndarray | None = None

    def __post_init__(self):
        if isinstance(self.id, bool) or not isinstance(self.id, (int, np.integer)):
            raise ValueError(f"object ids must be integers, got {self.id!r}")
        self.id = int(self.id)
        if not str(self.label).strip():
            raise ValueError(f"object {self.id} has an empty label")
        self.label = str(self.label)
        if self.points is not None:
            self.points = check_points(self.points, f"points of object {self.id}").reshape(-1, 3)


@dataclass
class Scene:
    objects: list
    world_min: np.ndarray
    world_max: np.ndarray
    ground_z: float = 0.0
    name: str = "scene"
    start: tuple | None = None

    def __post_init__(self):
        if self.start is not None:
            self.start = tuple(float(v) for v in np.asarray(self.start, float).reshape(2))
        self.world_min = np.asarray(self.world_min, float).reshape(3)
        self.world_max = np.asarray(self.world_max, float).reshape(3)
        if np.any(self.world_min >= self.world_max):
            raise ValueError("world_min must be strictly below world_max")
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("object ids must be unique")
        for o in self.objects:
            if o.points is not None and len(o.points):
                if np.any(o.points < self.world_min - 1e-9) or np.any(o.points > self.world_max + 1e-9):
                    raise ValueError(f"points of object {o.id} fall outside the world AABB")
        self.ground_z = float(self.ground_z)

    def get(self, object_id) -> SceneObject:
        for o in self.objects:
            if o.id == object_id:
                return o
        raise NoMatch(f"no object with id {object_id!r}")

    def field(self) -> SceneField:
        return SceneField([o.box for o in self.objects], (self.world_min, self.world_max))

    def translated(self, offset):
        offset = np.asarray(offset, float)
        objs = [SceneObject(o.id, o.label, o.box.translated(offset),
                            None if o.points is None else o.points + offset)
                for o in self.objects]
        start = None if self.start is None else np.asarray(self.start) + offset[:2]
        return Scene(objs, self.world_min + offset, self.world_max + offset,
                     self.ground_z + offset[2], self.name, start)

    # -- I/O ---------------------------------------------------------------

    @classmethod
    def from_dict(cls, doc, base_dir=None):
        aabb = doc["world_aabb"]
        if isinstance(aabb, dict):
            lo, hi = aabb["min"], aabb["max"]
        else:
            lo, hi = aabb
        objects = []
        for od in doc.get("objects", []):
            pts = od.get("points")
            if pts is not None:
                pts = np.asarray(pts, float)
                if pts.ndim == 1:
                    if len(pts) % 3:
                        raise ValueError(f"object {od.get('id')}: flat points length not a multiple of 3")
                    pts = pts.reshape(-1, 3)
            if od.get("ply"):
                ply = Path(od["ply"])
                if base_dir is not None and not ply.is_absolute():
                    ply = Path(base_dir) / ply
                loaded = read_ascii_ply(ply)
                pts = loaded if pts is None else np.concatenate([pts, loaded])
            box = OrientedBox(od["center"], od["half_extents"], od.get("yaw", 0.0))
            objects.append(SceneObject(od["id"], od["label"], box, pts))
        return cls(objects, lo, hi, doc.get("ground_z", 0.0), doc.get("name", "scene"), doc.get("start"))

    def to_dict(self):
        objs = []
        for o in self.objects:
            d = {"id": o.id, "label": o.label, **o.box.to_dict()}
            if o.points is not None:
                d["points"] = o.points.ravel().tolist()
            objs.append(d)
        doc = {"name": self.name, "objects": objs,
               "world_aabb": {"min": self.world_min.tolist(), "max": self.world_max.tolist()},
               "ground_z": self.ground_z}
        if self.start is not None:
            doc["start"] = list(self.start)
        return doc


def load_scene(path) -> Scene:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        raise ValueError("a PLY file holds one object's points; reference it from a scene JSON")
    with open(path) as fh:
        doc = json.load(fh)
    return Scene.from_dict(doc, base_dir=path.parent)


def read_ascii_ply(path) -> np.ndarray:
    """Vertex ``x y z`` columns of an ASCII PLY file as ``(P, 3)``."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n_vertex, props, in_vertex, fmt = 0, [], False, None
    i = 1
    while i < len(lines):
        tok = lines[i].split()
        i += 1
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            break
    if fmt != "ascii":
        raise ValueError(f"{path}: only ASCII PLY is supported (format {fmt})")
    try:
        cols = [props.index(c) for c in ("x", "y", "z")]
    except ValueError:
        raise ValueError(f"{path}: vertex element lacks x/y/z properties") from None
    rows = [lines[i + k].split() for k in range(n_vertex)]
    data = np.array([[float(r[c]) for c in cols] for r in rows]).reshape(-1, 3)
    return data


# ---------------------------------------------------------------------------
# Target location
# ---------------------------------------------------------------------------

_RELATIONS = (
    ("away from", "far"), ("far from", "far"), ("far away from", "far"),
    ("next to", "near"), ("close to", "near"), ("nearest to", "near"),
    ("closest to", "near"), ("near", "near"), ("beside", "near"), ("by", "near"),
)


def _tokens(text):
    out = []
    for t in re.findall(r"[a-z0-9]+", text.lower()):
        if len(t) > 3 and t.endswith("es") and t[:-2].endswith(("sh", "ch", "x")):
            t = t[:-2]
        elif len(t) > 3 and t.endswith("s") and not t.endswith("ss"):
            t = t[:-1]
        out.append(t)
    return out


def _split_relation(query):
    """``(target phrase, relation kind or None, reference phrase)``."""
    q = " " + " ".join(re.findall(r"[a-z0-9]+", query.lower())) + " "
    best = None
    for phrase, kind in sorted(_RELATIONS, key=lambda r: -len(r[0])):
        idx = q.find(f" {phrase} ")
        if idx >= 0 and (best is None or idx < best[0]):
            best = (idx, phrase, kind)
    if best is None:
        return q.strip(), None, ""
    idx, phrase, kind = best
    return q[:idx].strip(), kind, q[idx + len(phrase) + 2:].strip()


def _match_scores(objects, phrase_tokens):
    toks = set(phrase_tokens)
    return {o.id: len(set(_tokens(o.label)) & toks) for o in objects}


class RuleBasedLocator:
    """Label-token matching with ``near`` / ``away from`` disambiguation."""

    def locate(self, scene: Scene, query: str) -> int:
        if not scene.objects:
            raise NoMatch("scene has no objects")
        target_phrase, relation, ref_phrase = _split_relation(query)
        scores = _match_scores(scene.objects, _tokens(target_phrase))
        best = max(scores.values())
        if best == 0:
            raise NoMatch(f"no object label matches {query!r}")
        candidates = sorted((o for o in scene.objects if scores[o.id] == best), key=lambda o: o.id)
        if len(candidates) == 1:
            return candidates[0].id

        if relation is not None:
            ref_scores = _match_scores(scene.objects, _tokens(ref_phrase))
            ref_best = max(ref_scores.values())
            cand_ids = {c.id for c in candidates}
            refs = [o for o in scene.objects if ref_best > 0 and ref_scores[o.id] == ref_best
                    and o.id not in cand_ids]
            if refs:
                ref_xy = np.array([r.box.center[:2] for r in refs])

                def dist(o):
                    return float(np.min(np.linalg.norm(ref_xy - o.box.center[:2], axis=1)))

                if relation == "near":
                    return min(candidates, key=lambda o: (dist(o), o.id)).id
                return min(candidates, key=lambda o: (-dist(o), o.id)).id
        return candidates[0].id


LOCATOR_SYSTEM_PROMPT = (
    "You locate the target object of a human-motion instruction inside a 3D scene. "
    "The scene is given as labeled oriented bounding boxes (metres, Z up, yaw in radians "
    "about Z). Reply with a fenced JSON block of the form {\"target_id\": <id>} and nothing else."
)


class LLMLocator:
    """Delegates target selection to a chat-completion client."""

    def __init__(self, client, model=None, retries=2, timeout=30.0):
        self.client = client
        self.model = model
        self.retries = retries
        self.timeout = timeout

    def build_request(self, scene: Scene, query: str):
        from .llm import ChatRequest, default_model

        boxes = [{"id": o.id, "label": o.label,
                  "center": np.round(o.box.center, 4).tolist(),
                  "half_extents": np.round(o.box.half_extents, 4).tolist(),
                  "yaw": round(o.box.yaw, 4)}
                 for o in sorted(scene.objects, key=lambda o: o.id)]
        user = (f"Instruction: {query}\nObjects:\n{json.dumps(boxes, sort_keys=True)}\n"
                "Which object id is the target?")
        return ChatRequest(model=self.model or default_model(),
                           messages=[("system", LOCATOR_SYSTEM_PROMPT), ("user", user)])

    def locate(self, scene: Scene, query: str) -> int:
        from .llm import complete_with_retry, extract_json_block

        if not scene.objects:
            raise NoMatch("scene has no objects")
        reply = complete_with_retry(self.client, self.build_request(scene, query),
                                    retries=self.retries, timeout=self.timeout)
        doc = extract_json_block(reply)
        if not isinstance(doc, dict) or "target_id" not in doc:
            raise ParseFailure("locator reply lacks a target_id field")
        tid = doc["target_id"]
        if not any(o.id == tid for o in scene.objects):
            raise NoMatch(f"LLM picked unknown object id {tid!r}")
        return tid


def locate_target(scene: Scene, query: str, locator=None) -> int:
    if locator is None or locator == "rule":
        locator = RuleBasedLocator()
    return locator.locate(scene, query)


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------

@dataclass
class RoadMap:
    """Ground-plane grid; ``cells[iy, ix]``, ``iy`` grows toward +Y (north)."""

    origin: np.ndarray
    cell: float
    cells: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, float).reshape(2)
        self.cells = np.asarray(self.cells, dtype=np.int8)

    @property
    def width(self):
        return self.cells.shape[1]

    @property
    def height(self):
        return self.cells.shape[0]

    def cell_center(self, ix, iy):
        return self.origin + (np.array([ix, iy], float) + 0.5) * self.cell

    def cell_of(self, xy):
        ix, iy = np.floor((np.asarray(xy, float) - self.origin) / self.cell).astype(int)
        return int(ix), int(iy)

    def in_grid(self, ix, iy):
        return 0 <= ix < self.width and 0 <= iy < self.height

    def to_ascii(self):
        rows = []
        for iy in range(self.height - 1, -1, -1):
            rows.append("".join(ASCII_CODES[int(c)] for c in self.cells[iy]))
        return "\n".join(rows) + "\n"

    def to_dict(self):
        return {"origin": self.origin.tolist(), "cell": self.cell,
                "width": self.width, "height": self.height,
                "rows": self.to_ascii().splitlines()[::-1]}

    @classmethod
    def from_dict(cls, doc):
        lookup = {v: k for k, v in ASCII_CODES.items()}
        cells = np.array([[lookup[ch] for ch in row] for row in doc["rows"]], dtype=np.int8)
        return cls(doc["origin"], float(doc["cell"]), cells)


@dataclass
class HeightMap:
    origin: np.ndarray
    cell: float
    heights: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, float).reshape(2)
        self.heights = np.asarray(self.heights, float)

    def cell_center(self, ix, iy):
        return self.origin + (np.array([ix, iy], float) + 0.5) * self.cell

    def valid(self):
        return self.heights != NODATA

    def to_dict(self):
        return {"origin": self.origin.tolist(), "cell": self.cell, "nodata": NODATA,
                "heights": np.round(self.heights, 6).tolist()}

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["origin"], float(doc["cell"]), np.asarray(doc["heights"], float))


@dataclass
class SpatialAuxiliary:
    road_map: RoadMap
    height_map: HeightMap
    target_id: int
    target_box: OrientedBox
    target_label: str = ""
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        return {"target_id": self.target_id, "target_label": self.target_label,
                "target_box": self.target_box.to_dict(),
                "road_map": self.road_map.to_dict(), "height_map": self.height_map.to_dict()}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, doc):
        tb = doc["target_box"]
        return cls(RoadMap.from_dict(doc["road_map"]), HeightMap.from_dict(doc["height_map"]),
                   doc["target_id"], OrientedBox(tb["center"], tb["half_extents"], tb["yaw"]),
                   doc.get("target_label", ""))


def _check_cell(cell):
    return float(check_scalar(cell, "cell", min_val=0.0, include_min=False, exc=InvalidCellSize))


def _grid_shape(extent, cell):
    return max(1, int(math.ceil(extent / cell - 1e-9)))


def _rect_overlaps_polygon(lo, hi, poly):
    """Positive-area overlap of an axis-aligned rectangle and a convex polygon (SAT)."""
    rect = np.array([[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]])
    axes = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]
    for k in range(len(poly)):
        e = poly[(k + 1) % len(poly)] - poly[k]
        n = np.array([-e[1], e[0]])
        if np.linalg.norm(n) > 0:
            axes.append(n / np.linalg.norm(n))
    for ax in axes:
        a, b = rect @ ax, poly @ ax
        if min(a.max(), b.max()) - max(a.min(), b.min()) <= _OVERLAP_EPS:
            return False
    return True


def _footprint_cells(box: OrientedBox, origin, cell, shape):
    """Grid cells ``(ix, iy)`` whose squares overlap the box's XY footprint."""
    H, W = shape
    poly = box.footprint()
    lo_i = np.floor((poly.min(axis=0) - origin) / cell).astype(int)
    hi_i = np.floor((poly.max(axis=0) - origin) / cell).astype(int)
    out = []
    for iy in range(max(lo_i[1], 0), min(hi_i[1], H - 1) + 1):
        for ix in range(max(lo_i[0], 0), min(hi_i[0], W - 1) + 1):
            c_lo = origin + np.array([ix, iy]) * cell
            if _rect_overlaps_polygon(c_lo, c_lo + cell, poly):
                out.append((ix, iy))
    return out


def build_road_map(scene: Scene, target_id, cell=DEFAULT_CELL, *, walk_height=WALK_HEIGHT,
                   ground_clearance=GROUND_CLEARANCE) -> RoadMap:
    cell = _check_cell(cell)
    target = scene.get(target_id)
    origin = scene.world_min[:2].copy()
    extent = scene.world_max[:2] - scene.world_min[:2]
    shape = (_grid_shape(extent[1], cell), _grid_shape(extent[0], cell))
    cells = np.full(shape, FREE, dtype=np.int8)
    for o in scene.objects:
        if o.id == target.id:
            continue
        if o.box.bottom - scene.ground_z >= walk_height or o.box.top - scene.ground_z <= ground_clearance:
            continue
        for ix, iy in _footprint_cells(o.box, origin, cell, shape):
            cells[iy, ix] = OBSTACLE
    for ix, iy in _footprint_cells(target.box, origin, cell, shape):
        cells[iy, ix] = TARGET
    return RoadMap(origin, cell, cells)


def build_height_map(scene: Scene, target_id, cell=DEFAULT_CELL) -> HeightMap:
    """Per-cell maximum height of the target above the ground.

    The grid is snapped to the road-map lattice and spans the target's
    footprint. A target without points is rasterised from its box top.
    """
    cell = _check_cell(cell)
    target = scene.get(target_id)
    poly = target.box.footprint()
    world = scene.world_min[:2]
    lo_i = np.floor((poly.min(axis=0) - world) / cell + 1e-9).astype(int)
    hi_i = np.ceil((poly.max(axis=0) - world) / cell - 1e-9).astype(int)
    shape = (max(1, hi_i[1] - lo_i[1]), max(1, hi_i[0] - lo_i[0]))
    origin = world + lo_i * cell
    heights = np.full(shape, NODATA)

    if target.points is not None and len(target.points):
        rel = (target.points[:, :2] - origin) / cell
        idx = np.floor(rel).astype(int)
        for axis, n in ((0, shape[1]), (1, shape[0])):
            # points exactly on the far edge belong to the last cell
            on_edge = np.isclose(rel[:, axis], n)
            idx[on_edge, axis] = n - 1
        inside = (idx[:, 0] >= 0) & (idx[:, 0] < shape[1]) & (idx[:, 1] >= 0) & (idx[:, 1] < shape[0])
        z = np.maximum(target.points[:, 2] - scene.ground_z, 0.0)
        for (ix, iy), h in zip(idx[inside], z[inside]):
            if h > heights[iy, ix]:
                heights[iy, ix] = h
    else:
        top = max(target.box.top - scene.ground_z, 0.0)
        for ix, iy in _footprint_cells(target.box, origin, cell, shape):
            heights[iy, ix] = top
    return HeightMap(origin, cell, heights)


def compile_scene(scene: Scene, query: str, locator=None, cell=DEFAULT_CELL, **road_kw) -> SpatialAuxiliary:
    target_id = locate_target(scene, query, locator)
    target = scene.get(target_id)
    return SpatialAuxiliary(build_road_map(scene, target_id, cell, **road_kw),
                            build_height_map(scene, target_id, cell),
                            target_id, target.box, target.label)


class SceneCompiler(BaseEstimator):
    """Estimator facade: ``fit`` a scene, ``transform`` a query into an auxiliary.

    ``locator`` is ``"rule"`` or any object with ``locate(scene, query)``.
    """

    def __init__(self, cell_size=DEFAULT_CELL, locator="rule", walk_height=WALK_HEIGHT,
                 ground_clearance=GROUND_CLEARANCE):
        self.cell_size = cell_size
        self.locator = locator
        self.walk_height = walk_height
        self.ground_clearance = ground_clearance

    def fit(self, scene: Scene, y=None):
        _check_cell(self.cell_size)
        if not isinstance(scene, Scene):
            raise TypeError("SceneCompiler.fit expects a Scene")
        self.scene_ = scene
        self.field_ = scene.field()
        return self

    def transform(self, query):
        if not hasattr(self, "scene_"):
            raise NotFittedError("call fit(scene) before transform")
        if isinstance(query, str):
            return compile_scene(self.scene_, query, self.locator, self.cell_size,
                                 walk_height=self.walk_height, ground_clearance=self.ground_clearance)
        return [self.transform(q) for q in query]

    def fit_transform(self, scene, query):
        return self.fit(scene).transform(query)
