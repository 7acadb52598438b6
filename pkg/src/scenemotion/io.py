"""File formats: motion JSON, positions CSV, schema validation, atomic writes."""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .body import MotionSequence, SkeletonDef, default_skeleton, fk
from .exceptions import SchemaError

SCHEMAS = ("scene", "auxiliary", "guidance", "motion", "report", "eval")


@lru_cache(maxsize=None)
def load_schema(name):
    if name not in SCHEMAS:
        raise KeyError(f"unknown schema {name!r}")
    text = resources.files("scenemotion").joinpath(f"data/schemas/{name}.schema.json").read_text()
    return json.loads(text)


def validate(doc, name):
    try:
        jsonschema.validate(doc, load_schema(name))
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaError(f"{name} document invalid at {path}: {exc.message}") from None
    return doc


def atomic_write(path, text):
    """Write ``text`` to a temp file beside ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(doc):
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def write_json(path, doc, schema=None):
    if schema is not None:
        validate(doc, schema)
    atomic_write(path, dumps(doc))


def read_json(path, schema=None):
    with open(path) as fh:
        doc = json.load(fh)
    if schema is not None:
        validate(doc, schema)
    return doc


# ---------------------------------------------------------------------------
# Motion files
# ---------------------------------------------------------------------------

def motion_to_dict(m: MotionSequence):
    return {"fps": float(m.fps), "skeleton": m.skeleton_name,
            "frames": [{"root": m.roots[f].tolist(), "rotations": m.rotations[f].tolist()}
                       for f in range(m.n_frames)]}


def motion_from_dict(doc) -> MotionSequence:
    validate(doc, "motion")
    n_joints = {len(fr["rotations"]) for fr in doc["frames"]}
    if len(n_joints) != 1:
        raise SchemaError("every frame must carry the same number of rotations")
    roots = np.array([fr["root"] for fr in doc["frames"]], float)
    rots = np.array([fr["rotations"] for fr in doc["frames"]], float)
    if not (np.all(np.isfinite(roots)) and np.all(np.isfinite(rots))):
        raise SchemaError("motion values must be finite")
    return MotionSequence(roots, rots, doc["fps"], doc["skeleton"])


def positions_csv(m: MotionSequence, skel: SkeletonDef | None = None):
    skel = skel or default_skeleton()
    pos = fk(m.to_array(), skel)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame", "joint", "x", "y", "z"])
    for f in range(len(pos)):
        for j, name in enumerate(skel.names):
            w.writerow([f, name, *(repr(float(v)) for v in pos[f, j])])
    return buf.getvalue()


def write_motion(path, m: MotionSequence, skel=None, csv_path=None):
    """Motion JSON plus the derived positions CSV (``<stem>.positions.csv`` by default)."""
    path = Path(path)
    doc = validate(motion_to_dict(m), "motion")
    text = dumps(doc)
    table = positions_csv(m, skel)
    csv_path = Path(csv_path) if csv_path else path.with_name(path.stem + ".positions.csv")
    atomic_write(csv_path, table)
    atomic_write(path, text)
    return path, csv_path


def read_motion(path) -> MotionSequence:
    with open(path) as fh:
        return motion_from_dict(json.load(fh))
