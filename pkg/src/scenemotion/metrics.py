"""Geometric evaluation metrics over generated motions.

Joint positions stand in for "the human" in body-to-goal; capsule surface
samples stand in for "the body" in the collision and contact scores.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .body import MotionSequence, capsule_points, default_skeleton, forward
from .geometry import OrientedBox, SceneField, point_box_distance, scene_sdf

CONTACT_THRESHOLD = 0.05


def _motion_array(motion, skel):
    x = motion.to_array() if isinstance(motion, MotionSequence) else np.asarray(motion, float)
    x = x.reshape(-1, skel.pose_dim)
    if len(x) == 0:
        raise ValueError("motion has no frames")
    return x


def joint_positions(motion, skel=None):
    skel = skel or default_skeleton()
    return forward(_motion_array(motion, skel), skel).positions


def body_points(motion, skel=None, samples_per_bone=4):
    """Capsule surface samples per frame, shape ``(N, P, 3)``."""
    skel = skel or default_skeleton()
    state = forward(_motion_array(motion, skel), skel)
    return capsule_points(state, skel, samples_per_bone)[0]


def body_to_goal(motion, target: OrientedBox, skel=None) -> float:
    """Closest approach of any joint to the target box, 0 when inside."""
    d = point_box_distance(joint_positions(motion, skel).reshape(-1, 3), target)
    return float(np.min(d))


def non_collision_trace(motion, field: SceneField, skel=None, samples_per_bone=4):
    """Per-frame fraction of capsule samples with SDF >= 0."""
    pts = body_points(motion, skel, samples_per_bone)
    if len(field) == 0:
        return np.ones(len(pts))
    sdf = scene_sdf(pts.reshape(-1, 3), field).reshape(pts.shape[:-1])
    return np.mean(sdf >= 0.0, axis=1)


def non_collision(motion, field: SceneField, skel=None, samples_per_bone=4) -> float:
    # every frame has the same number of samples, so the mean of frame means
    # is the mean over all (frame, point) pairs
    return float(np.mean(non_collision_trace(motion, field, skel, samples_per_bone)))


def contact_distance(motion, target: OrientedBox, skel=None, samples_per_bone=4) -> float:
    pts = body_points(motion, skel, samples_per_bone)
    return float(np.min(point_box_distance(pts.reshape(-1, 3), target)))


def contact(motion, target: OrientedBox, skel=None, threshold=CONTACT_THRESHOLD, samples_per_bone=4) -> bool:
    return contact_distance(motion, target, skel, samples_per_bone) < threshold


@dataclass
class EvalResult:
    body_to_goal: float
    non_collision: float
    contact: float
    name: str = ""
    traces: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.non_collision <= 1.0:
            raise ValueError("non_collision must lie in [0, 1]")
        if self.body_to_goal < 0:
            raise ValueError("body_to_goal must be non-negative")

    def row(self):
        return {"name": self.name, "body_to_goal": self.body_to_goal,
                "non_collision": self.non_collision, "contact": self.contact}


def evaluate(motion, field: SceneField, target: OrientedBox, skel=None, threshold=CONTACT_THRESHOLD,
             samples_per_bone=4, name="") -> EvalResult:
    skel = skel or default_skeleton()
    trace = non_collision_trace(motion, field, skel, samples_per_bone)
    joints = joint_positions(motion, skel)
    per_frame_goal = point_box_distance(joints.reshape(-1, 3), target).reshape(joints.shape[:2]).min(axis=1)
    return EvalResult(float(per_frame_goal.min()), float(trace.mean()),
                      float(contact(motion, target, skel, threshold, samples_per_bone)), name,
                      {"non_collision": trace, "body_to_goal": per_frame_goal})


def aggregate(results):
    if not results:
        raise ValueError("nothing to aggregate")
    return {"name": "aggregate",
            "body_to_goal": float(np.mean([r.body_to_goal for r in results])),
            "non_collision": float(np.mean([r.non_collision for r in results])),
            "contact": float(np.mean([r.contact for r in results]))}


def report_json(results):
    return json.dumps({"motions": [r.row() for r in results], "aggregate": aggregate(results)},
                      indent=1, sort_keys=True)


def report_csv(results):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["name", "body_to_goal", "non_collision", "contact"],
                       lineterminator="\n")
    w.writeheader()
    for r in results:
        w.writerow(r.row())
    w.writerow(aggregate(results))
    return buf.getvalue()
