"""Motion checker: gate a generated motion and drive the bounded re-plan loop."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .body import default_skeleton
from .exceptions import LlmFailure, ParseFailure
from .geometry import SceneField, scene_sdf
from .metrics import (
    CONTACT_THRESHOLD,
    body_points,
    body_to_goal,
    contact_distance,
    joint_positions,
    non_collision,
)

log = logging.getLogger(__name__)

MANDATORY = ("in_bounds", "collision_ok", "goal_ok", "guidance_ok")


@dataclass(frozen=True)
class Thresholds:
    bounds_inflation: float = 0.1
    non_collision: float = 0.99
    goal: float = 0.5
    guidance_rmse: float = 0.10
    contact: float = CONTACT_THRESHOLD

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg.bounds_inflation, cfg.non_collision, cfg.goal, cfg.guidance_rmse,
                   cfg.contact_threshold)


@dataclass(frozen=True)
class CheckResult:
    passed: bool | None
    value: float | None
    threshold: float | None
    note: str = ""

    def to_dict(self):
        return {"passed": self.passed, "value": self.value, "threshold": self.threshold, "note": self.note}


@dataclass
class CheckReport:
    checks: dict

    @property
    def passed(self):
        # skipped checks (passed is None) do not gate
        return all(r.passed is not False for r in self.checks.values()) and \
            all(name in self.checks for name in MANDATORY)

    def failures(self):
        return [name for name, r in self.checks.items() if r.passed is False]

    def summary(self):
        lines = []
        for name, r in self.checks.items():
            state = "skipped" if r.passed is None else ("ok" if r.passed else "FAILED")
            val = "n/a" if r.value is None else f"{r.value:.4f}"
            lines.append(f"{name}: {state} (value {val}, threshold {r.threshold}) {r.note}".rstrip())
        return "\n".join(lines)

    def to_dict(self):
        return {"passed": self.passed, "checks": {k: v.to_dict() for k, v in self.checks.items()}}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def guidance_rmse(motion, g, skel=None):
    skel = skel or default_skeleton()
    pos = joint_positions(motion, skel)
    n = min(len(pos), g.n_frames)
    mask = g.mask[:n]
    if not mask.any():
        return 0.0
    err = pos[:n][mask] - g.positions[:n][mask]
    return float(np.sqrt(np.mean(np.sum(err * err, axis=-1))))


def motion_summary(motion, field: SceneField, skel=None, stride=10):
    """Plain-text digest of a motion for the semantic check."""
    skel = skel or default_skeleton()
    pos = joint_positions(motion, skel)
    pelvis = skel.index("pelvis")
    lines = [f"frames: {len(pos)} at {getattr(motion, 'fps', 20.0):g} fps", "pelvis trajectory (frame: x y z):"]
    for f in list(range(0, len(pos), stride)) + ([len(pos) - 1] if (len(pos) - 1) % stride else []):
        x, y, z = pos[f, pelvis]
        lines.append(f"  {f}: {x:.2f} {y:.2f} {z:.2f}")
    if len(field):
        sdf = scene_sdf(body_points(motion, skel).reshape(-1, 3), field)
        lines.append(f"closest body-to-obstacle distance: {float(sdf.min()):.3f} m")
    lines.append("final pose joints:")
    for j, name in enumerate(skel.names):
        x, y, z = pos[-1, j]
        lines.append(f"  {name}: {x:.2f} {y:.2f} {z:.2f}")
    return "\n".join(lines)


def semantic_verdict(client, text, summary, model=None, retries=2, timeout=30.0):
    """``(ok, reason)`` from the LLM; raises LlmFailure or ParseFailure."""
    from .llm import ChatRequest, complete_with_retry, default_model, extract_json_block

    system = resources.files("scenemotion").joinpath("data/prompts/checker_system_v1.txt").read_text()
    req = ChatRequest(model or default_model(),
                      [("system", system), ("user", f"Instruction: {text}\n\nMotion summary:\n{summary}")])
    doc = extract_json_block(complete_with_retry(client, req, retries=retries, timeout=timeout))
    verdict = str(doc.get("verdict", "")).strip().lower() if isinstance(doc, dict) else ""
    if verdict not in ("yes", "no"):
        raise ParseFailure(f"verdict must be yes or no, got {verdict!r}")
    return verdict == "yes", str(doc.get("reason", ""))


def check(motion, scene, aux, g, thresholds: Thresholds | None = None, client=None, *, text="",
          skel=None, require_contact=False, samples_per_bone=4) -> CheckReport:
    """Run every gate on ``motion``. An LLM failure only skips ``semantics_ok``."""
    th = thresholds or Thresholds()
    skel = skel or default_skeleton()
    pos = joint_positions(motion, skel)
    if len(pos) == 0:
        raise ValueError("motion has no frames")
    lo = scene.world_min - th.bounds_inflation
    hi = scene.world_max + th.bounds_inflation
    # signed margin: positive means every joint is inside the inflated box
    margin = float(np.min(np.minimum(pos - lo, hi - pos)))
    field = scene.field()
    target = aux.target_box
    checks = {
        "in_bounds": CheckResult(margin >= 0.0, margin, 0.0, "min margin to inflated world box (m)"),
    }
    nc = non_collision(motion, field, skel, samples_per_bone)
    checks["collision_ok"] = CheckResult(nc >= th.non_collision, nc, th.non_collision)
    d = body_to_goal(motion, target, skel)
    checks["goal_ok"] = CheckResult(d <= th.goal, d, th.goal)
    rmse = guidance_rmse(motion, g, skel)
    checks["guidance_ok"] = CheckResult(rmse <= th.guidance_rmse, rmse, th.guidance_rmse)
    if require_contact:
        cd = contact_distance(motion, target, skel, samples_per_bone)
        checks["contact_ok"] = CheckResult(cd < th.contact, cd, th.contact)
    if client is not None:
        try:
            ok, reason = semantic_verdict(client, text, motion_summary(motion, field, skel))
            checks["semantics_ok"] = CheckResult(ok, float(ok), 1.0, reason)
        except (LlmFailure, ParseFailure) as exc:
            log.warning("semantic check skipped: %s", exc)
            checks["semantics_ok"] = CheckResult(None, None, None, f"skipped: {exc}")
    return CheckReport(checks)


# ---------------------------------------------------------------------------
# Re-plan loop
# ---------------------------------------------------------------------------

@dataclass
class RetryLog:
    """Instrumentation of one :func:`run_with_retry` call."""

    generations: int = 0
    replans: int = 0
    reports: list = field(default_factory=list)


def run_with_retry(generate, evaluate, max_iters=1, replan=None, log_to: RetryLog | None = None):
    """Generate, check, and re-plan at most ``max_iters`` times.

    ``generate(attempt, feedback)`` returns a motion (or any candidate),
    ``evaluate(candidate)`` a CheckReport, and ``replan(attempt, report)``
    the feedback passed to the next generation. Returns
    ``(candidate, report, replans_used)``; the last candidate comes back
    even if it still fails.
    """
    if isinstance(max_iters, bool) or not isinstance(max_iters, int) or max_iters < 0:
        raise ValueError("max_iters must be a non-negative integer")
    trace = log_to if log_to is not None else RetryLog()
    feedback = None
    attempt = 0
    while True:
        candidate = generate(attempt, feedback)
        trace.generations += 1
        report = evaluate(candidate)
        trace.reports.append(report)
        if report.passed or attempt >= max_iters:
            return candidate, report, attempt
        log.info("attempt %d failed (%s), re-planning", attempt, ", ".join(report.failures()))
        feedback = replan(attempt, report) if replan is not None else report.summary()
        attempt += 1
        trace.replans += 1
