"""End-to-end run: compile, plan, sample, check, re-plan."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .body import default_skeleton
from .checker import RetryLog, Thresholds, check, run_with_retry
from .config import Config
from .diffusion import (
    DiffusionSchedule,
    GaussianPriorDenoiser,
    GuidanceConfig,
    rest_prior_mean,
    sample,
)
from .exceptions import PlanningError, UnknownAction
from .planner import (
    LLMPlanner,
    PlanRequest,
    RuleBasedPlanner,
    classify_action,
    posture_prior,
)
from .scene import FREE, LLMLocator, Scene, SceneCompiler

log = logging.getLogger(__name__)

CONTACT_ACTIONS = ("sit", "lie")


@dataclass
class RunResult:
    aux: object
    guidance: object
    motion: object
    report: object
    iterations: int
    retry_log: RetryLog
    seed: int


def default_start(scene: Scene, aux, cfg: Config):
    """Configured start, else the scene's, else the free cell nearest the room centre."""
    if cfg.start is not None:
        return cfg.start
    if scene.start is not None:
        return scene.start
    rm = aux.road_map
    iy, ix = np.nonzero(rm.cells == FREE)
    if ix.size == 0:
        raise PlanningError("road map has no free cell to start from")
    centers = rm.origin + (np.column_stack([ix, iy]) + 0.5) * rm.cell
    mid = 0.5 * (scene.world_min[:2] + scene.world_max[:2])
    k = int(np.argmin(np.linalg.norm(centers - mid, axis=1)))
    return tuple(centers[k])


def perturbed_start(aux, start, attempt):
    """Attempt 0 keeps ``start``; later attempts move to the next free neighbour cell."""
    if attempt == 0:
        return tuple(start)
    rm = aux.road_map
    ix, iy = rm.cell_of(start)
    ring = [(1, 0), (0, 1), (-1, 0), (0, -1), (1, 1), (-1, 1), (-1, -1), (1, -1)]
    free = [(ix + dx, iy + dy) for dx, dy in ring
            if rm.in_grid(ix + dx, iy + dy) and rm.cells[iy + dy, ix + dx] == FREE]
    if not free:
        return tuple(start)
    return tuple(rm.cell_center(*free[(attempt - 1) % len(free)]))


def action_of(text):
    try:
        return classify_action(text)
    except UnknownAction:
        return None


def build_denoiser(cfg: Config, g, text, skel):
    if cfg.prior_kind == "rest":
        mean = rest_prior_mean(skel, g.n_frames, cfg.root_height)
    else:
        mean = posture_prior(g, text if action_of(text) else "", skel, cfg.root_height)
    return GaussianPriorDenoiser(mean, cfg.prior_sigma)


def run_pipeline(scene: Scene, text: str, cfg: Config | None = None, client=None, skel=None,
                 log_to: RetryLog | None = None) -> RunResult:
    cfg = cfg or Config()
    skel = skel or default_skeleton()
    locator = LLMLocator(client) if cfg.locator == "llm" else "rule"
    compiler = SceneCompiler(cell_size=cfg.cell, locator=locator).fit(scene)
    aux = compiler.transform(text)
    field = compiler.field_
    schedule = DiffusionSchedule.linear(cfg.n_steps, cfg.beta_start, cfg.beta_end)
    gcfg = GuidanceConfig(lam=cfg.lam, eta=cfg.eta, samples_per_bone=cfg.samples_per_bone,
                          step_mode=cfg.step_mode)
    if cfg.planner == "llm":
        planner = LLMPlanner(client).fit(skel)
    else:
        planner = RuleBasedPlanner().fit(skel)
    start = default_start(scene, aux, cfg)
    thresholds = Thresholds.from_config(cfg)
    require_contact = action_of(text) in CONTACT_ACTIONS
    checker_client = client if cfg.semantics else None

    def generate(attempt, feedback):
        req = PlanRequest(text, aux, perturbed_start(aux, start, attempt) if cfg.planner == "rule" else start,
                          cfg.n_frames, cfg.fps, scene.ground_z)
        g = planner.predict(req, feedback=feedback) if cfg.planner == "llm" else planner.predict(req)
        den = build_denoiser(cfg, g, text, skel)
        seed = cfg.seed + attempt
        motion = sample(den, text, g, field, schedule, gcfg, seed, skel, g.n_frames, cfg.fps)
        return g, motion, seed

    def evaluate(candidate):
        g, motion, _ = candidate
        return check(motion, scene, aux, g, thresholds, checker_client, text=text, skel=skel,
                     require_contact=require_contact, samples_per_bone=cfg.samples_per_bone)

    def replan(attempt, report):
        return report.summary()

    trace = log_to if log_to is not None else RetryLog()
    (g, motion, seed), report, used = run_with_retry(generate, evaluate, cfg.max_iters, replan, trace)
    return RunResult(aux, g, motion, report, used, trace, seed)
