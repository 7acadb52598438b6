"""Training-free, scene-aware text-to-motion toolkit.

Pipeline: compile a labelled box scene into a road map and height map,
plan sparse joint guidance from a text instruction, run a guided DDPM
sampler over skeleton poses, then gate the result with geometric checks.
"""
from .body import MotionSequence, Pose, SkeletonDef, default_skeleton
from .checker import CheckReport, Thresholds, check, run_with_retry
from .config import Config, load_config
from .diffusion import DiffusionSchedule, GaussianPriorDenoiser, GuidanceConfig, GuidedMotionSampler
from .geometry import OrientedBox, SceneField, scene_sdf, scene_sdf_grad
from .metrics import EvalResult, body_to_goal, contact, non_collision
from .pipeline import run_pipeline
from .planner import GuidanceSpec, LLMPlanner, PlanRequest, RuleBasedPlanner, astar_path
from .scene import Scene, SceneCompiler, SpatialAuxiliary, compile_scene, load_scene

__version__ = "0.1.0"
