"""Run configuration loaded from TOML.

Layout (every key optional, unknown sections or keys are rejected)::

    seed = 7
    max_iters = 1

    [schedule]   n_steps, beta_start, beta_end
    [guidance]   lam, eta, samples_per_bone, step_mode
    [prior]      kind ("posture" | "rest"), sigma, root_height
    [scene]      cell, locator ("rule" | "llm")
    [planner]    kind ("rule" | "llm"), n_frames, fps, start = [x, y]
    [checker]    bounds_inflation, non_collision, goal, guidance_rmse,
                 contact_threshold, semantics (bool)
"""
from __future__ import annotations

import dataclasses
import numbers
from dataclasses import dataclass

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .exceptions import ConfigError

SECTIONS = {
    None: ("seed", "max_iters"),
    "schedule": ("n_steps", "beta_start", "beta_end"),
    "guidance": ("lam", "eta", "samples_per_bone", "step_mode"),
    "prior": ("prior_kind", "prior_sigma", "root_height"),
    "scene": ("cell", "locator"),
    "planner": ("planner", "n_frames", "fps", "start"),
    "checker": ("bounds_inflation", "non_collision", "goal", "guidance_rmse",
                "contact_threshold", "semantics"),
}
# TOML key -> field name where they differ
_ALIASES = {("prior", "kind"): "prior_kind", ("prior", "sigma"): "prior_sigma",
            ("planner", "kind"): "planner"}


@dataclass(frozen=True)
class Config:
    seed: int = 0
    max_iters: int = 1
    n_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    lam: float = 2.0
    eta: float = 0.5
    samples_per_bone: int = 4
    step_mode: str = "proximal"
    prior_kind: str = "posture"
    prior_sigma: float = 0.1
    root_height: float = 0.9
    cell: float = 0.25
    locator: str = "rule"
    planner: str = "rule"
    n_frames: int = 120
    fps: float = 20.0
    start: tuple | None = None
    bounds_inflation: float = 0.1
    non_collision: float = 0.99
    goal: float = 0.5
    guidance_rmse: float = 0.10
    contact_threshold: float = 0.05
    semantics: bool = True

    def __post_init__(self):
        ints = ("seed", "max_iters", "n_steps", "samples_per_bone", "n_frames")
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name in ints:
                if isinstance(v, bool) or not isinstance(v, numbers.Integral):
                    raise ConfigError(f"{f.name} must be an integer, got {v!r}")
            elif f.type == "float" and (isinstance(v, bool) or not isinstance(v, numbers.Real)):
                raise ConfigError(f"{f.name} must be a number, got {v!r}")
        for name in ("max_iters", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("n_steps", "n_frames", "samples_per_bone"):
            if getattr(self, name) < (2 if name == "samples_per_bone" else 1):
                raise ConfigError(f"{name} is too small")
        for name in ("fps", "cell", "prior_sigma"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ConfigError("need 0 < beta_start <= beta_end < 1")
        if self.lam < 0 or self.eta < 0:
            raise ConfigError("lam and eta must be non-negative")
        if not 0 <= self.non_collision <= 1:
            raise ConfigError("non_collision threshold must lie in [0, 1]")
        choices = {"step_mode": ("proximal", "explicit"), "prior_kind": ("posture", "rest"),
                   "locator": ("rule", "llm"), "planner": ("rule", "llm")}
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if not isinstance(self.semantics, bool):
            raise ConfigError("semantics must be true or false")
        if self.start is not None:
            start = tuple(self.start)
            if len(start) != 2 or not all(isinstance(v, numbers.Real) for v in start):
                raise ConfigError("start must be [x, y]")
            object.__setattr__(self, "start", tuple(float(v) for v in start))

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def to_dict(self):
        return dataclasses.asdict(self)


def config_from_dict(doc) -> Config:
    kw = {}
    for key, value in doc.items():
        if isinstance(value, dict):
            if key not in SECTIONS or key is None:
                raise ConfigError(f"unknown config section [{key}]")
            for sub, v in value.items():
                name = _ALIASES.get((key, sub), sub)
                if name not in SECTIONS[key]:
                    raise ConfigError(f"unknown key {sub!r} in [{key}]")
                kw[name] = v
        else:
            if key not in SECTIONS[None]:
                raise ConfigError(f"unknown top-level key {key!r}")
            kw[key] = value
    # TOML integers are fine where floats are expected
    floats = {f.name for f in dataclasses.fields(Config) if f.type == "float"}
    for name in floats & kw.keys():
        if isinstance(kw[name], int) and not isinstance(kw[name], bool):
            kw[name] = float(kw[name])
    return Config(**kw)


def load_config(path) -> Config:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(doc)
