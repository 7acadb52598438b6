"""Command-line interface: ``scenemotion compile | run | eval``.

Exit codes:

== ===================================================================
0  success
1  unexpected internal error
2  no scene object matches the query (NoMatch)
3  I/O error: missing or unreadable file, invalid document, nothing to evaluate
4  ``run`` finished but the final check report failed
5  target unreachable on the road map (Unreachable)
6  planning failed: unknown action keyword or too few frames
7  LLM stage failed: transport, unparseable reply, out-of-bounds guidance
8  invalid configuration
== ===================================================================
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import io as sio
from .config import Config, load_config
from .exceptions import (
    BoundsViolation,
    ConfigError,
    LlmFailure,
    NoMatch,
    ParseFailure,
    PlanningError,
    SchemaError,
    UnknownAction,
    Unreachable,
)

log = logging.getLogger("scenemotion")

EXIT_OK, EXIT_INTERNAL, EXIT_NOMATCH, EXIT_IO, EXIT_CHECK = 0, 1, 2, 3, 4
EXIT_UNREACHABLE, EXIT_PLANNING, EXIT_LLM, EXIT_CONFIG = 5, 6, 7, 8

# most specific first
_ERROR_CODES = (
    (NoMatch, EXIT_NOMATCH),
    (Unreachable, EXIT_UNREACHABLE),
    ((UnknownAction, PlanningError), EXIT_PLANNING),
    ((LlmFailure, ParseFailure, BoundsViolation), EXIT_LLM),
    (ConfigError, EXIT_CONFIG),
    ((SchemaError, OSError, json.JSONDecodeError), EXIT_IO),
)


def exit_code_for(exc):
    for types, code in _ERROR_CODES:
        if isinstance(exc, types):
            return code
    return EXIT_INTERNAL


def _make_client(args):
    from .llm import ENV_URL, HttpChatClient, RecordingClient, ReplayClient

    client = None
    if getattr(args, "replay", None):
        client = ReplayClient(args.replay)
    elif os.environ.get(ENV_URL):
        client = HttpChatClient()
    if client is not None and getattr(args, "record", None):
        client = RecordingClient(client)
    return client


def _load_scene(path):
    from .scene import Scene

    path = Path(path)
    if path.suffix.lower() == ".ply":
        raise SchemaError("a bare PLY has no labels; reference it from a scene JSON via 'ply'")
    doc = sio.read_json(path, "scene")
    try:
        return Scene.from_dict(doc, base_dir=path.parent)
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"{path}: malformed scene ({exc})") from exc
    except ValueError as exc:
        if isinstance(exc, (NoMatch, SchemaError)):
            raise
        raise SchemaError(f"{path}: {exc}") from exc


def cmd_compile(args):
    from .scene import LLMLocator, SceneCompiler

    scene = _load_scene(args.scene)
    client = _make_client(args) if args.locator == "llm" else None
    if args.locator == "llm" and client is None:
        raise LlmFailure("--locator llm needs --replay or an endpoint in the environment")
    locator = LLMLocator(client) if client is not None else "rule"
    aux = SceneCompiler(cell_size=args.cell, locator=locator).fit(scene).transform(args.query)
    sio.write_json(args.out, aux.to_dict(), "auxiliary")
    if args.ascii:
        grid = aux.road_map.to_ascii()
        out = Path(args.out)
        sio.atomic_write(out.with_name(out.stem + ".roadmap.txt"), grid)
        sys.stdout.write(grid)
    _finish_recording(args, client)
    return EXIT_OK


def _finish_recording(args, client):
    if getattr(args, "record", None) and client is not None and hasattr(client, "save"):
        client.save(args.record)


def cmd_run(args):
    from .pipeline import run_pipeline

    cfg = load_config(args.config) if args.config else Config()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.max_iters is not None:
        cfg = cfg.replace(max_iters=args.max_iters)
    scene = _load_scene(args.scene)
    client = _make_client(args)
    if client is None and (cfg.planner == "llm" or cfg.locator == "llm"):
        raise LlmFailure("config asks for an LLM stage but no client is available")
    result = run_pipeline(scene, args.text, cfg, client)
    out = Path(args.out)
    report = result.report.to_dict()
    report["iterations"] = result.iterations
    report_path = Path(args.report) if args.report else out.with_name(out.stem + ".report.json")
    sio.validate(report, "report")
    sio.write_motion(out, result.motion)
    sio.write_json(report_path, report, "report")
    if args.guidance:
        sio.write_json(args.guidance, result.guidance.to_dict(), "guidance")
    _finish_recording(args, client)
    print(result.report.summary())
    return EXIT_OK if result.report.passed else EXIT_CHECK


def _target_for(scene, query, motion):
    from .metrics import joint_positions

    if query:
        from .scene import locate_target

        return scene.get(locate_target(scene, query)).box
    # no query: the object the motion ends nearest to
    from .geometry import point_box_distance

    pelvis = joint_positions(motion)[-1, 0]
    return min((o.box for o in scene.objects), key=lambda b: float(point_box_distance(pelvis, b)))


def cmd_eval(args):
    from .metrics import evaluate, report_csv, report_json

    scene = _load_scene(args.scene)
    field = scene.field()
    folder = Path(args.motions)
    if not folder.is_dir():
        raise FileNotFoundError(f"{folder} is not a directory")
    files = sorted(p for p in folder.glob("*.json") if not p.name.endswith(".report.json"))

    def one(path):
        try:
            motion = sio.read_motion(path)
        except (OSError, ValueError) as exc:
            log.warning("skipping %s: %s", path.name, exc)
            return None
        try:
            return evaluate(motion, field, _target_for(scene, args.query, motion),
                            threshold=args.contact_threshold, name=path.stem)
        except ValueError as exc:
            log.warning("skipping %s: %s", path.name, exc)
            return None

    if args.jobs > 1:
        with ThreadPoolExecutor(args.jobs) as pool:
            results = list(pool.map(one, files))
    else:
        results = [one(p) for p in files]
    results = [r for r in results if r is not None]
    if not results:
        print(f"no evaluable motion files in {folder}", file=sys.stderr)
        return EXIT_IO
    out = Path(args.out)
    doc = json.loads(report_json(results))
    sio.validate(doc, "eval")
    json_path = out if out.suffix.lower() != ".csv" else out.with_suffix(".json")
    csv_path = out if out.suffix.lower() == ".csv" else out.with_suffix(".csv")
    sio.write_json(json_path, doc, "eval")
    sio.atomic_write(csv_path, report_csv(results))
    print(f"evaluated {len(results)} of {len(files)} motion files")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="scenemotion", description="Scene-aware text-to-motion toolkit.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("compile", help="scene + query -> spatial auxiliary JSON")
    c.add_argument("--scene", required=True)
    c.add_argument("--query", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--cell", type=float, default=0.25)
    c.add_argument("--locator", choices=("rule", "llm"), default="rule")
    c.add_argument("--ascii", action="store_true", help="also write and print the ASCII road map")
    c.add_argument("--replay", help="LLM transcript to replay instead of calling an endpoint")
    c.add_argument("--record", help="save the LLM transcript here")
    c.set_defaults(func=cmd_compile)

    r = sub.add_parser("run", help="full pipeline: compile, plan, sample, check")
    r.add_argument("--scene", required=True)
    r.add_argument("--text", required=True)
    r.add_argument("--out", required=True, help="motion JSON path")
    r.add_argument("--config")
    r.add_argument("--seed", type=int)
    r.add_argument("--max-iters", type=int, dest="max_iters")
    r.add_argument("--report", help="check report path (default <out stem>.report.json)")
    r.add_argument("--guidance", help="also write the guidance JSON here")
    r.add_argument("--replay")
    r.add_argument("--record")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="metrics over a directory of motion files")
    e.add_argument("--motions", required=True)
    e.add_argument("--scene", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--query", help="target phrase; default is the object each motion ends nearest")
    e.add_argument("--contact-threshold", type=float, default=0.05, dest="contact_threshold")
    e.add_argument("--jobs", type=int, default=1)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # mapped to the documented exit codes
        code = exit_code_for(exc)
        print(f"error: {exc}", file=sys.stderr)
        if code == EXIT_INTERNAL:
            log.exception("internal error")
        return code


if __name__ == "__main__":
    sys.exit(main())
