"""Command line entry point.

Subcommands: ``validate`` (config/model check), ``plan`` (footsteps only),
``walk`` (headless closed-loop run writing a log bundle), ``serve`` (live
WebSocket session), ``report`` (statistics from a log bundle or an emitted
footstep plan).  ``--json`` switches stdout to machine-readable output,
including error envelopes; exit codes: 0 success, 1 handled error,
2 usage.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import sys
from dataclasses import replace
from pathlib import Path

from .config import (CONFIG_DIR_ENV, ConfigError, LoadedScenario,
                     build_scenario, list_bundled_configs,
                     resolve_config_path, validate_config)
from .footsteps import PlanInfeasibleError
from .report import ReportError, audit_plan, render_text, summarize_bundle
from .simulator import ScenarioError, SimMode, run_scenario

DEFAULT_CONFIGS = {"position": "straight_position",
                   "torque": "straight_torque"}

HANDLED_ERRORS = (ConfigError, ReportError, ScenarioError,
                  PlanInfeasibleError, OSError, ValueError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bipedwalk",
        description="Walking-stack scenario runner: plan footsteps, run "
                    "closed-loop walks, serve live teleoperation sessions, "
                    "and summarize log bundles.",
        epilog=f"Configs resolve against ${CONFIG_DIR_ENV} and the bundled "
               f"set: {', '.join(list_bundled_configs())}.")
    parser.add_argument("--json", action="store_true",
                        help="machine-readable stdout (and error envelopes)")
    sub = parser.add_subparsers(dest="command", required=True)

    val = sub.add_parser("validate",
                         help="check configs against the published schema")
    val.add_argument("--config", help="config name or path "
                                      "(default: every bundled config)")
    val.set_defaults(func=cmd_validate)

    plan = sub.add_parser("plan", help="plan footsteps for a reference")
    plan.add_argument("--config", help="scenario config name or path")
    plan.add_argument("--mode", choices=["position", "torque"],
                      help="gait preset when --config is omitted")
    plan.add_argument("--reference", help="reference CSV "
                                          "(t,xf_x,xf_y,vxf_x,vxf_y)")
    plan.add_argument("--duration", type=float,
                      help="planning horizon override [s]")
    plan.add_argument("--out", help="write the footstep JSON here "
                                    "instead of stdout")
    plan.set_defaults(func=cmd_plan)

    walk = sub.add_parser("walk", help="run a closed-loop scenario headless")
    walk.add_argument("--config", help="scenario config name or path")
    walk.add_argument("--mode", choices=["position", "torque"],
                      help="plant mode (picks the matching default config)")
    walk.add_argument("--duration", type=float, help="simulated time [s]")
    walk.add_argument("--out", help="log bundle directory "
                                    "(default runs/<label>)")
    walk.set_defaults(func=cmd_walk)

    serve = sub.add_parser("serve", help="serve a live session on a "
                                         "WebSocket port")
    serve.add_argument("--config", help="scenario config name or path "
                                        "(default serve_default)")
    serve.add_argument("--mode", choices=["position", "torque"],
                       help="initial plant mode")
    serve.add_argument("--duration", type=float,
                       help="session time budget [s]")
    serve.add_argument("--port", type=int, help="TCP port override")
    serve.add_argument("--host", help="bind address override")
    serve.set_defaults(func=cmd_serve)

    rep = sub.add_parser("report", help="summarize a log bundle or audit "
                                        "a footstep plan")
    rep.add_argument("path", help="bundle directory or footstep plan JSON")
    rep.set_defaults(func=cmd_report)
    return parser


# -- subcommands ----------------------------------------------------------------


def _load(args, default: str | None = None) -> LoadedScenario:
    name = args.config
    if name is None:
        name = default or DEFAULT_CONFIGS[args.mode or "position"]
    loaded = build_scenario(resolve_config_path(name),
                            duration=getattr(args, "duration", None),
                            out=getattr(args, "out", None))
    mode = getattr(args, "mode", None)
    if args.config and mode and SimMode(mode) is not \
            SimMode(loaded.spec.sim.mode):
        matched = DEFAULT_CONFIGS[mode]
        raise ConfigError(
            [f"config '{args.config}' is a {loaded.spec.sim.mode.value}-mode "
             f"scenario; pick a {mode}-mode config (e.g. '{matched}') "
             f"instead of overriding --mode"])
    return loaded


def cmd_validate(args) -> dict:
    names = [args.config] if args.config else list_bundled_configs()
    checked = []
    for name in names:
        path = resolve_config_path(name)
        build_scenario(path)
        checked.append(str(path))
        if not args.json:
            print(f"ok: {path}")
    return {"ok": True, "configs": checked}


def cmd_plan(args) -> dict:
    from .footsteps import FootSide
    from .plan import make_plan, standing_feet
    from .unicycle import SampledReference

    loaded = _load(args)
    setup = loaded.spec.setup
    reference = loaded.spec.program()[0][1]
    if args.reference:
        reference = SampledReference.from_csv(args.reference)
    horizon = args.duration if args.duration else setup.horizon
    setup = replace(setup, horizon=float(horizon))
    initial = standing_feet(m=setup.planner.m)
    plan = make_plan(reference, initial, setup, t0=0.0)
    constraints = setup.planner.constraints
    doc = {
        "type": "footstep_plan",
        "v": 1,
        "label": loaded.spec.label,
        "constraints": {k: float(getattr(constraints, k))
                        for k in ("t_min", "t_max", "d_max", "theta_max",
                                  "w_min")},
        "initial": {side.value: {
            "position": [float(x) for x in initial.pose(side).position],
            "theta": float(initial.pose(side).theta),
            "t_imp": float(initial.t_impact(side))}
            for side in FootSide},
        "steps": [{"side": s.side.value,
                   "position": [float(s.position[0]), float(s.position[1])],
                   "theta": float(s.theta), "t_imp": float(s.t_imp)}
                  for s in plan.steps],
        "end_time": float(plan.end_time),
        "horizon_exhausted": bool(plan.horizon_exhausted),
    }
    text = json.dumps(doc, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        if not args.json:
            print(f"wrote {args.out} ({len(plan.steps)} steps)")
        return {"ok": True, "out": args.out, "n_steps": len(plan.steps)}
    print(text)
    return None


def cmd_walk(args) -> dict:
    loaded = _load(args)
    outdir = loaded.out or Path("runs") / loaded.spec.label
    result = run_scenario(loaded.model, loaded.spec, outdir=outdir)
    summary = {
        "ok": True,
        "label": result.label,
        "mode": result.mode.value,
        "outdir": str(outdir),
        "ticks": result.ticks,
        "steps_completed": result.steps_completed,
        "warnings": result.warnings,
        "wall_time": round(result.wall_time, 3),
    }
    if not args.json:
        print(f"{result.label}: {result.ticks} ticks, "
              f"{result.steps_completed} steps, "
              f"{result.wall_time:.1f} s wall -> {outdir}")
        for warning in result.warnings:
            print(f"warning: {warning}")
    return summary


def cmd_serve(args) -> dict:
    from .service import _live_spec, serve_session

    loaded = _load(args, default="serve_default")
    if args.mode and SimMode(args.mode) is not SimMode(loaded.spec.sim.mode):
        loaded = replace(loaded, spec=_live_spec(loaded.spec,
                                                 SimMode(args.mode)))
    host = args.host if args.host is not None else loaded.serve["host"]
    port = args.port if args.port is not None else loaded.serve["port"]
    if not args.json:
        print(f"serving '{loaded.spec.label}' on ws://{host}:{port} "
              f"(mode {loaded.spec.sim.mode.value}, Ctrl-C stops)")
    try:
        asyncio.run(serve_session(loaded, host=host, port=port))
    except KeyboardInterrupt:
        pass
    return {"ok": True, "host": host, "port": port}


def cmd_report(args) -> dict:
    path = Path(args.path)
    if path.is_dir():
        summary = summarize_bundle(path)
    else:
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as err:
            raise ReportError(f"{path}: not JSON ({err}); expected a "
                              "bundle directory or a footstep plan") from err
        summary = audit_plan(doc)
    if not args.json:
        print(render_text(summary))
    return summary


# -- driver ---------------------------------------------------------------------


def _error_payload(err: Exception) -> dict:
    payload = {"type": type(err).__name__, "message": str(err)}
    if isinstance(err, ConfigError):
        payload["details"] = err.errors
    if isinstance(err, ScenarioError):
        payload["details"] = {"tick": err.tick, "t": err.t,
                              "layer": err.layer}
    return {"error": payload}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        result = args.func(args)
    except HANDLED_ERRORS as err:
        if args.json:
            print(json.dumps(_error_payload(err)))
        else:
            print(f"error: {err}", file=sys.stderr)
        return 1
    if args.json and result is not None:
        print(json.dumps(result))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
