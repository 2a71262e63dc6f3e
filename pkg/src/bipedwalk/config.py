"""Scenario configuration files.

JSON documents validated against the published schema
(``schemas/scenario.json``) and resolved into runnable scenario
specifications.  Every field is optional and defaults to the standing
scenario on the bundled 12-DoF model, so a config only states what it
changes.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from jsonschema import Draft202012Validator

from .footsteps import CostWeights, PlannerConfig, StepConstraints
from .plan import PlanningSetup, feet_midpose, standing_feet
from .rigid_body import RobotModel, bundled_model, load_model
from .simulator import ScenarioSpec, SimConfig
from .unicycle import (ConstantReference, LineReference, ReferenceSignal,
                       SampledReference, UnicycleParams)
from .whole_body import ContactSpec, TaskGains, WbcWeights

CONFIG_DIR_ENV = "BIPEDWALK_CONFIG_DIR"

SCHEMA_VERSION = 1

SERVE_DEFAULTS = {
    "host": "127.0.0.1",
    "port": 8765,
    "telemetry_hz": 50.0,
    "s_fwd": 0.4,     # joystick full deflection, metres forward
    "s_lat": 0.2,     # joystick full deflection, metres lateral
    "realtime": True,
}


class ConfigError(ValueError):
    """Configuration rejected; carries one message per violation."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


def scenario_schema() -> dict:
    from importlib.resources import files
    text = files("bipedwalk").joinpath("schemas/scenario.json").read_text()
    return json.loads(text)


def bundled_config_dir() -> Path:
    from importlib.resources import files
    return Path(str(files("bipedwalk").joinpath("configs")))


def list_bundled_configs() -> list[str]:
    return sorted(p.stem for p in bundled_config_dir().glob("*.json"))


def resolve_config_path(name: str) -> Path:
    """Resolve a --config argument: explicit path, then the directory in
    $BIPEDWALK_CONFIG_DIR, then the configs shipped with the package."""
    direct = Path(name)
    if direct.is_file():
        return direct
    candidates = [name if name.endswith(".json") else name + ".json"]
    roots = []
    env_dir = os.environ.get(CONFIG_DIR_ENV)
    if env_dir:
        roots.append(Path(env_dir))
    roots.append(bundled_config_dir())
    for root in roots:
        for cand in candidates:
            p = root / cand
            if p.is_file():
                return p
    raise ConfigError([f"config '{name}' not found (looked for a file, "
                       f"${CONFIG_DIR_ENV}, and bundled configs "
                       f"{list_bundled_configs()})"])


def validate_config(doc: dict) -> None:
    validator = Draft202012Validator(scenario_schema())
    errors = []
    for err in sorted(validator.iter_errors(doc), key=lambda e: list(e.path)):
        where = "/".join(str(p) for p in err.path) or "<root>"
        errors.append(f"{where}: {err.message}")
    if errors:
        raise ConfigError(errors)


def load_config(source) -> tuple[dict, Path]:
    """Parse and validate a config; returns (document, base directory)."""
    if isinstance(source, dict):
        validate_config(source)
        return source, Path.cwd()
    path = Path(source)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as err:
        raise ConfigError([f"cannot read config: {err}"]) from err
    except json.JSONDecodeError as err:
        raise ConfigError([f"config is not valid JSON: {err}"]) from err
    if not isinstance(doc, dict):
        raise ConfigError(["config root must be a JSON object"])
    validate_config(doc)
    return doc, path.parent


@dataclass
class LoadedScenario:
    """A validated config resolved into runnable objects."""

    spec: ScenarioSpec
    model: RobotModel
    live: bool                  # reference comes from operator commands
    out: Path | None
    serve: dict


def _dataclass_from(cls, doc: dict, **overrides):
    kwargs = dict(doc)
    kwargs.update(overrides)
    kwargs = {k: (tuple(v) if isinstance(v, list) else v)
              for k, v in kwargs.items()}
    return cls(**kwargs)


def _planning_setup(doc: dict) -> PlanningSetup:
    uni = dict(doc.get("unicycle", {}))
    if "k" in uni:
        uni["K"] = np.diag(np.asarray(uni.pop("k"), dtype=float))
    if "d" in uni:
        uni["d"] = np.asarray(uni["d"], dtype=float)
    planner_doc = dict(doc.get("planner", {}))
    constraints = _dataclass_from(StepConstraints,
                                  planner_doc.pop("constraints", {}))
    weights = _dataclass_from(CostWeights, planner_doc.pop("weights", {}))
    planner = _dataclass_from(PlannerConfig, planner_doc,
                              constraints=constraints, weights=weights)
    top = {k: doc[k] for k in ("horizon", "dt", "switch_ratio", "apex")
           if k in doc}
    return PlanningSetup(unicycle=_dataclass_from(UnicycleParams, uni),
                         planner=planner, **top)


def standing_control_point(setup: PlanningSetup) -> np.ndarray:
    """Reference point of the symmetric standing pose (plan origin)."""
    initial = standing_feet(m=setup.planner.m)
    mid = feet_midpose(initial.left, initial.right)
    return mid.control_point(setup.unicycle.d)


def _reference(doc: dict, setup: PlanningSetup,
               base_dir: Path) -> tuple[ReferenceSignal, bool]:
    source = doc.get("source", "constant")
    home = standing_control_point(setup)
    if source == "live":
        return ConstantReference(position=home), True
    if source == "constant":
        return ConstantReference(
            position=doc.get("position", home)), False
    if source == "line":
        return LineReference(start=doc.get("start", home),
                             velocity=doc["velocity"],
                             t0=doc.get("t0", 0.0),
                             t_stop=doc.get("t_stop", np.inf)), False
    if source == "file":
        path = Path(doc["path"])
        if not path.is_absolute():
            path = base_dir / path
        try:
            return SampledReference.from_csv(path), False
        except (OSError, ValueError) as err:
            raise ConfigError([f"reference/path: {err}"]) from err
    raise ConfigError([f"reference/source: unknown source '{source}'"])


def _load_robot(name: str, base_dir: Path) -> RobotModel:
    if "/" not in name and not name.endswith(".json"):
        try:
            return bundled_model(name)
        except FileNotFoundError:
            raise ConfigError(
                [f"model: no bundled model named '{name}'"]) from None
    path = Path(name)
    if not path.is_absolute():
        path = base_dir / path
    try:
        return load_model(path)
    except (OSError, ValueError) as err:
        raise ConfigError([f"model: {err}"]) from err


def build_scenario(source, mode: str | None = None,
                   duration: float | None = None,
                   out: str | None = None) -> LoadedScenario:
    """Resolve a config (path or dict) into a LoadedScenario.

    mode/duration/out override the config when given (CLI flags)."""
    doc, base_dir = load_config(source)
    setup = _planning_setup(doc.get("planning", {}))
    reference, live = _reference(doc.get("reference", {}), setup, base_dir)
    sim = _dataclass_from(SimConfig, doc.get("sim", {}),
                          mode=mode or doc.get("mode", "position"))
    mpc = doc.get("mpc", {})
    spec = ScenarioSpec(
        setup=setup,
        reference=reference,
        duration=float(duration if duration is not None
                       else doc.get("duration", 10.0)),
        sim=sim,
        gains=_dataclass_from(TaskGains, doc.get("gains", {})),
        contact=_dataclass_from(ContactSpec, doc.get("contact", {})),
        weights=_dataclass_from(WbcWeights, doc.get("wbc_weights", {})),
        mpc_dt=mpc.get("dt", 0.02),
        mpc_nodes=mpc.get("nodes", 100),
        mpc_q_weight=mpc.get("q_weight", 1.0),
        mpc_r_weight=mpc.get("r_weight", 1e-6),
        support_margin=doc.get("support_margin", 0.005),
        knee_bend=doc.get("knee_bend", 0.3),
        label=doc.get("label", "scenario"),
        seed=doc.get("seed", 0),
    )
    out_value = out if out is not None else doc.get("out")
    serve = dict(SERVE_DEFAULTS)
    serve.update(doc.get("serve", {}))
    return LoadedScenario(
        spec=spec,
        model=_load_robot(doc.get("model", "biped12"), base_dir),
        live=live,
        out=Path(out_value) if out_value else None,
        serve=serve,
    )
