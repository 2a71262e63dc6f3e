"""Summary statistics over log bundles and footstep plans.

Everything here recomputes from the bundle files alone (CSVs plus
``manifest.json``); no state survives from the run that produced them.
The contact audit re-applies the controller's own wrench inequality rows
to the plant's measured wrenches, and the footstep audit re-applies the
planner's step bounds to an emitted step list.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .footsteps import FootPose, FootSide, StepConstraints, check_step_pair
from .mpc import support_halfspaces
from .whole_body import ContactSpec, contact_inequalities

# cone slack granted when rebuilding sole frames from the planar logs: the
# controller satisfies its rows to ~1e-9, but the logs carry yaw only, so
# the sub-milliradian stance tilt shows up as slack of order tilt * |wrench|
CONE_TOL = 1e-3
ZMP_TOL = 1e-6      # m, support-hull containment slack
PULL_GRACE = 0.02   # s, transient pulling allowed at transitions (plant)


class ReportError(ValueError):
    """Bundle or plan file unusable for reporting."""


def read_csv(path) -> dict[str, np.ndarray]:
    """Column dict from one bundle CSV (numeric or string columns)."""
    data = np.genfromtxt(path, delimiter=",", names=True, dtype=None,
                         encoding="utf-8", ndmin=1)
    if data.dtype.names is None:
        raise ReportError(f"{path}: no header row")
    return {name: np.atleast_1d(data[name]) for name in data.dtype.names}


def load_bundle(outdir) -> dict:
    outdir = Path(outdir)
    manifest_path = outdir / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except OSError as err:
        raise ReportError(f"not a log bundle (missing manifest): {err}") \
            from err
    except json.JSONDecodeError as err:
        raise ReportError(f"manifest is not valid JSON: {err}") from err
    tables = {}
    for layer, filename in manifest.get("files", {}).items():
        tables[layer] = read_csv(outdir / filename)
    if "plan" not in tables or "tracking" not in tables:
        raise ReportError("bundle lacks plan/tracking tables")
    t = tables["plan"]["t"]
    for name, table in tables.items():
        # wbc.csv rounds t to microseconds; everything else is full precision
        if table["t"].shape != t.shape or \
                not np.allclose(table["t"].astype(float), t, atol=5e-7,
                                rtol=0.0):
            raise ReportError(f"{name}.csv rows do not align with plan.csv")
    return {"manifest": manifest, "tables": tables}


def _rms(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.sqrt(np.mean(x * x))) if x.size else 0.0


def _step_table(plan: dict, tracking: dict) -> list[dict]:
    """Touchdowns recovered from the contact flags (rising edges)."""
    steps = []
    last = {"l": None, "r": None}
    for key, side in (("l", "left"), ("r", "right")):
        flags = plan[f"contact_{key}"].astype(int)
        edges = np.flatnonzero(np.diff(flags) > 0) + 1
        for i in edges:
            pos = np.array([plan[f"{key}_ref_x"][i], plan[f"{key}_ref_y"][i]])
            steps.append({"t": float(plan["t"][i]), "side": side,
                          "position": [float(pos[0]), float(pos[1])],
                          "yaw": float(plan[f"{key}_ref_yaw"][i]),
                          "_key": key})
    steps.sort(key=lambda s: s["t"])
    for step in steps:
        key = step.pop("_key")
        prev = last[key]
        step["stride"] = None if prev is None else float(
            np.hypot(step["position"][0] - prev["position"][0],
                     step["position"][1] - prev["position"][1]))
        step["dt"] = None if prev is None else float(step["t"] - prev["t"])
        last[key] = step
    return steps


def _status_counts(values) -> dict[str, int]:
    out: dict[str, int] = {}
    for v in values:
        out[str(v)] = out.get(str(v), 0) + 1
    return out


def _sole_frame_wrenches(table: dict, column: str, active, yaw) -> np.ndarray:
    """Logged world wrench rotated into the (flat) sole frame by yaw."""
    wrench = np.stack([table[f"{column}_{c}"]
                       for c in ("fx", "fy", "fz", "mx", "my", "mz")],
                      axis=1)[active]
    cos, sin = np.cos(-yaw), np.sin(-yaw)
    local = wrench.copy()
    local[:, 0] = cos * wrench[:, 0] - sin * wrench[:, 1]
    local[:, 1] = sin * wrench[:, 0] + cos * wrench[:, 1]
    local[:, 3] = cos * wrench[:, 3] - sin * wrench[:, 4]
    local[:, 4] = sin * wrench[:, 3] + cos * wrench[:, 4]
    return local


def _cone_audit(wbc: dict, contacts: dict, tracking: dict,
                spec: ContactSpec) -> dict:
    """Re-check the controller's wrench inequality rows on its commands.

    These are the constraints the torque QP enforces, so violations beyond
    the frame-reconstruction floor indicate a solver or logging defect."""
    rows_c, rows_b = contact_inequalities(spec)
    counts = {"unilateral": 0, "friction": 0, "cop": 0, "torsion": 0}
    groups = {"unilateral": [0], "friction": [1, 2, 3, 4],
              "cop": [5, 6, 7, 8], "torsion": [9, 10]}
    min_fz = math.inf
    worst = -math.inf
    for key, col in (("l", "fl"), ("r", "fr")):
        active = contacts[f"active_{key}"].astype(int) > 0
        if not active.any():
            continue
        local = _sole_frame_wrenches(wbc, col, active,
                                     tracking[f"{key}_yaw"][active])
        min_fz = min(min_fz, float(local[:, 2].min()))
        slack = local @ rows_c.T - rows_b        # <= 0 when satisfied
        worst = max(worst, float(slack.max()))
        for name, idx in groups.items():
            bad = (slack[:, idx] > CONE_TOL).any(axis=1)
            counts[name] += int(bad.sum())
    return {"worst_slack": worst, "min_normal_force": min_fz,
            "violations": counts}


def _plant_audit(contacts: dict, dt: float) -> dict:
    """Physical checks on the plant reactions.

    Per-foot wrenches in double support are statically indeterminate, so
    the plant is held to what the hardware would need: no sustained pulling
    (transients under PULL_GRACE are touchdown artifacts) and the measured
    pressure point inside the support region (checked separately)."""
    episodes = 0
    worst_pull = 0.0
    min_fz = math.inf
    n_active = 0
    grace_ticks = max(1, int(round(PULL_GRACE / dt))) if dt > 0 else 1
    for key in ("l", "r"):
        active = contacts[f"active_{key}"].astype(int) > 0
        if not active.any():
            continue
        n_active += int(active.sum())
        fz = contacts[f"{key}_fz"]
        min_fz = min(min_fz, float(fz[active].min()))
        pulling = active & (fz < -1e-9)
        run = 0
        for flag in np.append(pulling, False):
            if flag:
                run += 1
            else:
                if run > grace_ticks:
                    episodes += 1
                run = 0
        if pulling.any():
            worst_pull = max(worst_pull, float(-fz[pulling].min()))
    return {"ticks_with_contact": n_active, "min_normal_force": min_fz,
            "pulling_episodes": episodes, "worst_pull": worst_pull}


def _zmp_containment(plan: dict, zmp_x, zmp_y, half_length: float,
                     half_width: float) -> dict:
    """Signed margin of a ZMP trace to the planned support region."""
    cache: dict[tuple, tuple] = {}
    min_margin = math.inf
    exits = 0
    n = len(plan["t"])
    for i in range(n):
        feet = []
        for key in ("l", "r"):
            if int(plan[f"contact_{key}"][i]):
                feet.append((np.array([plan[f"{key}_ref_x"][i],
                                       plan[f"{key}_ref_y"][i]]),
                             float(plan[f"{key}_ref_yaw"][i])))
        if not feet:  # pragma: no cover - plans always keep one foot down
            continue
        key = tuple((c[0], c[1], yaw) for c, yaw in feet)
        if key not in cache:
            cache[key] = support_halfspaces(feet, half_length, half_width)
        g, h = cache[key]
        margin = float(np.min(h - g @ np.array([zmp_x[i], zmp_y[i]])))
        min_margin = min(min_margin, margin)
        if margin < -ZMP_TOL:
            exits += 1
    return {"min_margin": min_margin, "exits": exits}


def summarize_bundle(outdir) -> dict:
    """Tracking statistics, violation counts, and the step table."""
    bundle = load_bundle(outdir)
    manifest = bundle["manifest"]
    tables = bundle["tables"]
    plan, tracking, mpc = tables["plan"], tables["tracking"], tables["mpc"]

    zmp_err = np.stack([mpc["zmp_x"] - mpc["zmp_ref_x"],
                        mpc["zmp_y"] - mpc["zmp_ref_y"]], axis=1)
    zmp_norm = np.linalg.norm(zmp_err, axis=1)
    com_err = np.stack([tracking["com_x"] - tracking["com_des_x"],
                        tracking["com_y"] - tracking["com_des_y"]], axis=1)
    feet_err = {}
    for key, side in (("l", "left"), ("r", "right")):
        diffs = [np.abs(tracking[f"{key}_{ax}"] - plan[f"{key}_ref_{ax}"])
                 for ax in ("x", "y", "z")]
        feet_err[side] = float(np.max(diffs)) if diffs[0].size else 0.0

    summary = {
        "label": manifest.get("label"),
        "mode": manifest.get("mode"),
        "ticks": int(manifest.get("ticks", len(plan["t"]))),
        "duration": float(plan["t"][-1] - plan["t"][0]) if plan["t"].size
        else 0.0,
        "steps_completed": manifest.get("steps_completed"),
        "warnings": manifest.get("warnings", []),
        "tracking": {
            "zmp_rms": _rms(zmp_norm),
            "zmp_max": float(zmp_norm.max()) if zmp_norm.size else 0.0,
            "com_rms": _rms(np.linalg.norm(com_err, axis=1)),
            "feet_max_error": feet_err,
            "drift_max": float(np.max([tracking["drift_l"].max(),
                                       tracking["drift_r"].max()])),
            "com_height": {"min": float(tracking["com_z"].min()),
                           "max": float(tracking["com_z"].max())},
            "task_residual_max": float(
                np.max(tracking["task_residual"].astype(float))),
        },
        "statuses": {
            "mpc": _status_counts(mpc["mpc_status"]),
            "wbc": _status_counts(tracking["wbc_status"]),
        },
        "steps": _step_table(plan, tracking),
    }
    violations = {
        "mpc_not_optimal": int(sum(v for k, v in
                                   summary["statuses"]["mpc"].items()
                                   if k != "optimal")),
        "wbc_not_optimal": int(sum(v for k, v in
                                   summary["statuses"]["wbc"].items()
                                   if k not in ("optimal", "n/a"))),
    }
    contact_doc = manifest.get("contact", {})
    half_length = float(contact_doc.get("half_length", 0.07))
    half_width = float(contact_doc.get("half_width", 0.03))
    zmp_hull = _zmp_containment(plan, mpc["zmp_x"], mpc["zmp_y"],
                                half_length, half_width)
    summary["tracking"]["zmp_support_margin_min"] = zmp_hull["min_margin"]
    violations["zmp_outside_support"] = zmp_hull["exits"]
    if "contacts" in tables and "wbc" in tables:
        contacts = tables["contacts"]
        cone = _cone_audit(tables["wbc"], contacts, tracking,
                           ContactSpec(**contact_doc))
        dt = float(np.median(np.diff(plan["t"]))) if len(plan["t"]) > 1 \
            else 0.0
        plant = _plant_audit(contacts, dt)
        meas_hull = _zmp_containment(plan, contacts["zmp_meas_x"],
                                     contacts["zmp_meas_y"],
                                     half_length, half_width)
        plant["zmp_min_margin"] = meas_hull["min_margin"]
        plant["zmp_exits"] = meas_hull["exits"]
        summary["contacts"] = {"controller": cone, "plant": plant}
        violations["contact_cone"] = int(sum(cone["violations"].values()))
        violations["plant_pulling"] = plant["pulling_episodes"]
        violations["plant_zmp_outside_support"] = plant["zmp_exits"]
        zmp_meas_err = np.hypot(contacts["zmp_meas_x"] - mpc["zmp_ref_x"],
                                contacts["zmp_meas_y"] - mpc["zmp_ref_y"])
        summary["tracking"]["zmp_measured_rms"] = _rms(zmp_meas_err)
    summary["violations"] = violations
    return summary


def audit_plan(doc: dict) -> dict:
    """Re-check an emitted footstep list against its recorded step bounds."""
    if doc.get("type") != "footstep_plan":
        raise ReportError("not a footstep plan document")
    constraints = StepConstraints(**doc["constraints"])
    poses = {side: FootPose(np.asarray(doc["initial"][side.value]["position"],
                                       dtype=float),
                            float(doc["initial"][side.value]["theta"]))
             for side in FootSide}
    impacts = {side: float(doc["initial"][side.value]["t_imp"])
               for side in FootSide}
    violations = []
    sides = []
    for i, step in enumerate(doc["steps"]):
        side = FootSide(step["side"])
        sides.append(side)
        stance = side.other
        cand = FootPose(np.asarray(step["position"], dtype=float),
                        float(step["theta"]))
        delta_t = float(step["t_imp"]) - max(impacts.values())
        name = check_step_pair(cand, side, poses[stance], delta_t,
                               constraints)
        if name is not None:
            violations.append({"step": i, "bound": name})
        if float(step["t_imp"]) < max(impacts.values()) - 1e-9:
            violations.append({"step": i, "bound": "t_order"})
        poses[side] = cand
        impacts[side] = float(step["t_imp"])
    alternating = all(a is not b for a, b in zip(sides, sides[1:]))
    return {"label": doc.get("label"), "n_steps": len(doc["steps"]),
            "alternating": alternating, "violations": violations,
            "end_time": doc.get("end_time")}


def render_text(summary: dict) -> str:
    """Human-readable report (the JSON form is the machine interface)."""
    lines = [f"scenario: {summary.get('label')}  mode: {summary.get('mode')}"]
    if "tracking" in summary:
        trk = summary["tracking"]
        lines.append(f"ticks: {summary['ticks']}  "
                     f"steps: {summary['steps_completed']}  "
                     f"duration: {summary['duration']:.2f} s")
        lines.append(f"zmp rms: {trk['zmp_rms']:.2e} m  "
                     f"max: {trk['zmp_max']:.2e} m")
        lines.append(f"com rms: {trk['com_rms']:.2e} m  "
                     f"height: [{trk['com_height']['min']:.3f}, "
                     f"{trk['com_height']['max']:.3f}] m")
        feet = trk["feet_max_error"]
        lines.append(f"feet max err: left {feet['left']:.2e} m, "
                     f"right {feet['right']:.2e} m  "
                     f"drift max: {trk['drift_max']:.2e} m")
        total = sum(summary["violations"].values())
        lines.append(f"violations: {total} "
                     + json.dumps(summary["violations"]))
        if "contacts" in summary:
            cone = summary["contacts"]["controller"]
            plant = summary["contacts"]["plant"]
            lines.append(f"controller cone: worst slack "
                         f"{cone['worst_slack']:.2e}  min fz "
                         f"{cone['min_normal_force']:.2f} N")
            lines.append(f"plant: min fz {plant['min_normal_force']:.2f} N  "
                         f"zmp margin {plant['zmp_min_margin']:.2e} m  "
                         f"pulling episodes {plant['pulling_episodes']}")
        for warning in summary.get("warnings", []):
            lines.append(f"warning: {warning}")
        lines.append("steps:")
        for step in summary["steps"]:
            stride = "None" if step["stride"] is None \
                else f"{step['stride']:.3f} m"
            lines.append(f"  t={step['t']:7.3f}  {step['side']:<5}  "
                         f"({step['position'][0]:+.3f}, "
                         f"{step['position'][1]:+.3f})  stride {stride}")
    else:
        lines.append(f"steps: {summary['n_steps']}  "
                     f"alternating: {summary['alternating']}")
        lines.append(f"violations: {len(summary['violations'])} "
                     + json.dumps(summary["violations"]))
    return "\n".join(lines)
