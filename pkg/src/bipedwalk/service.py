"""Live simulation sessions over WebSocket.

One simulation loop drives the closed-loop session in real-time-scaled
control ticks; telemetry frames fan out to every connected client at a
decimated rate (default 50 Hz) and operator commands are serialized into
a per-tick queue.  Wire format: one JSON document per WebSocket text
frame, schemas published in ``schemas/telemetry.json`` and
``schemas/command.json``.

Operator semantics:

* ``set_reference_velocity`` maps the normalized joystick (vx, vy) to a
  guidance target displaced from the current planned pose,
  ``target = p + R(theta) @ [s_fwd * vx, s_lat * vy]``, where ``p`` is the
  control point the planner steers.  The pending target is ingested by
  the planner at the next merge point (both feet flat, load split
  50/50), so plans never change mid-step.
* ``set_mode`` restarts the session in the requested plant mode with a
  gait appropriate for it (torque mode uses the slow 3-5 s cadence).
* ``pause`` freezes the loop and the telemetry stream; ``resume``
  continues; ``reset`` restarts the scenario from standing.  Restarts
  increment the frame ``epoch``; ``t`` is strictly increasing within an
  epoch.
"""

from __future__ import annotations

import asyncio
import json
import math
import time
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .config import LoadedScenario, standing_control_point
from .plan import straight_walk_setup
from .simulator import (ScenarioError, ScenarioSpec, SimMode, WalkingSession,
                        torque_walk_setup)
from .unicycle import ConstantReference, UnicycleState

PROTOCOL_VERSION = 1

FOOTSTEP_WINDOW = 8


class CommandError(ValueError):
    """Inbound message rejected (reported as an error frame)."""


class CommandKind(str, Enum):
    SET_REFERENCE_VELOCITY = "set_reference_velocity"
    SET_MODE = "set_mode"
    PAUSE = "pause"
    RESUME = "resume"
    RESET = "reset"


@dataclass(frozen=True)
class Command:
    kind: CommandKind
    vx: float = 0.0
    vy: float = 0.0
    mode: SimMode | None = None


def parse_command(text) -> Command:
    """Parse and validate one wire message; clamps joystick to [-1, 1]."""
    try:
        doc = json.loads(text)
    except (json.JSONDecodeError, UnicodeDecodeError) as err:
        raise CommandError(f"not valid JSON: {err}") from err
    if not isinstance(doc, dict):
        raise CommandError("command must be a JSON object")
    kind_raw = doc.get("type")
    try:
        kind = CommandKind(kind_raw)
    except ValueError:
        raise CommandError(
            f"unknown command type {kind_raw!r}; expected one of "
            f"{[k.value for k in CommandKind]}") from None
    if kind is CommandKind.SET_REFERENCE_VELOCITY:
        extra = set(doc) - {"type", "vx", "vy"}
        if extra:
            raise CommandError(f"unexpected fields {sorted(extra)}")
        values = {}
        for key in ("vx", "vy"):
            val = doc.get(key)
            if isinstance(val, bool) or not isinstance(val, (int, float)) \
                    or not math.isfinite(val):
                raise CommandError(f"{key} must be a finite number")
            values[key] = min(max(float(val), -1.0), 1.0)
        return Command(kind, vx=values["vx"], vy=values["vy"])
    if kind is CommandKind.SET_MODE:
        extra = set(doc) - {"type", "mode"}
        if extra:
            raise CommandError(f"unexpected fields {sorted(extra)}")
        try:
            mode = SimMode(doc.get("mode"))
        except ValueError:
            raise CommandError(
                f"mode must be one of {[m.value for m in SimMode]}") from None
        return Command(kind, mode=mode)
    if set(doc) != {"type"}:
        raise CommandError(f"unexpected fields {sorted(set(doc) - {'type'})}")
    return Command(kind)


def error_frame(message: str, detail: str | None = None) -> dict:
    frame = {"type": "error", "v": PROTOCOL_VERSION, "error": str(message)}
    if detail:
        frame["detail"] = str(detail)
    return frame


# -- telemetry assembly --------------------------------------------------------


def _rot2(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def path_pose(plan, t: float) -> tuple[np.ndarray, float]:
    """Planned guidance pose at t, clamped to the rollout grid."""
    path = plan.path
    if len(path) == 0:  # pragma: no cover - plans always roll out >= 1 sample
        raise ValueError("plan has an empty path")
    dt = path.dt
    k = 0 if dt == 0.0 else int(round((t - path.times[0]) / dt))
    k = min(max(k, 0), len(path) - 1)
    xy, theta = path.pose_at_index(k)
    return xy, theta


def support_polygon(feet, half_length: float, half_width: float) -> list:
    """Convex hull of the stance sole corners, counterclockwise."""
    if not feet:
        return []
    corners = []
    local = np.array([[half_length, half_width], [half_length, -half_width],
                      [-half_length, -half_width], [-half_length, half_width]])
    for foot in feet:
        corners.extend(foot.center + local @ _rot2(foot.yaw).T)
    pts = np.asarray(corners)
    if len(pts) > 4:
        from scipy.spatial import ConvexHull
        pts = pts[ConvexHull(pts).vertices]
    else:
        order = np.argsort(np.arctan2(pts[:, 1] - pts[:, 1].mean(),
                                      pts[:, 0] - pts[:, 0].mean()))
        pts = pts[order]
    return [[float(x), float(y)] for x, y in pts]


def telemetry_frame(session: WalkingSession, row: dict, *, epoch: int,
                    seq: int, paused: bool, target) -> dict:
    """Wire frame for one logged control tick (see schemas/telemetry.json)."""
    t = float(row["t"])
    plan = session.plan
    xy, theta = path_pose(plan, t)
    control = UnicycleState(x=xy, theta=theta).control_point(
        session.spec.setup.unicycle.d)
    upcoming = [s for s in plan.steps if s.t_imp >= t - 1e-12]
    feet = {}
    for side, key in (("left", "l"), ("right", "r")):
        feet[side] = {
            "desired": {
                "position": [float(row[f"{key}_ref_x"]),
                             float(row[f"{key}_ref_y"]),
                             float(row[f"{key}_ref_z"])],
                "yaw": float(row[f"{key}_ref_yaw"])},
            "measured": {
                "position": [float(row[f"{key}_x"]), float(row[f"{key}_y"]),
                             float(row[f"{key}_z"])],
                "yaw": float(row[f"{key}_yaw"])},
            "phase": str(row[f"phase_{key}"]),
            "contact": bool(row[f"contact_{key}"]),
            "load": float(row[f"load_{key}"]),
        }
    zmp_meas = None
    if "zmp_meas_x" in row:
        zmp_meas = [float(row["zmp_meas_x"]), float(row["zmp_meas_y"])]
    spec = session.spec
    return {
        "type": "telemetry",
        "v": PROTOCOL_VERSION,
        "epoch": int(epoch),
        "seq": int(seq),
        "t": t,
        "mode": session.mode.value,
        "paused": bool(paused),
        "unicycle": {"x": [float(xy[0]), float(xy[1])],
                     "theta": float(theta),
                     "control_point": [float(control[0]), float(control[1])]},
        "target": [float(target[0]), float(target[1])],
        "footsteps": [{"side": s.side.value,
                       "position": [float(s.position[0]),
                                    float(s.position[1])],
                       "theta": float(s.theta),
                       "t_imp": float(s.t_imp)}
                      for s in upcoming[:FOOTSTEP_WINDOW]],
        "feet": feet,
        "com": {"desired": [float(row["com_des_x"]), float(row["com_des_y"]),
                            float(row["com_des_z"])],
                "measured": [float(row["com_x"]), float(row["com_y"]),
                             float(row["com_z"])]},
        "zmp": {"reference": [float(row["zmp_ref_x"]),
                              float(row["zmp_ref_y"])],
                "predicted": [float(row["zmp_x"]), float(row["zmp_y"])],
                "measured": zmp_meas},
        "support": support_polygon(plan.support(t), spec.contact.half_length,
                                   spec.contact.half_width),
        "status": {"mpc": str(row["mpc_status"]),
                   "wbc": str(row["wbc_status"])},
    }


# -- live session ---------------------------------------------------------------


def _live_spec(spec: ScenarioSpec, mode: SimMode) -> ScenarioSpec:
    """Scenario variant for the requested plant mode.

    The loaded scenario keeps its own gait in its native mode; switching
    modes swaps in the canonical gait for the other plant (torque uses the
    slow 3-5 s cadence with the guidance speed capped at the stride bound,
    position the 1.25 s fixed-step gait)."""
    if SimMode(spec.sim.mode) is mode:
        return spec
    if mode is SimMode.TORQUE:
        setup, _ = torque_walk_setup(speed=0.04, horizon=spec.setup.horizon)
        # live targets can sit far from the pose: cap the catch-up speed so
        # hypot(v * t_min, 2m) stays inside the step reach bound
        setup = replace(setup, unicycle=replace(setup.unicycle, v_max=0.04))
        knee_bend = 0.3
    else:
        setup, _, _ = straight_walk_setup(horizon=spec.setup.horizon)
        knee_bend = 0.35  # reach headroom at 0.14 m strides
    home = standing_control_point(setup)
    return replace(spec, setup=setup, sim=replace(spec.sim, mode=mode),
                   reference=ConstantReference(position=home),
                   knee_bend=knee_bend, label=f"{spec.label}-{mode.value}")


class LiveSession:
    """Command-driven wrapper around one closed-loop walking session."""

    def __init__(self, loaded: LoadedScenario):
        self.loaded = loaded
        self.s_fwd = float(loaded.serve["s_fwd"])
        self.s_lat = float(loaded.serve["s_lat"])
        self.epoch = 0
        self.seq = 0
        self.paused = False
        self._specs = {SimMode(loaded.spec.sim.mode): loaded.spec}
        self._start(SimMode(loaded.spec.sim.mode))

    def _start(self, mode: SimMode) -> None:
        spec = self._specs.get(mode)
        if spec is None:
            spec = _live_spec(self.loaded.spec, mode)
            self._specs[mode] = spec
        self.session = WalkingSession(self.loaded.model, spec)
        self.mode = mode
        self.total_ticks = int(round(spec.duration / spec.sim.dt_ctrl))
        ref = spec.program()[0][1]
        self.target = np.asarray(ref.position(0.0), dtype=float)
        self.paused = False

    # -- state ----------------------------------------------------------------

    @property
    def dt_ctrl(self) -> float:
        return self.session.dt_ctrl

    @property
    def finished(self) -> bool:
        return self.session.tick_index >= self.total_ticks

    def status_frame(self, state: str) -> dict:
        return {"type": "status", "v": PROTOCOL_VERSION, "epoch": self.epoch,
                "t": float(self.session.state.t), "state": state,
                "mode": self.mode.value}

    # -- commands ---------------------------------------------------------------

    def apply(self, cmd: Command) -> list[dict]:
        """Apply one operator command; returns status frames to broadcast."""
        if cmd.kind is CommandKind.SET_REFERENCE_VELOCITY:
            self._steer(cmd.vx, cmd.vy)
            return []
        if cmd.kind is CommandKind.PAUSE:
            self.paused = True
            return [self.status_frame("paused")]
        if cmd.kind is CommandKind.RESUME:
            if not self.finished:
                self.paused = False
            return [self.status_frame("running" if not self.paused
                                      else "finished")]
        if cmd.kind is CommandKind.RESET:
            self.epoch += 1
            self._start(self.mode)
            return [self.status_frame("reset")]
        if cmd.kind is CommandKind.SET_MODE:
            if cmd.mode is self.mode:
                return [self.status_frame("running" if not self.paused
                                          else "paused")]
            self.epoch += 1
            self._start(cmd.mode)
            return [self.status_frame("reset")]
        raise CommandError(f"unhandled command {cmd.kind}")  # pragma: no cover

    def _steer(self, vx: float, vy: float) -> None:
        """Joystick to guidance target: displace the current planned control
        point within the heading frame; replanning engages at merge points."""
        t = self.session.state.t
        xy, theta = path_pose(self.session.plan, t)
        control = UnicycleState(x=xy, theta=theta).control_point(
            self.session.spec.setup.unicycle.d)
        offset = _rot2(theta) @ np.array([self.s_fwd * vx, self.s_lat * vy])
        self.target = control + offset
        self.session.request_reference(ConstantReference(position=self.target))

    # -- stepping --------------------------------------------------------------

    def advance(self) -> dict | None:
        """Run one control tick; returns the logged row (None if idle)."""
        if self.paused or self.finished:
            return None
        row = self.session.tick()
        if self.finished:
            self.paused = True
        return row

    def frame(self, row: dict) -> dict:
        frame = telemetry_frame(self.session, row, epoch=self.epoch,
                                seq=self.seq, paused=self.paused,
                                target=self.target)
        self.seq += 1
        return frame

    def drop_pending_reference(self) -> None:
        """Forget a queued guidance target (recovery after a planner error)."""
        self.session._pending_ref = None


# -- server -----------------------------------------------------------------------


async def serve_session(loaded: LoadedScenario, *, host: str | None = None,
                        port: int | None = None, realtime: bool | None = None,
                        telemetry_hz: float | None = None,
                        stop: asyncio.Event | None = None,
                        started=None) -> None:
    """Run one live session on a WebSocket endpoint until `stop` is set.

    Telemetry is decimated to ~telemetry_hz and fanned out with a
    drop-tolerant broadcast; client connects/disconnects never disturb the
    simulation loop.  Malformed inbound messages produce an error frame on
    the offending connection only."""
    from websockets.asyncio.server import broadcast, serve

    opts = loaded.serve
    host = opts["host"] if host is None else host
    port = opts["port"] if port is None else port
    realtime = opts["realtime"] if realtime is None else realtime
    telemetry_hz = opts["telemetry_hz"] if telemetry_hz is None \
        else telemetry_hz
    live = LiveSession(loaded)
    decimation = max(1, int(round(1.0 / (telemetry_hz * live.dt_ctrl))))
    stop = stop or asyncio.Event()
    commands: asyncio.Queue[Command] = asyncio.Queue()
    clients: set = set()

    async def handler(ws) -> None:
        clients.add(ws)
        try:
            async for message in ws:
                try:
                    commands.put_nowait(parse_command(message))
                except CommandError as err:
                    await ws.send(json.dumps(error_frame(
                        "command rejected", str(err))))
        finally:
            clients.discard(ws)

    def send(frame: dict) -> None:
        broadcast(clients, json.dumps(frame))

    async def loop() -> None:
        tick = 0
        next_deadline = time.monotonic()
        was_finished = False
        while not stop.is_set():
            while not commands.empty():
                for frame in live.apply(commands.get_nowait()):
                    send(frame)
                was_finished = live.finished
            try:
                row = live.advance()
            except ScenarioError as err:
                live.drop_pending_reference()
                live.paused = True
                send(error_frame(f"scenario failed in {err.layer} layer",
                                 str(err)))
                send(live.status_frame("paused"))
                row = None
            if row is not None:
                if tick % decimation == 0:
                    send(live.frame(row))
                tick += 1
                if live.finished and not was_finished:
                    send(live.status_frame("finished"))
                    was_finished = True
            if realtime:
                next_deadline += live.dt_ctrl
                delay = next_deadline - time.monotonic()
                if delay > 0:
                    await asyncio.sleep(delay)
                else:
                    # behind the wall clock: drop the deficit, keep serving
                    next_deadline = time.monotonic()
                    await asyncio.sleep(0)
            elif row is None:
                await asyncio.sleep(0.001)
            else:
                await asyncio.sleep(0)

    async with serve(handler, host, port) as server:
        if started is not None and not started.done():
            bound = server.sockets[0].getsockname()[1] if server.sockets \
                else port
            started.set_result(bound)
        await loop()
