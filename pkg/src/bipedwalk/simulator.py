"""Closed-loop walking plant and scenario runner.

Two plants share the state representation: position mode executes joint
references kinematically and re-anchors the floating base on the load-
dominant stance sole each tick; torque mode integrates constrained floating-
base forward dynamics, with active contacts held by bilateral acceleration
constraints (Baumgarte-stabilized) and inelastic velocity projections at
scheduled touchdowns.  run_scenario wires the planning, preview-control and
whole-body layers around either plant in the nested-rate loop (planner at
merge points, controllers at the control period, physics at the physics
step) and emits a deterministic log bundle.
"""

from __future__ import annotations

import json
import logging
import sys
import time
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from . import __version__
from .footsteps import FootPose, FootSide, InitialFeet
from .mpc import (MpcController, MpcProblemData, TableCartModel,
                  integrate_com, support_halfspaces, zmp_output)
from .plan import FeetPoses, PlanningSetup, WalkingPlan, make_plan, merge_plan
from .rigid_body import (GRAVITY, Configuration, RobotModel,
                         _bias_forces_fk, _body_motion, _cross3,
                         _frame_link_and_offset, _mass_matrix_fk,
                         _point_jacobian, com_and_jacobian,
                         forward_kinematics, rpy_matrix)
from .unicycle import ReferenceSignal
from .whole_body import (LEFT_SOLE, RIGHT_SOLE, ContactSpec, SoleRef,
                         TaskGains, TaskReferences, WbcCommand, WbcWeights,
                         ik_step, so3_error, wbc_csv_header, wbc_csv_row,
                         wbc_step)

log = logging.getLogger(__name__)

SOLE_FRAMES = {FootSide.LEFT: LEFT_SOLE, FootSide.RIGHT: RIGHT_SOLE}

# a contact Jacobian whose Delassus operator is conditioned worse than this
# is treated as rank deficient
CONTACT_COND_LIMIT = 1e12


class SimMode(str, Enum):
    POSITION = "position"
    TORQUE = "torque"


@dataclass(frozen=True)
class SimConfig:
    """Plant configuration: mode, rates and constraint-stabilization gains."""

    mode: SimMode = SimMode.POSITION
    dt_sim: float = 1e-3
    dt_ctrl: float = 0.01
    alpha: float = 50.0       # velocity-level constraint feedback
    beta: float = 70.0        # position-level constraint feedback

    def __post_init__(self):
        object.__setattr__(self, "mode", SimMode(self.mode))
        if self.dt_sim <= 0.0 or self.dt_ctrl <= 0.0:
            raise ValueError("dt_sim and dt_ctrl must be positive")
        if self.dt_sim > self.dt_ctrl + 1e-12:
            raise ValueError("dt_sim must not exceed dt_ctrl")
        ratio = self.dt_ctrl / self.dt_sim
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("dt_ctrl must be an integer multiple of dt_sim")
        if self.alpha < 0.0 or self.beta < 0.0:
            raise ValueError("stabilization gains must be nonnegative")

    @property
    def n_substeps(self) -> int:
        return int(round(self.dt_ctrl / self.dt_sim))


@dataclass(frozen=True)
class ContactAnchor:
    """World pose a contact frame is held at while the contact is active."""

    rot: np.ndarray
    pos: np.ndarray


def flat_anchor(rot, pos) -> ContactAnchor:
    """Anchor projected onto the ground plane: yaw only, z = 0.

    The ground is flat and rigid, so a landing sole settles flat; capturing
    the full measured pose instead would hold the foot at its residual
    touchdown tilt forever."""
    rot = np.asarray(rot, dtype=float)
    pos = np.asarray(pos, dtype=float)
    yaw = float(np.arctan2(rot[1, 0], rot[0, 0]))
    return ContactAnchor(rot=rpy_matrix([0.0, 0.0, yaw]),
                         pos=np.array([pos[0], pos[1], 0.0]))


@dataclass
class SimState:
    """Plant state: configuration, velocity, time and the active contacts."""

    q: Configuration
    nu: np.ndarray
    t: float
    contacts: dict[str, ContactAnchor] = field(default_factory=dict)
    forces: dict[str, np.ndarray] = field(default_factory=dict)
    last_command: object = None

    @property
    def contact_frames(self) -> tuple[str, ...]:
        return tuple(self.contacts)


class SimContactError(RuntimeError):
    """Contact Jacobian rank loss makes the constrained dynamics singular."""

    def __init__(self, frames, rank: int, rows: int, cond: float):
        super().__init__(
            f"singular contact system: frames {list(frames)} give "
            f"{rows} constraint rows of rank {rank} "
            f"(Delassus condition {cond:.3e})")
        self.frames = tuple(frames)
        self.rank = rank
        self.rows = rows
        self.cond = cond


def _rotation_difference(rot_new, rot_old) -> np.ndarray:
    """World-frame rotation difference vector (first order in the angle)."""
    return np.asarray(rot_old) @ so3_error(rot_new, rot_old)


# ---------------------------------------------------------------------------
# position-mode plant


def step_position(model: RobotModel, state: SimState, s_ref,
                  anchor: str, dt: float) -> SimState:
    """Ideal position execution with kinematic base re-anchoring.

    Joints snap to s_ref; the floating base is recomputed so the anchor
    frame keeps the exact world pose it had before the step.  The reported
    velocity is the finite difference of the executed motion."""
    s_ref = np.asarray(s_ref, dtype=float).reshape(model.n_joints)
    fk = forward_kinematics(model, state.q)
    rot_t, pos_t = fk.pose(anchor)
    probe = Configuration(np.zeros(3), np.eye(3), s_ref)
    rot_rel, pos_rel = forward_kinematics(model, probe).pose(anchor)
    base_rot = rot_t @ rot_rel.T
    base_pos = pos_t - base_rot @ pos_rel
    q_new = Configuration(base_pos, base_rot, s_ref)
    nu = np.concatenate([
        (base_pos - state.q.base_pos) / dt,
        _rotation_difference(base_rot, state.q.base_rot) / dt,
        (s_ref - state.q.s) / dt,
    ])
    return SimState(q=q_new, nu=nu, t=state.t + dt,
                    contacts=dict(state.contacts), forces={},
                    last_command=s_ref)


# ---------------------------------------------------------------------------
# torque-mode plant


def _contact_rows(model: RobotModel, fk, nu: np.ndarray,
                  contacts: dict[str, ContactAnchor]):
    """Stacked contact Jacobian, drift Jdot nu and pose error c(q)."""
    omega, omega_dot, _, a_o = _body_motion(model, fk, nu,
                                            np.zeros(model.nv))
    jac_rows, drift, cerr = [], [], []
    for frame, anchor in contacts.items():
        link, rot_off, pos_off = _frame_link_and_offset(model, frame)
        rot_f = fk.link_rot[link] @ rot_off
        r = fk.link_rot[link] @ pos_off
        point = fk.link_pos[link] + r
        jac_rows.append(_point_jacobian(model, fk, link, point))
        a_pt = a_o[link] + _cross3(omega_dot[link], r) \
            + _cross3(omega[link], _cross3(omega[link], r))
        drift.append(np.concatenate([a_pt, omega_dot[link]]))
        cerr.append(np.concatenate([
            point - anchor.pos,
            _rotation_difference(rot_f, anchor.rot),
        ]))
    return np.vstack(jac_rows), np.concatenate(drift), np.concatenate(cerr)


def _checked_delassus(jac: np.ndarray, cho_m, frames):
    """Cholesky of J M^-1 J^T, with rank diagnostics on failure."""
    w = jac @ cho_solve(cho_m, jac.T)
    cond = np.linalg.cond(w)
    if not np.isfinite(cond) or cond > CONTACT_COND_LIMIT:
        raise SimContactError(frames, int(np.linalg.matrix_rank(jac)),
                              jac.shape[0], float(cond))
    try:
        return cho_factor(w)
    except LinAlgError:  # pragma: no cover - caught by the condition check
        raise SimContactError(frames, int(np.linalg.matrix_rank(jac)),
                              jac.shape[0], float(cond)) from None


def step_torque(model: RobotModel, state: SimState, command,
                config: SimConfig) -> SimState:
    """One physics substep of Baumgarte-stabilized constrained dynamics.

    Solves [[M, -J^T], [J, 0]] (nudot, f) = (B tau - h, -Jdot nu
    - 2 alpha J nu - beta^2 c), then integrates semi-implicitly (velocity
    first, configuration with the updated velocity).  The contact wrenches
    are the plant's own and are independent of any controller plan."""
    tau = command.tau if isinstance(command, WbcCommand) else \
        np.asarray(command, dtype=float).reshape(model.n_joints)
    nu = np.asarray(state.nu, dtype=float).reshape(model.nv)
    fk = forward_kinematics(model, state.q)
    mass = _mass_matrix_fk(model, fk)
    h, _ = _bias_forces_fk(model, fk, nu, GRAVITY)
    rhs = -h
    rhs[6:] += tau
    cho_m = cho_factor(mass)
    free_acc = cho_solve(cho_m, rhs)
    forces: dict[str, np.ndarray] = {}
    if state.contacts:
        jac, drift, cerr = _contact_rows(model, fk, nu, state.contacts)
        gamma = -drift - 2.0 * config.alpha * (jac @ nu) \
            - config.beta ** 2 * cerr
        cho_w = _checked_delassus(jac, cho_m, state.contacts)
        f = cho_solve(cho_w, gamma - jac @ free_acc)
        nudot = free_acc + cho_solve(cho_m, jac.T @ f)
        for k, frame in enumerate(state.contacts):
            forces[frame] = f[6 * k:6 * (k + 1)].copy()
    else:
        nudot = free_acc
    nu_new = nu + config.dt_sim * nudot
    q_new = state.q.integrate(nu_new, config.dt_sim)
    return SimState(q=q_new, nu=nu_new, t=state.t + config.dt_sim,
                    contacts=dict(state.contacts), forces=forces,
                    last_command=tau)


def touchdown_projection(model: RobotModel, state: SimState,
                         new_contact: str, tol: float = 5e-3) -> SimState:
    """Activate a contact through an inelastic impact.

    The post-impact velocity minimizes the kinetic-metric distance to the
    pre-impact velocity subject to zero velocity at every active contact
    (including the new one); kinetic energy never increases.  The new
    contact welds at its exact measured pose: anchoring at an idealized
    (flattened) pose would leave a position error that the constraint
    stabilization has to settle, violating the post-touchdown velocity
    tolerance."""
    if new_contact in state.contacts:
        return state
    fk = forward_kinematics(model, state.q)
    link, rot_off, pos_off = _frame_link_and_offset(model, new_contact)
    rot_f = fk.link_rot[link] @ rot_off
    pos_f = fk.link_pos[link] + fk.link_rot[link] @ pos_off
    if abs(pos_f[2]) > tol:
        raise ValueError(f"contact frame '{new_contact}' is not near the "
                         f"ground (z = {pos_f[2]:.4f} m)")
    contacts = dict(state.contacts)
    contacts[new_contact] = ContactAnchor(rot_f.copy(), pos_f.copy())
    nu = np.asarray(state.nu, dtype=float).reshape(model.nv)
    jac_rows = []
    for frame in contacts:
        l, _, off = _frame_link_and_offset(model, frame)
        point = fk.link_pos[l] + fk.link_rot[l] @ off
        jac_rows.append(_point_jacobian(model, fk, l, point))
    jac = np.vstack(jac_rows)
    cho_m = cho_factor(_mass_matrix_fk(model, fk))
    cho_w = _checked_delassus(jac, cho_m, contacts)
    lam = cho_solve(cho_w, jac @ nu)
    nu_plus = nu - cho_solve(cho_m, jac.T @ lam)
    return SimState(q=state.q, nu=nu_plus, t=state.t, contacts=contacts,
                    forces=dict(state.forces), last_command=state.last_command)


def release_contact(state: SimState, frame: str) -> SimState:
    """Deactivate a contact (scheduled liftoff)."""
    contacts = dict(state.contacts)
    contacts.pop(frame, None)
    forces = {f: w for f, w in state.forces.items() if f != frame}
    return SimState(q=state.q, nu=state.nu, t=state.t, contacts=contacts,
                    forces=forces, last_command=state.last_command)


class ContactMonitor:
    """Flags contacts whose plant normal force stays negative too long.

    The plant holds contacts bilaterally; a sustained negative normal force
    means the contact would physically have broken."""

    def __init__(self, grace: float = 0.020):
        self.grace = float(grace)
        self._neg_since: dict[str, float] = {}
        self._fired: set[str] = set()

    def observe(self, t: float, frame: str, f_normal: float) -> str | None:
        if f_normal >= 0.0:
            self._neg_since.pop(frame, None)
            self._fired.discard(frame)
            return None
        t0 = self._neg_since.setdefault(frame, t)
        if t - t0 > self.grace and frame not in self._fired:
            self._fired.add(frame)
            return (f"contact break: {frame} normal force negative "
                    f"since t={t0:.3f} s")
        return None

    def forget(self, frame: str) -> None:
        self._neg_since.pop(frame, None)
        self._fired.discard(frame)


# ---------------------------------------------------------------------------
# initial configuration


def standing_configuration(model: RobotModel, knee_bend: float = 0.3,
                           balance: bool = True) -> Configuration:
    """Symmetric crouch with soles flat on the ground, centered at the origin.

    Bends hip/knee/ankle pitch so the legs shorten while the soles stay
    flat; with balance=True a pitch redistribution (hip +delta, ankle
    -delta, which preserves flat soles) is solved so the center of mass
    sits exactly over the midpoint of the soles."""
    s = np.zeros(model.n_joints)
    names = model.joint_names

    def apply(delta: float) -> None:
        for side in ("l", "r"):
            s[names.index(f"{side}_hip_pitch")] = -knee_bend + delta
            s[names.index(f"{side}_knee")] = 2.0 * knee_bend
            s[names.index(f"{side}_ankle_pitch")] = -knee_bend - delta

    def probe(delta: float):
        apply(delta)
        fk = forward_kinematics(model, Configuration(np.zeros(3), np.eye(3), s))
        p_l = fk.pose(LEFT_SOLE)[1]
        p_r = fk.pose(RIGHT_SOLE)[1]
        com = np.zeros(3)
        for i, link in enumerate(model.links):
            com += link.mass * (fk.link_pos[i] + fk.link_rot[i] @ link.com)
        com /= model.total_mass
        return com, p_l, p_r

    delta = 0.0
    com, p_l, p_r = probe(delta)
    if balance:
        for _ in range(20):
            err = com[0] - 0.5 * (p_l[0] + p_r[0])
            if abs(err) < 1e-13:
                break
            eps = 1e-6
            com_e, pl_e, pr_e = probe(delta + eps)
            slope = ((com_e[0] - 0.5 * (pl_e[0] + pr_e[0])) - err) / eps
            delta -= err / slope
            com, p_l, p_r = probe(delta)
    mid = 0.5 * (p_l + p_r)
    base_pos = np.array([-mid[0], -mid[1], -p_l[2]])
    return Configuration(base_pos, np.eye(3), s)


# ---------------------------------------------------------------------------
# scenario runner


class ScenarioError(RuntimeError):
    """A control or plant layer failed; carries the tick and layer name."""

    def __init__(self, tick: int, t: float, layer: str, cause: BaseException):
        super().__init__(f"layer '{layer}' failed at control tick {tick} "
                         f"(t={t:.3f} s): {cause}")
        self.tick = tick
        self.t = t
        self.layer = layer


@dataclass
class ScenarioSpec:
    """Everything a headless run needs; also the serve-session backbone."""

    setup: PlanningSetup
    reference: object                      # ReferenceSignal or [(t, signal)]
    duration: float
    sim: SimConfig = field(default_factory=SimConfig)
    gains: TaskGains = field(default_factory=TaskGains)
    contact: ContactSpec = field(default_factory=ContactSpec)
    weights: WbcWeights = field(default_factory=WbcWeights)
    mpc_dt: float = 0.02
    mpc_nodes: int = 100
    mpc_q_weight: float = 1.0
    mpc_r_weight: float = 1e-6
    support_margin: float = 0.005
    knee_bend: float = 0.3
    label: str = "scenario"
    seed: int = 0

    def program(self) -> list[tuple[float, ReferenceSignal]]:
        if isinstance(self.reference, ReferenceSignal):
            return [(0.0, self.reference)]
        prog = [(float(t), ref) for t, ref in self.reference]
        if not prog or prog[0][0] > 0.0:
            raise ValueError("reference program must start at t = 0")
        if any(prog[i + 1][0] <= prog[i][0] for i in range(len(prog) - 1)):
            raise ValueError("reference program times must increase")
        return prog


@dataclass
class ScenarioResult:
    label: str
    mode: SimMode
    ticks: int
    steps_completed: int
    warnings: list[str]
    wall_time: float
    series: dict[str, np.ndarray]
    final_state: SimState
    outdir: Path | None = None


def _yaw_of(rot: np.ndarray) -> float:
    return float(np.arctan2(rot[1, 0], rot[0, 0]))


def _wrap(a: float) -> float:
    return float(np.arctan2(np.sin(a), np.cos(a)))


def _merge_continuity(old: WalkingPlan, new: WalkingPlan,
                      t_merge: float) -> dict:
    """Reference discontinuities between two plans at their merge instant."""
    dz = float(np.linalg.norm(old.zmp_ref(t_merge) - new.zmp_ref(t_merge)))
    dfeet = 0.0
    for side in FootSide:
        a = old.foot(side, t_merge)
        b = new.foot(side, t_merge)
        dfeet = max(dfeet, float(np.linalg.norm(a.position - b.position)),
                    abs(_wrap(a.yaw - b.yaw)))
    dload = float(np.max(np.abs(np.asarray(old.loads(t_merge))
                                - np.asarray(new.loads(t_merge)))))
    return {"t_merge": t_merge, "zmp_gap": dz, "feet_gap": dfeet,
            "load_gap": dload}


class WalkingSession:
    """Nested-rate closed loop around one plant.

    tick() advances one control period: ingest any pending reference
    (replanning engages at the next merge point), run the preview controller,
    run the whole-body layer, then the plant.  Deterministic: identical
    specs and reference sequences reproduce states and logs exactly."""

    def __init__(self, model: RobotModel, spec: ScenarioSpec):
        self.model = model
        self.spec = spec
        self.mode = spec.sim.mode
        self.dt_ctrl = spec.sim.dt_ctrl
        self._program = spec.program()
        self._program_idx = 1
        self._pending_ref: ReferenceSignal | None = None

        q0 = standing_configuration(model, spec.knee_bend)
        fk0 = forward_kinematics(model, q0)
        rot_l, pos_l = fk0.pose(LEFT_SOLE)
        rot_r, pos_r = fk0.pose(RIGHT_SOLE)
        initial = InitialFeet(
            left=FootPose(pos_l[:2].copy(), _yaw_of(rot_l)),
            right=FootPose(pos_r[:2].copy(), _yaw_of(rot_r)),
            t_impact_left=0.0, t_impact_right=0.0)
        self.plan: WalkingPlan = make_plan(self._program[0][1], initial,
                                           spec.setup, t0=0.0)
        self._next_plan: WalkingPlan | None = None
        self._t_merge = np.inf

        com0, _ = com_and_jacobian(model, q0)
        self.z_nom = float(com0[2])
        self.cart = TableCartModel(z_com=self.z_nom)
        self.mpc = MpcController(self.cart, dt=spec.mpc_dt,
                                 n_nodes=spec.mpc_nodes,
                                 q_weight=spec.mpc_q_weight,
                                 r_weight=spec.mpc_r_weight)
        self.chi = np.concatenate([self.plan.zmp_ref(0.0), np.zeros(4)])
        self.posture = q0.s.copy()

        contacts = {LEFT_SOLE: flat_anchor(rot_l, pos_l),
                    RIGHT_SOLE: flat_anchor(rot_r, pos_r)}
        self.state = SimState(q=q0, nu=np.zeros(model.nv), t=0.0,
                              contacts=contacts)
        self.monitor = ContactMonitor()
        self.warnings: list[str] = []
        self.steps_completed = 0
        self.tick_index = 0
        self._anchor_side = FootSide.LEFT
        self._rows: dict[str, list] = {}
        self._support_cache: dict[tuple, tuple] = {}
        self.merge_events: list[dict] = []

    # -- reference / plan management ----------------------------------------

    def request_reference(self, reference: ReferenceSignal) -> None:
        """Queue a new guidance reference; the plan changes at a merge point."""
        self._pending_ref = reference

    def _plan_at(self, t: float) -> WalkingPlan:
        if self._next_plan is not None and t >= self._t_merge - 1e-12:
            return self._next_plan
        return self.plan

    def _update_plans(self) -> None:
        t = self.state.t
        if self._program_idx < len(self._program) and \
                t >= self._program[self._program_idx][0] - 1e-9:
            self._pending_ref = self._program[self._program_idx][1]
            self._program_idx += 1
        if self._next_plan is not None and \
                self.state.t >= self._t_merge - 1e-12:
            self.plan = self._next_plan
            self._next_plan = None
            self._t_merge = np.inf
        if self._pending_ref is None:
            return
        tm = self.plan.next_merge_time(t)
        # replan on the last tick before the merge so the freshest reference
        # is used, splicing against the active plan's own references
        if tm > t + self.dt_ctrl + 1e-9:
            return
        measured = FeetPoses(
            left=self.plan.feet_ref.planar_pose(FootSide.LEFT, tm),
            right=self.plan.feet_ref.planar_pose(FootSide.RIGHT, tm))
        new_plan, t_merge = merge_plan(self.plan, self._pending_ref,
                                       measured, t)
        self._pending_ref = None
        self.merge_events.append(_merge_continuity(self.plan, new_plan,
                                                   t_merge))
        if t_merge <= t + 1e-12:
            self.plan = new_plan
        else:
            self._next_plan, self._t_merge = new_plan, t_merge

    # -- per-tick reference assembly -----------------------------------------

    def _sole_ref(self, plan: WalkingPlan, side: FootSide, t: float) -> SoleRef:
        s = plan.foot(side, t)
        return SoleRef(
            rot=rpy_matrix([0.0, 0.0, s.yaw]),
            pos=s.position,
            twist=np.concatenate([s.velocity, [0.0, 0.0, s.yaw_rate]]),
            acc=np.concatenate([s.acceleration, [0.0, 0.0, s.yaw_acc]]))

    def _task_references(self, plan: WalkingPlan, t: float
                         ) -> tuple[TaskReferences, SoleRef, SoleRef]:
        left = self._sole_ref(plan, FootSide.LEFT, t)
        right = self._sole_ref(plan, FootSide.RIGHT, t)
        yaw_l, yaw_r = _yaw_of(left.rot), _yaw_of(right.rot)
        heading = yaw_r + 0.5 * _wrap(yaw_l - yaw_r)
        refs = TaskReferences(
            com_pos=np.array([self.chi[0], self.chi[1], self.z_nom]),
            com_vel=np.array([self.chi[2], self.chi[3], 0.0]),
            com_acc=np.array([self.chi[4], self.chi[5], 0.0]),
            left=left, right=right,
            torso_rot=rpy_matrix([0.0, 0.0, heading]),
            posture=self.posture)
        return refs, left, right

    def _preview_data(self, t: float) -> MpcProblemData:
        n = self.spec.mpc_nodes
        dt = self.spec.mpc_dt
        refs = np.empty((n, 2))
        supports = []
        spec = self.spec
        for i in range(n):
            tk = t + (i + 1) * dt
            plan = self._plan_at(tk)
            refs[i] = plan.zmp_ref(tk)
            feet = [(f.center, f.yaw) for f in plan.support(tk)]
            # support feet repeat exactly across nodes within a gait segment,
            # so the halfspace sets are memoized on the exact pose tuple
            key = tuple((c[0], c[1], yaw) for c, yaw in feet)
            cached = self._support_cache.get(key)
            if cached is None:
                cached = support_halfspaces(
                    feet, spec.contact.half_length, spec.contact.half_width,
                    margin=spec.support_margin)
                self._support_cache[key] = cached
            supports.append(cached)
        return MpcProblemData(x0=self.chi, zmp_refs=refs, supports=supports)

    # -- plant helpers -------------------------------------------------------

    def _apply_contact_schedule(self, plan: WalkingPlan, t: float) -> None:
        """Match the plant contact set to the timeline at time t.

        Queried half a physics step ahead so a phase boundary that lands on
        the tick grid flips here rather than one substep late (accumulated
        time carries float noise relative to the plan's exact boundaries)."""
        for side in FootSide:
            frame = SOLE_FRAMES[side]
            want = plan.timeline.in_contact(side, t + 0.5 * self.spec.sim.dt_sim)
            have = frame in self.state.contacts
            if want and not have:
                self.state = touchdown_projection(self.model, self.state,
                                                  frame)
                self.steps_completed += 1
            elif have and not want:
                self.state = release_contact(self.state, frame)
                self.monitor.forget(frame)

    def _position_anchor(self, loads: tuple[float, float]) -> str:
        if loads[0] > loads[1]:
            self._anchor_side = FootSide.LEFT
        elif loads[1] > loads[0]:
            self._anchor_side = FootSide.RIGHT
        # ties keep the previous anchor
        return SOLE_FRAMES[self._anchor_side]

    def _capture_position_contacts(self, plan: WalkingPlan, t: float,
                                   fk) -> None:
        for side in FootSide:
            frame = SOLE_FRAMES[side]
            want = plan.timeline.in_contact(side, t)
            have = frame in self.state.contacts
            if want and not have:
                rot, pos = fk.pose(frame)
                self.state.contacts[frame] = ContactAnchor(rot.copy(),
                                                           pos.copy())
                self.steps_completed += 1
            elif have and not want:
                del self.state.contacts[frame]

    # -- main loop -----------------------------------------------------------

    def tick(self) -> dict:
        """Advance one control period; returns the logged row."""
        idx = self.tick_index
        t = self.state.t
        try:
            self._update_plans()
            plan = self._plan_at(t)
        except Exception as err:
            raise ScenarioError(idx, t, "planner", err) from err

        loads = plan.loads(t)
        phases = {side: plan.timeline.phase_at(side, t) for side in FootSide}
        zmp_ref_t = plan.zmp_ref(t)
        try:
            mpc_step = self.mpc.step(self._preview_data(t))
        except Exception as err:
            raise ScenarioError(idx, t, "mpc", err) from err
        refs, left_ref, right_ref = self._task_references(plan, t)
        zmp_now = zmp_output(self.cart, self.chi)

        row = {
            "t": t,
            "phase_l": phases[FootSide.LEFT].value,
            "phase_r": phases[FootSide.RIGHT].value,
            "load_l": loads[0], "load_r": loads[1],
            "contact_l": int(plan.timeline.in_contact(FootSide.LEFT, t)),
            "contact_r": int(plan.timeline.in_contact(FootSide.RIGHT, t)),
            "zmp_ref_x": zmp_ref_t[0], "zmp_ref_y": zmp_ref_t[1],
            "zmp_x": zmp_now[0], "zmp_y": zmp_now[1],
            "com_des_x": self.chi[0], "com_des_y": self.chi[1],
            "com_des_z": self.z_nom,
            "com_vel_des_x": self.chi[2], "com_vel_des_y": self.chi[3],
            "jerk_x": mpc_step.jerk[0], "jerk_y": mpc_step.jerk[1],
            "mpc_iterations": mpc_step.iterations,
            "mpc_active": mpc_step.n_active,
            "mpc_status": "optimal",
        }
        for name, ref in (("l", left_ref), ("r", right_ref)):
            row[f"{name}_ref_x"] = ref.pos[0]
            row[f"{name}_ref_y"] = ref.pos[1]
            row[f"{name}_ref_z"] = ref.pos[2]
            row[f"{name}_ref_yaw"] = _yaw_of(ref.rot)
        # measured kinematics sampled at the same instant as the references
        self._measure(row)

        if self.mode is SimMode.POSITION:
            self._run_position_tick(plan, t, refs, loads, row)
        else:
            self._run_torque_tick(plan, t, refs, loads, row)

        self.chi = integrate_com(self.chi, mpc_step.jerk, self.dt_ctrl)
        for key, val in row.items():
            self._rows.setdefault(key, []).append(val)
        self.tick_index += 1
        return row

    def _run_position_tick(self, plan, t, refs, loads, row) -> None:
        try:
            ik = ik_step(self.model, self.state.q, refs, self.spec.gains,
                         self.dt_ctrl)
        except Exception as err:
            raise ScenarioError(self.tick_index, t, "ik", err) from err
        anchor = self._position_anchor(loads)
        try:
            self.state = step_position(self.model, self.state, ik.q.s,
                                       anchor, self.dt_ctrl)
        except Exception as err:
            raise ScenarioError(self.tick_index, t, "plant", err) from err
        fk = forward_kinematics(self.model, self.state.q)
        self._capture_position_contacts(plan, self.state.t, fk)
        row["anchor"] = anchor
        row["wbc_status"] = "n/a"
        row["task_residual"] = 0.0

    def _run_torque_tick(self, plan, t, refs, loads, row) -> None:
        share = {LEFT_SOLE: loads[0], RIGHT_SOLE: loads[1]}
        # transitions on the tick boundary are applied before the controller
        # runs, so controller and plant agree on the contact set
        try:
            self._apply_contact_schedule(plan, self.state.t)
        except Exception as err:
            raise ScenarioError(self.tick_index, t, "plant", err) from err
        try:
            command = wbc_step(self.model, self.state.q, self.state.nu,
                               refs, self.spec.gains, self.spec.contact,
                               self.spec.weights, self.state.contact_frames,
                               share)
        except Exception as err:
            raise ScenarioError(self.tick_index, t, "wbc", err) from err
        row["wbc_status"] = command.status
        row["task_residual"] = command.task_residual
        row["wbc_command"] = command
        try:
            for _ in range(self.spec.sim.n_substeps):
                self._apply_contact_schedule(plan, self.state.t)
                self.state = step_torque(self.model, self.state, command,
                                         self.spec.sim)
                for frame, wrench in self.state.forces.items():
                    msg = self.monitor.observe(self.state.t, frame, wrench[2])
                    if msg is not None:
                        self.warnings.append(msg)
                        log.warning(msg)
        except Exception as err:
            raise ScenarioError(self.tick_index, t, "plant", err) from err
        row["anchor"] = "n/a"
        for name, frame in (("l", LEFT_SOLE), ("r", RIGHT_SOLE)):
            wrench = self.state.forces.get(frame, np.zeros(6))
            for j, comp in enumerate(("fx", "fy", "fz", "mx", "my", "mz")):
                row[f"{name}_{comp}"] = wrench[j]
            row[f"active_{name}"] = int(frame in self.state.contacts)

    def _measure(self, row) -> None:
        """Measured quantities of the plant state at the row timestamp."""
        fk = forward_kinematics(self.model, self.state.q)
        com = np.zeros(3)
        for i, link in enumerate(self.model.links):
            com += link.mass * (fk.link_pos[i] + fk.link_rot[i] @ link.com)
        com /= self.model.total_mass
        row["com_x"], row["com_y"], row["com_z"] = com
        row["base_x"], row["base_y"], row["base_z"] = self.state.q.base_pos
        for name, frame in (("l", LEFT_SOLE), ("r", RIGHT_SOLE)):
            rot, pos = fk.pose(frame)
            row[f"{name}_x"], row[f"{name}_y"], row[f"{name}_z"] = pos
            row[f"{name}_yaw"] = _yaw_of(rot)
            anchor = self.state.contacts.get(frame)
            row[f"drift_{name}"] = 0.0 if anchor is None else \
                float(np.linalg.norm(pos - anchor.pos))
        if self.mode is SimMode.TORQUE:
            row["zmp_meas_x"], row["zmp_meas_y"] = self._measured_zmp(fk)
            resid = self._contact_velocity_residuals(fk)
            row["vel_resid_l"] = resid.get(LEFT_SOLE, 0.0)
            row["vel_resid_r"] = resid.get(RIGHT_SOLE, 0.0)

    def _measured_zmp(self, fk) -> tuple[float, float]:
        """Pressure point of the plant contact wrenches on the ground plane."""
        f_tot = np.zeros(3)
        m_tot = np.zeros(3)
        for frame, wrench in self.state.forces.items():
            pos = fk.pose(frame)[1]
            f_tot += wrench[:3]
            m_tot += wrench[3:] + _cross3(pos, wrench[:3])
        if f_tot[2] <= 1e-9:
            return 0.0, 0.0
        return float(-m_tot[1] / f_tot[2]), float(m_tot[0] / f_tot[2])

    def _contact_velocity_residuals(self, fk) -> dict[str, float]:
        out = {}
        for frame in self.state.contacts:
            link, _, off = _frame_link_and_offset(self.model, frame)
            point = fk.link_pos[link] + fk.link_rot[link] @ off
            j = _point_jacobian(self.model, fk, link, point)
            out[frame] = float(np.linalg.norm(j @ self.state.nu))
        return out

    def series(self) -> dict[str, np.ndarray]:
        out = {}
        for key, vals in self._rows.items():
            if key == "wbc_command":
                out[key] = vals
            elif vals and isinstance(vals[0], str):
                out[key] = np.array(vals, dtype=object)
            else:
                out[key] = np.asarray(vals)
        return out


# ---------------------------------------------------------------------------
# log bundle


PLAN_COLUMNS = ["t", "phase_l", "phase_r", "load_l", "load_r", "contact_l",
                "contact_r", "zmp_ref_x", "zmp_ref_y",
                "l_ref_x", "l_ref_y", "l_ref_z", "l_ref_yaw",
                "r_ref_x", "r_ref_y", "r_ref_z", "r_ref_yaw"]
MPC_COLUMNS = ["t", "com_des_x", "com_des_y", "com_des_z",
               "com_vel_des_x", "com_vel_des_y", "jerk_x", "jerk_y",
               "zmp_ref_x", "zmp_ref_y", "zmp_x", "zmp_y",
               "mpc_iterations", "mpc_active", "mpc_status"]
TRACKING_COLUMNS = ["t", "com_x", "com_y", "com_z", "com_des_x", "com_des_y",
                    "com_des_z", "l_x", "l_y", "l_z", "l_yaw",
                    "r_x", "r_y", "r_z", "r_yaw", "drift_l", "drift_r",
                    "base_x", "base_y", "base_z", "anchor", "wbc_status",
                    "task_residual"]
CONTACT_COLUMNS = ["t", "active_l", "active_r",
                   "l_fx", "l_fy", "l_fz", "l_mx", "l_my", "l_mz",
                   "r_fx", "r_fy", "r_fz", "r_mx", "r_my", "r_mz",
                   "vel_resid_l", "vel_resid_r", "zmp_meas_x", "zmp_meas_y"]


def _format_cell(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _write_csv(path: Path, columns: list[str], series: dict) -> None:
    n = len(series["t"])
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(columns) + "\n")
        for k in range(n):
            f.write(",".join(_format_cell(series[c][k]) for c in columns)
                    + "\n")


def _spec_manifest(spec: ScenarioSpec) -> dict:
    def plain(obj):
        if isinstance(obj, Enum):
            return obj.value
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if hasattr(obj, "__dataclass_fields__"):
            return {f.name: plain(getattr(obj, f.name)) for f in fields(obj)}
        if isinstance(obj, ReferenceSignal):
            state = {k.lstrip("_"): plain(v) for k, v in vars(obj).items()}
            return {"type": type(obj).__name__, **state}
        if isinstance(obj, (list, tuple)):
            return [plain(v) for v in obj]
        if isinstance(obj, (int, float, str, bool)) or obj is None:
            return obj
        return repr(obj)

    return {
        "label": spec.label,
        "mode": spec.sim.mode.value,
        "sim": plain(spec.sim),
        "planning": plain(spec.setup),
        "gains": plain(spec.gains),
        "contact": plain(spec.contact),
        "weights": plain(spec.weights),
        "mpc": {"dt": spec.mpc_dt, "nodes": spec.mpc_nodes,
                "q_weight": spec.mpc_q_weight, "r_weight": spec.mpc_r_weight},
        "support_margin": spec.support_margin,
        "knee_bend": spec.knee_bend,
        "duration": spec.duration,
        "seed": spec.seed,
        "reference": plain(spec.reference),
    }


def write_log_bundle(outdir, spec: ScenarioSpec, result_series: dict,
                     model: RobotModel, steps_completed: int,
                     warnings: list[str]) -> dict[str, str]:
    """One CSV per layer plus a JSON manifest; deterministic content."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    files = {}
    _write_csv(outdir / "plan.csv", PLAN_COLUMNS, result_series)
    files["plan"] = "plan.csv"
    _write_csv(outdir / "mpc.csv", MPC_COLUMNS, result_series)
    files["mpc"] = "mpc.csv"
    _write_csv(outdir / "tracking.csv", TRACKING_COLUMNS, result_series)
    files["tracking"] = "tracking.csv"
    if spec.sim.mode is SimMode.TORQUE:
        _write_csv(outdir / "contacts.csv", CONTACT_COLUMNS, result_series)
        files["contacts"] = "contacts.csv"
        with open(outdir / "wbc.csv", "w", encoding="utf-8") as f:
            f.write(wbc_csv_header(model.n_joints) + "\n")
            for t, cmd in zip(result_series["t"],
                              result_series["wbc_command"]):
                f.write(wbc_csv_row(float(t), cmd) + "\n")
        files["wbc"] = "wbc.csv"
    manifest = _spec_manifest(spec)
    manifest.update({
        "model": {"joints": model.n_joints, "mass": model.total_mass,
                  "links": len(model.links)},
        "ticks": len(result_series["t"]),
        "steps_completed": steps_completed,
        "warnings": warnings,
        "files": files,
        "versions": {
            "bipedwalk": __version__,
            "numpy": np.__version__,
            "python": "%d.%d.%d" % sys.version_info[:3],
        },
    })
    with open(outdir / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return files


def run_scenario(model: RobotModel, spec: ScenarioSpec,
                 outdir=None) -> ScenarioResult:
    """Run a headless scenario and (optionally) write its log bundle."""
    session = WalkingSession(model, spec)
    n_ticks = int(round(spec.duration / spec.sim.dt_ctrl))
    t_start = time.perf_counter()
    for _ in range(n_ticks):
        session.tick()
    wall = time.perf_counter() - t_start
    series = session.series()
    result = ScenarioResult(
        label=spec.label, mode=spec.sim.mode, ticks=session.tick_index,
        steps_completed=session.steps_completed,
        warnings=list(session.warnings), wall_time=wall, series=series,
        final_state=session.state,
        outdir=Path(outdir) if outdir is not None else None)
    if outdir is not None:
        write_log_bundle(outdir, spec, series, model,
                         session.steps_completed, session.warnings)
    return result


# ---------------------------------------------------------------------------
# scenario fixtures


def straight_position_scenario(duration: float = 20.0,
                               walk_time: float = 16.0,
                               label: str = "straight-position"
                               ) -> ScenarioSpec:
    """Position-mode straight walk: 0.14 m steps, 1.25 s step time,
    0.65 s double support.

    The crouch is slightly deeper than the default: at 0.14 m strides the
    late-swing reach straightens the knee through its kinematic singularity
    at the default height, which stalls the foot task for a few ticks."""
    from .plan import straight_walk_setup
    setup, reference, _ = straight_walk_setup(walk_time=walk_time)
    return ScenarioSpec(setup=setup, reference=reference, duration=duration,
                        sim=SimConfig(mode=SimMode.POSITION), knee_bend=0.35,
                        label=label)


def torque_walk_setup(speed: float = 0.04, walk_time: float = 16.0,
                      t_start: float = 1.0, horizon: float | None = None):
    """Torque-mode gait parameters: step time in [3, 5] s, 0.175 m reach.

    The stride bound couples speed and step time: the planner needs
    hypot(speed * dt_step, 2 * m) <= d_max, so at m = 0.05 the reference
    speed must stay below 0.175 / 3 s cadence headroom (~0.048 m/s)."""
    from .footsteps import CostWeights, PlannerConfig, StepConstraints
    from .plan import feet_midpose, standing_feet
    from .unicycle import LineReference, UnicycleParams

    constraints = StepConstraints(t_min=3.0, t_max=5.0, d_max=0.175,
                                  theta_max=0.3, w_min=0.04)
    params = UnicycleParams(K=np.diag([2.0, 2.0]), v_max=max(2 * speed, 0.2),
                            omega_max=0.8 * 0.3 / 3.0)
    planner = PlannerConfig(constraints=constraints, weights=CostWeights(),
                            m=0.05)
    setup = PlanningSetup(
        unicycle=params, planner=planner,
        horizon=horizon if horizon is not None else t_start + walk_time + 10.0,
        dt=0.01, switch_ratio=0.52)
    initial = standing_feet(m=0.05)
    start = feet_midpose(initial.left, initial.right).control_point(params.d)
    reference = LineReference(start=start, velocity=[speed, 0.0],
                              t0=t_start, t_stop=t_start + walk_time)
    return setup, reference


def straight_torque_scenario(duration: float = 20.0,
                             walk_time: float = 16.0,
                             label: str = "straight-torque") -> ScenarioSpec:
    """Torque-mode straight walk on the slow gait (3-5 s steps)."""
    setup, reference = torque_walk_setup(walk_time=walk_time)
    return ScenarioSpec(setup=setup, reference=reference, duration=duration,
                        sim=SimConfig(mode=SimMode.TORQUE), label=label)


def standing_scenario(mode: SimMode = SimMode.POSITION,
                      duration: float = 5.0,
                      label: str = "standing") -> ScenarioSpec:
    """Zero-reference standing: the plan has no steps.

    In torque mode the regularization weights are dropped to near zero so
    the wrench distribution cost cannot push the equilibrium off the exact
    gravity-compensation point."""
    from .plan import feet_midpose, standing_feet
    from .unicycle import LineReference
    setup = PlanningSetup()
    initial = standing_feet(m=setup.planner.m)
    start = feet_midpose(initial.left, initial.right).control_point(
        setup.unicycle.d)
    reference = LineReference(start=start, velocity=[0.0, 0.0], t_stop=0.0)
    weights = WbcWeights(w_tau=1e-8, w_f=1e-8) if SimMode(mode) is \
        SimMode.TORQUE else WbcWeights()
    return ScenarioSpec(setup=setup, reference=reference,
                        duration=duration, sim=SimConfig(mode=SimMode(mode)),
                        weights=weights, label=label)


def turn_scenario(t_turn: float = 5.0, duration: float = 16.0,
                  walk_time: float = 30.0,
                  label: str = "turn-position") -> ScenarioSpec:
    """Straight walk with a 90-degree heading change applied mid-walk.

    The gait is slightly shorter and the unicycle's catch-up speed capped
    near cruise so the heading transient produces steps the legs can
    comfortably reach (at the defaults the catch-up strides drive the knee
    into its extension stop)."""
    from dataclasses import replace
    from .plan import straight_walk_setup
    from .unicycle import LineReference
    setup, straight, _ = straight_walk_setup(step_length=0.12,
                                             walk_time=walk_time)
    speed = float(np.linalg.norm(straight.velocity(0.0)))
    setup = replace(setup, unicycle=replace(setup.unicycle,
                                            v_max=1.2 * speed))
    pivot = straight.position(t_turn)
    turned = LineReference(start=pivot, velocity=[0.0, speed], t0=t_turn,
                           t_stop=t_turn + walk_time)
    return ScenarioSpec(setup=setup,
                        reference=[(0.0, straight), (t_turn, turned)],
                        duration=duration,
                        sim=SimConfig(mode=SimMode.POSITION), knee_bend=0.35,
                        label=label)
