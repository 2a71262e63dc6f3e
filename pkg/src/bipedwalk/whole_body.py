"""Task-space whole-body control.

Two modes share the task definitions: a velocity-level differential inverse
kinematics producing joint position references (position-controlled walking),
and a torque-level controller solving a weighted QP over joint torques and
contact wrenches subject to the floating-base dynamics.

Conventions: twists and wrenches are world-aligned (linear; angular) /
(force; moment) pairs taken at the frame origin; contact inequality rows act
on the wrench re-expressed in the sole frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, qr

from .qp import QpOptions, QpProblem, solve
from .rigid_body import (Configuration, DynamicsTerms, com_and_jacobian,
                         com_drift, dynamics_terms, forward_kinematics,
                         frame_drift, frame_jacobian)

LEFT_SOLE = "left_sole"
RIGHT_SOLE = "right_sole"
TORSO_FRAME = "torso"

COND_DEMOTE = 1e8          # task-stack condition number triggering CoM demotion
COM_SOFT_WEIGHT = 1e6      # weight of the demoted CoM rows

IK_FOOT_WEIGHT = 1e6
IK_COM_WEIGHT = 1e4
IK_TORSO_WEIGHT = 1.0
IK_POSTURE_WEIGHT = 1e-2
IK_DAMPING = 1e-8


def so3_error(rot, rot_des) -> np.ndarray:
    """Orientation feedback term skew^-1(skewpart(R_des' R)).

    Zero iff rot == rot_des (for relative angles < pi); expressed in the
    desired frame."""
    e = np.asarray(rot_des).T @ np.asarray(rot)
    a = 0.5 * (e - e.T)
    return np.array([a[2, 1], a[0, 2], a[1, 0]])


@dataclass
class SoleRef:
    """Desired pose, twist and acceleration of one sole."""
    rot: np.ndarray
    pos: np.ndarray
    twist: np.ndarray = field(default_factory=lambda: np.zeros(6))
    acc: np.ndarray = field(default_factory=lambda: np.zeros(6))


@dataclass
class TaskReferences:
    com_pos: np.ndarray
    com_vel: np.ndarray
    com_acc: np.ndarray
    left: SoleRef
    right: SoleRef
    torso_rot: np.ndarray
    posture: np.ndarray


@dataclass
class TaskGains:
    """(K_p, K_d) pairs per task."""
    com: tuple[float, float] = (50.0, 14.0)
    feet_lin: tuple[float, float] = (100.0, 20.0)
    feet_ang: tuple[float, float] = (80.0, 16.0)
    torso: tuple[float, float] = (20.0, 9.0)
    posture: tuple[float, float] = (10.0, 6.0)


@dataclass
class ContactSpec:
    """Rectangular sole contact: geometry, friction and unilaterality."""
    half_length: float = 0.07
    half_width: float = 0.03
    mu: float = 0.5
    f_min: float = 0.0
    facets: int = 4
    mu_torsion: float | None = None   # defaults to mu / 2

    @property
    def mu_z(self) -> float:
        return self.mu / 2.0 if self.mu_torsion is None else self.mu_torsion


@dataclass
class WbcWeights:
    w_torso: float = 1.0
    w_tau: float = 1e-4
    w_f: float = 1e-2


@dataclass
class WbcCommand:
    tau: np.ndarray
    wrenches: dict[str, np.ndarray]
    task_residual: float
    status: str
    iterations: int


class WbcRankError(RuntimeError):
    """Task stack is rank deficient beyond the CoM-demotion fallback."""

    def __init__(self, rows):
        super().__init__(f"dependent task rows after CoM demotion: {list(rows)}")
        self.rows = tuple(rows)


def holding_references(model, q: Configuration,
                       posture: np.ndarray | None = None) -> TaskReferences:
    """References equal to the current kinematics with zero motion."""
    fk = forward_kinematics(model, q)
    p_com, _ = com_and_jacobian(model, q)
    rot_l, pos_l = fk.pose(LEFT_SOLE)
    rot_r, pos_r = fk.pose(RIGHT_SOLE)
    rot_t, _ = fk.pose(TORSO_FRAME)
    return TaskReferences(
        com_pos=p_com, com_vel=np.zeros(3), com_acc=np.zeros(3),
        left=SoleRef(rot=rot_l, pos=pos_l),
        right=SoleRef(rot=rot_r, pos=pos_r),
        torso_rot=rot_t,
        posture=q.s.copy() if posture is None else np.asarray(posture, float))


def _angular_pd(rot, rot_des, omega, omega_des, kp, kd) -> np.ndarray:
    # with R = R_des exp(S(delta)): delta' = R_des' omega, so the world-frame
    # restoring term is -kp R_des so3_error
    return kd * (omega_des - omega) - kp * (np.asarray(rot_des)
                                            @ so3_error(rot, rot_des))


def task_accelerations(model, q: Configuration, nu, refs: TaskReferences,
                       gains: TaskGains, dt: float = 0.01):
    """Desired accelerations (hard 15-vector, torso 3-vector, posture n).

    PD with feedforward on every task; dt is accepted for interface parity
    with ik_step and does not enter the PD law."""
    nu = np.asarray(nu, dtype=float).reshape(model.nv)
    fk = forward_kinematics(model, q)
    p_com, j_com = com_and_jacobian(model, q)
    v_com = j_com @ nu
    kp, kd = gains.com
    com_acc = refs.com_acc + kp * (refs.com_pos - p_com) \
        + kd * (refs.com_vel - v_com)

    blocks = [com_acc]
    for frame, ref in ((LEFT_SOLE, refs.left), (RIGHT_SOLE, refs.right)):
        rot, pos = fk.pose(frame)
        twist = frame_jacobian(model, q, frame) @ nu
        kp, kd = gains.feet_lin
        lin = ref.acc[:3] + kp * (ref.pos - pos) + kd * (ref.twist[:3] - twist[:3])
        kp, kd = gains.feet_ang
        ang = ref.acc[3:] + _angular_pd(rot, ref.rot, twist[3:], ref.twist[3:],
                                        kp, kd)
        blocks.append(np.concatenate([lin, ang]))

    rot_t, _ = fk.pose(TORSO_FRAME)
    omega_t = (frame_jacobian(model, q, TORSO_FRAME) @ nu)[3:]
    kp, kd = gains.torso
    torso_acc = _angular_pd(rot_t, refs.torso_rot, omega_t, np.zeros(3), kp, kd)

    kp, kd = gains.posture
    posture_acc = kp * (np.asarray(refs.posture, float) - q.s) - kd * nu[6:]
    return np.concatenate(blocks), torso_acc, posture_acc


def contact_inequalities(spec: ContactSpec) -> tuple[np.ndarray, np.ndarray]:
    """Rows (C, b) with C f <= b on the sole-frame wrench (force; moment).

    Unilaterality, a 4-facet friction pyramid, center-of-pressure bounds
    (m_y = -x_cop f_z convention) and a torsional moment bound."""
    if spec.facets != 4:
        raise ValueError("only the 4-facet friction pyramid is supported")
    c = np.zeros((11, 6))
    b = np.zeros(11)
    c[0, 2] = -1.0
    b[0] = -spec.f_min
    for row, (axis, sign) in enumerate(((0, 1), (0, -1), (1, 1), (1, -1)),
                                       start=1):
        c[row, axis] = sign
        c[row, 2] = -spec.mu
    for row, (axis, sign, lever) in enumerate(
            ((4, 1, spec.half_length), (4, -1, spec.half_length),
             (3, 1, spec.half_width), (3, -1, spec.half_width)), start=5):
        c[row, axis] = sign
        c[row, 2] = -lever
    c[9, 5] = 1.0
    c[9, 2] = -spec.mu_z
    c[10, 5] = -1.0
    c[10, 2] = -spec.mu_z
    return c, b


@dataclass
class WbcStacks:
    """Per-tick kinematic quantities feeding the torque QP."""
    j_tasks: np.ndarray          # 15 x nv: CoM linear, left sole 6D, right sole 6D
    task_drift: np.ndarray       # 15
    j_torso_ang: np.ndarray      # 3 x nv
    torso_drift: np.ndarray      # 3
    contact_frames: tuple[str, ...]
    j_contacts: list[np.ndarray]
    rot_contacts: list[np.ndarray]


def build_task_stacks(model, q: Configuration, nu,
                      active_contacts) -> WbcStacks:
    nu = np.asarray(nu, dtype=float).reshape(model.nv)
    fk = forward_kinematics(model, q)
    _, j_com = com_and_jacobian(model, q)
    j_l = frame_jacobian(model, q, LEFT_SOLE)
    j_r = frame_jacobian(model, q, RIGHT_SOLE)
    j_tasks = np.vstack([j_com, j_l, j_r])
    task_drift = np.concatenate([com_drift(model, q, nu),
                                 frame_drift(model, q, nu, LEFT_SOLE),
                                 frame_drift(model, q, nu, RIGHT_SOLE)])
    j_torso = frame_jacobian(model, q, TORSO_FRAME)
    torso_drift = frame_drift(model, q, nu, TORSO_FRAME)[3:]
    known = {LEFT_SOLE: j_l, RIGHT_SOLE: j_r}
    j_contacts, rot_contacts = [], []
    for frame in active_contacts:
        j_contacts.append(known[frame] if frame in known
                          else frame_jacobian(model, q, frame))
        rot_contacts.append(fk.pose(frame)[0])
    return WbcStacks(j_tasks=j_tasks, task_drift=task_drift,
                     j_torso_ang=j_torso[3:], torso_drift=torso_drift,
                     contact_frames=tuple(active_contacts),
                     j_contacts=j_contacts, rot_contacts=rot_contacts)


def build_wbc_qp(terms: DynamicsTerms, stacks: WbcStacks,
                 upsilon_star: np.ndarray, torso_star: np.ndarray,
                 posture_star: np.ndarray, spec: ContactSpec,
                 weights: WbcWeights, load_share) -> tuple[QpProblem, str]:
    """Assemble the torque-mode QP over u = (tau, f_1..f_nc).

    Hard equality: task accelerations as a function of u through the
    factorized dynamics; cost: posture + weighted torso + torque and
    load-share wrench regularization; inequalities: sole-frame contact rows.
    Returns the problem and a status string ('optimal' assembly or
    'com_relaxed' when the CoM rows were demoted to a soft cost)."""
    n = terms.B_sel.shape[1]
    nv = n + 6
    n_c = len(stacks.contact_frames)
    dim = n + 6 * n_c
    cho = cho_factor(terms.M)
    cols = np.hstack([terms.B_sel] + [j.T for j in stacks.j_contacts])
    acc_map = cho_solve(cho, cols)               # d nudot / d u, nv x dim
    acc_bias = -cho_solve(cho, terms.h)          # nudot at u = 0

    a_eq = stacks.j_tasks @ acc_map
    b_eq = upsilon_star - stacks.j_tasks @ acc_bias - stacks.task_drift

    status = "optimal"
    soft_rows = []       # (weight, A, target) with residual A u - target
    if np.linalg.cond(a_eq) > COND_DEMOTE:
        status = "com_relaxed"
        soft_rows.append((COM_SOFT_WEIGHT, a_eq[:3], b_eq[:3]))
        a_eq, b_eq = a_eq[3:], b_eq[3:]
        if np.linalg.cond(a_eq) > COND_DEMOTE:
            _, r_fac, piv = qr(a_eq.T, pivoting=True)
            diag = np.abs(np.diag(r_fac))
            rank = int(np.sum(diag > diag[0] / COND_DEMOTE))
            raise WbcRankError(sorted(piv[rank:]))

    soft_rows.append((1.0, acc_map[6:], posture_star - acc_bias[6:]))
    soft_rows.append((weights.w_torso, stacks.j_torso_ang @ acc_map,
                      torso_star - stacks.j_torso_ang @ acc_bias
                      - stacks.torso_drift))

    h = np.zeros((dim, dim))
    g = np.zeros(dim)
    h[:n, :n] = weights.w_tau * np.eye(n)
    shares = [float(load_share.get(f, 0.0)) for f in stacks.contact_frames]
    c_local, b_local = contact_inequalities(spec)
    a_in = np.zeros((11 * n_c, dim))
    b_in = np.zeros(11 * n_c)
    for k, frame in enumerate(stacks.contact_frames):
        sl = slice(n + 6 * k, n + 6 * (k + 1))
        h[sl, sl] += weights.w_f * (1.0 - shares[k]) * np.eye(6)
        world_to_sole = np.zeros((6, 6))
        world_to_sole[:3, :3] = stacks.rot_contacts[k].T
        world_to_sole[3:, 3:] = stacks.rot_contacts[k].T
        a_in[11 * k:11 * (k + 1), sl] = c_local @ world_to_sole
        b_in[11 * k:11 * (k + 1)] = b_local
    for weight, a_soft, target in soft_rows:
        h += weight * a_soft.T @ a_soft
        g += weight * a_soft.T @ (-target)
    return QpProblem(H=h, g=g, A_eq=a_eq, b_eq=b_eq,
                     A_in=a_in, b_in=b_in), status


def wbc_step(model, q: Configuration, nu, refs: TaskReferences,
             gains: TaskGains, spec: ContactSpec, weights: WbcWeights,
             active_contacts, load_share,
             options: QpOptions | None = None) -> WbcCommand:
    """One torque-control tick: returns joint torques and contact wrenches."""
    if not active_contacts:
        raise ValueError("wbc_step requires a nonempty contact set")
    nu = np.asarray(nu, dtype=float).reshape(model.nv)
    terms = dynamics_terms(model, q, nu)
    stacks = build_task_stacks(model, q, nu, active_contacts)
    upsilon_star, torso_star, posture_star = task_accelerations(
        model, q, nu, refs, gains)
    problem, status = build_wbc_qp(terms, stacks, upsilon_star, torso_star,
                                   posture_star, spec, weights, load_share)
    sol = solve(problem, options=options)
    n = model.n_joints
    tau = sol.x[:n]
    wrenches = {frame: sol.x[n + 6 * k:n + 6 * (k + 1)].copy()
                for k, frame in enumerate(stacks.contact_frames)}
    nudot = np.linalg.solve(
        terms.M, terms.B_sel @ tau - terms.h
        + sum(j.T @ wrenches[f]
              for f, j in zip(stacks.contact_frames, stacks.j_contacts)))
    residual = float(np.max(np.abs(
        stacks.j_tasks @ nudot + stacks.task_drift - upsilon_star)))
    return WbcCommand(tau=tau, wrenches=wrenches, task_residual=residual,
                      status=status, iterations=sol.iterations)


@dataclass
class IkResult:
    q: Configuration
    nu: np.ndarray


def ik_step(model, q: Configuration, refs: TaskReferences, gains: TaskGains,
            dt: float, damping: float = IK_DAMPING) -> IkResult:
    """Velocity-level differential inverse kinematics.

    High-weight feet pose tasks, CoM position task, soft torso and postural
    regularization; joint limits enforced over the integration step; damping
    keeps the problem well posed at singular configurations."""
    fk = forward_kinematics(model, q)
    rows = []       # (weight, jacobian, desired velocity)
    for frame, ref in ((LEFT_SOLE, refs.left), (RIGHT_SOLE, refs.right)):
        rot, pos = fk.pose(frame)
        kp_lin = gains.feet_lin[0]
        kp_ang = gains.feet_ang[0]
        v_des = np.concatenate([
            ref.twist[:3] + kp_lin * (ref.pos - pos),
            ref.twist[3:] - kp_ang * (np.asarray(ref.rot)
                                      @ so3_error(rot, ref.rot))])
        rows.append((IK_FOOT_WEIGHT, frame_jacobian(model, q, frame), v_des))
    p_com, j_com = com_and_jacobian(model, q)
    rows.append((IK_COM_WEIGHT, j_com,
                 refs.com_vel + gains.com[0] * (refs.com_pos - p_com)))
    rot_t, _ = fk.pose(TORSO_FRAME)
    rows.append((IK_TORSO_WEIGHT, frame_jacobian(model, q, TORSO_FRAME)[3:],
                 -gains.torso[0] * (np.asarray(refs.torso_rot)
                                    @ so3_error(rot_t, refs.torso_rot))))
    j_posture = np.zeros((model.n_joints, model.nv))
    j_posture[:, 6:] = np.eye(model.n_joints)
    rows.append((IK_POSTURE_WEIGHT, j_posture,
                 gains.posture[0] * (np.asarray(refs.posture, float) - q.s)))

    h = damping * np.eye(model.nv)
    g = np.zeros(model.nv)
    for weight, jac, v_des in rows:
        h += weight * jac.T @ jac
        g -= weight * jac.T @ v_des

    lo, hi = model.joint_limits[:, 0], model.joint_limits[:, 1]
    sel = np.zeros((model.n_joints, model.nv))
    sel[:, 6:] = dt * np.eye(model.n_joints)
    finite_hi = np.isfinite(hi)
    finite_lo = np.isfinite(lo)
    a_in = np.vstack([sel[finite_hi], -sel[finite_lo]])
    b_in = np.concatenate([(hi - q.s)[finite_hi], (q.s - lo)[finite_lo]])
    sol = solve(QpProblem(H=h, g=g, A_in=a_in, b_in=b_in))
    q_next = q.integrate(sol.x, dt)
    s_clipped = np.clip(q_next.s, lo, hi)
    if not np.array_equal(s_clipped, q_next.s):
        q_next = Configuration(q_next.base_pos, q_next.base_rot, s_clipped)
    return IkResult(q=q_next, nu=sol.x)


def wbc_csv_header(n_joints: int) -> str:
    cols = ["t"] + [f"tau_{i}" for i in range(n_joints)]
    for foot in ("fl", "fr"):
        cols += [f"{foot}_{c}" for c in ("fx", "fy", "fz", "mx", "my", "mz")]
    return ",".join(cols + ["task_residual", "qp_status"])


def wbc_csv_row(t: float, command: WbcCommand) -> str:
    vals = [f"{t:.6f}"] + [f"{v:.9g}" for v in command.tau]
    for frame in (LEFT_SOLE, RIGHT_SOLE):
        wrench = command.wrenches.get(frame, np.zeros(6))
        vals += [f"{v:.9g}" for v in wrench]
    return ",".join(vals + [f"{command.task_residual:.3e}", command.status])
