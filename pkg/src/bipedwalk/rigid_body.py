"""Floating-base rigid-body model: kinematics, Jacobians, dynamics terms.

Conventions (fixed once, used across every module):
  - generalized position  q = (base position p_B, base rotation R_B, joints s)
  - generalized velocity  nu = (world base linear vel, world base angular
    vel, joint rates), so dim(nu) = n + 6 with the 6 base coordinates first
  - frame twists are world-aligned (linear; angular) pairs taken at the
    frame origin, and every Jacobian maps nu to such a twist
  - dynamics follow  M(q) nudot + h(q, nu) = B tau + sum_k J_k' f_k  with h
    containing Coriolis, centrifugal and gravity terms.

The mass matrix uses the composite-rigid-body algorithm with all spatial
quantities expressed at the world origin, which removes per-joint frame
transforms.  Bias forces and inverse dynamics use an independent route:
per-body Newton-Euler resultants assembled through point-Jacobian
transposes, so the two computations cross-check each other.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

GRAVITY = np.array([0.0, 0.0, -9.81])

MODEL_FORMAT = "bipedwalk-model"
BASE_FRAME = "base"


def skew(v) -> np.ndarray:
    """S(v) with S(v) w = v x w."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _cross3(a, b) -> np.ndarray:
    # np.cross pays generic-shape overhead that dominates the dynamics loops
    return np.array([a[1] * b[2] - a[2] * b[1],
                     a[2] * b[0] - a[0] * b[2],
                     a[0] * b[1] - a[1] * b[0]])


def so3_exp(w) -> np.ndarray:
    """Rotation matrix exp(S(w)) (Rodrigues)."""
    w = np.asarray(w, dtype=float)
    angle = float(np.linalg.norm(w))
    if angle < 1e-12:
        s = skew(w)
        return np.eye(3) + s + 0.5 * (s @ s)
    axis = w / angle
    s = skew(axis)
    return np.eye(3) + np.sin(angle) * s + (1.0 - np.cos(angle)) * (s @ s)


def rpy_matrix(rpy) -> np.ndarray:
    """Extrinsic x-y-z (roll, pitch, yaw) rotation: Rz(y) Ry(p) Rx(r)."""
    r, p, y = rpy
    cr, sr = np.cos(r), np.sin(r)
    cp, sp = np.cos(p), np.sin(p)
    cy, sy = np.cos(y), np.sin(y)
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    return rz @ ry @ rx


class ModelError(ValueError):
    """Raised when a model document fails validation; names the link."""


@dataclass(frozen=True)
class Link:
    """One rigid body: fixed transform to its parent, then a joint."""
    name: str
    parent: int                  # index into RobotModel.links, -1 for the base
    rot_parent: np.ndarray       # fixed rotation, parent frame -> joint frame
    pos_parent: np.ndarray       # fixed offset in the parent frame
    joint_type: str              # "floating" (base only) | "revolute" | "prismatic" | "fixed"
    axis: np.ndarray | None      # unit joint axis in the joint frame
    joint_index: int             # column in s, -1 when not actuated
    mass: float
    com: np.ndarray              # CoM offset in the link frame
    inertia: np.ndarray          # 3x3 rotational inertia about the link CoM
    limits: tuple[float, float]  # joint position limits (rad or m)


@dataclass(frozen=True)
class FrameDef:
    name: str
    link: int
    rot: np.ndarray
    pos: np.ndarray


class RobotModel:
    """Immutable kinematic tree with named task frames."""

    def __init__(self, links: list[Link], frames: list[FrameDef], meta=None):
        self.links = links
        self.frames = {f.name: f for f in frames}
        self.meta = dict(meta or {})
        self.n_joints = sum(1 for l in links if l.joint_index >= 0)
        self.joint_names = [""] * self.n_joints
        for l in links:
            if l.joint_index >= 0:
                self.joint_names[l.joint_index] = l.name
        self.total_mass = float(sum(l.mass for l in links))
        self.joint_limits = np.array(
            [next(l.limits for l in links if l.joint_index == j)
             for j in range(self.n_joints)]).reshape(self.n_joints, 2)

    @property
    def nv(self) -> int:
        return self.n_joints + 6

    def frame_names(self) -> list[str]:
        return [BASE_FRAME] + [l.name for l in self.links] + list(self.frames)

    def home_configuration(self, base_pos=None) -> "Configuration":
        pos = np.zeros(3) if base_pos is None else np.asarray(base_pos, float)
        return Configuration(base_pos=pos, base_rot=np.eye(3),
                             s=np.zeros(self.n_joints))


@dataclass
class Configuration:
    base_pos: np.ndarray
    base_rot: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        self.base_pos = np.asarray(self.base_pos, dtype=float).reshape(3)
        self.base_rot = np.asarray(self.base_rot, dtype=float).reshape(3, 3)
        self.s = np.asarray(self.s, dtype=float).reshape(-1)
        if np.linalg.norm(self.base_rot.T @ self.base_rot - np.eye(3)) > 1e-8:
            raise ValueError("base rotation is not orthonormal")
        if np.linalg.det(self.base_rot) < 0.0:
            raise ValueError("base rotation is left-handed")

    def integrate(self, nu: np.ndarray, dt: float) -> "Configuration":
        """Retract nu*dt onto the configuration (exponential map on the
        base orientation, world angular velocity convention)."""
        nu = np.asarray(nu, dtype=float).reshape(-1)
        return Configuration(
            base_pos=self.base_pos + dt * nu[:3],
            base_rot=so3_exp(dt * nu[3:6]) @ self.base_rot,
            s=self.s + dt * nu[6:])

    def copy(self) -> "Configuration":
        return Configuration(self.base_pos.copy(), self.base_rot.copy(), self.s.copy())


# ---------------------------------------------------------------------------
# model loading


def _parse_inertia(raw, name: str) -> np.ndarray:
    arr = np.asarray(raw, dtype=float)
    if arr.shape == (6,):  # [ixx, iyy, izz, ixy, ixz, iyz]
        ixx, iyy, izz, ixy, ixz, iyz = arr
        arr = np.array([[ixx, ixy, ixz], [ixy, iyy, iyz], [ixz, iyz, izz]])
    if arr.shape != (3, 3):
        raise ModelError(f"link '{name}': inertia must be 3x3 or a 6-vector")
    if np.linalg.norm(arr - arr.T) > 1e-12:
        raise ModelError(f"link '{name}': inertia is not symmetric")
    eigs = np.linalg.eigvalsh(arr)
    if eigs.min() <= 0.0:
        raise ModelError(
            f"link '{name}': inertia has non-positive eigenvalue {eigs.min():.3e}")
    return arr


def _parse_origin(raw) -> tuple[np.ndarray, np.ndarray]:
    raw = raw or {}
    pos = np.asarray(raw.get("xyz", [0.0, 0.0, 0.0]), dtype=float).reshape(3)
    rot = rpy_matrix(np.asarray(raw.get("rpy", [0.0, 0.0, 0.0]), dtype=float))
    return rot, pos


def bundled_model(name: str) -> RobotModel:
    """Load one of the models shipped with the package (e.g. 'biped12')."""
    from importlib.resources import files
    doc = json.loads(files("bipedwalk").joinpath(f"models/{name}.json").read_text())
    return load_model(doc)


def load_model(source) -> RobotModel:
    """Load and validate a model from a JSON file path or a parsed dict."""
    if isinstance(source, dict):
        doc = source
    else:
        with open(source, "r", encoding="utf-8") as f:
            doc = json.load(f)
    if doc.get("format") != MODEL_FORMAT:
        raise ModelError(f"not a {MODEL_FORMAT} document")
    if int(doc.get("version", 0)) != 1:
        raise ModelError(f"unsupported model version {doc.get('version')!r}")

    raw_links = doc.get("links", [])
    if not raw_links:
        raise ModelError("model has no links")
    names = [l.get("name") for l in raw_links]
    if len(set(names)) != len(names) or any(not n for n in names):
        raise ModelError("link names must be unique and non-empty")
    index = {n: i for i, n in enumerate(names)}

    # Parents may appear after children in the file.  Internally we store a
    # canonical order (depth-first from the root, children by name) so the
    # same tree always yields the same model, joint numbering included.
    for i in range(len(raw_links)):
        seen = {i}
        j = i
        while (raw_parent := raw_links[j].get("parent")) is not None:
            if raw_parent not in index:
                raise ModelError(f"link '{names[j]}': unknown parent '{raw_parent}'")
            j = index[raw_parent]
            if j in seen:
                raise ModelError(f"link '{names[i]}': cycle in parent chain")
            seen.add(j)

    roots = [i for i, l in enumerate(raw_links) if l.get("parent") is None]
    if len(roots) != 1:
        raise ModelError(f"model must have exactly one root link, found {len(roots)}")

    children: dict[int, list[int]] = {i: [] for i in range(len(raw_links))}
    for i, raw in enumerate(raw_links):
        if raw.get("parent") is not None:
            children[index[raw["parent"]]].append(i)
    order: list[int] = []
    stack = [roots[0]]
    while stack:
        i = stack.pop()
        order.append(i)
        stack.extend(sorted(children[i], key=lambda c: names[c], reverse=True))
    joint_counter = 0
    parsed: dict[int, Link] = {}
    new_index: dict[int, int] = {}
    links: list[Link] = []
    for pos_in_order, i in enumerate(order):
        raw = raw_links[i]
        name = names[i]
        joint = raw.get("joint") or {}
        jtype = joint.get("type", "fixed")
        parent_raw = raw.get("parent")
        if parent_raw is None:
            if jtype not in ("floating", "fixed"):
                raise ModelError(f"link '{name}': the root link cannot have a joint")
            jtype = "floating"
        elif jtype not in ("revolute", "prismatic", "fixed"):
            raise ModelError(f"link '{name}': unknown joint type '{jtype}'")
        axis = None
        jidx = -1
        limits = (-np.inf, np.inf)
        if jtype in ("revolute", "prismatic"):
            axis = np.asarray(joint.get("axis", [0.0, 0.0, 1.0]), dtype=float).reshape(3)
            if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
                raise ModelError(f"link '{name}': joint axis must be unit norm")
            if "limits" in joint:
                lo, hi = (float(v) for v in joint["limits"])
                if not lo < hi:
                    raise ModelError(f"link '{name}': joint limits must satisfy lo < hi")
                limits = (lo, hi)
        mass = float(raw.get("mass", 0.0))
        if mass <= 0.0:
            raise ModelError(f"link '{name}': mass must be positive")
        rot_p, pos_p = _parse_origin(raw.get("origin"))
        links.append(Link(
            name=name,
            parent=-1 if parent_raw is None else new_index[index[parent_raw]],
            rot_parent=rot_p, pos_parent=pos_p,
            joint_type=jtype, axis=axis, joint_index=jidx if jtype == "fixed" or jtype == "floating" else joint_counter,
            mass=mass,
            com=np.asarray(raw.get("com", [0.0, 0.0, 0.0]), dtype=float).reshape(3),
            inertia=_parse_inertia(raw.get("inertia", np.eye(3) * 1e-6), name),
            limits=limits))
        if jtype in ("revolute", "prismatic"):
            joint_counter += 1
        new_index[i] = pos_in_order
        parsed[i] = links[-1]

    frames = []
    for raw in doc.get("frames", []):
        fname = raw.get("name")
        if not fname or fname in (l.name for l in links) or fname == BASE_FRAME:
            raise ModelError(f"frame '{fname}': name missing or collides with a link")
        if raw.get("link") not in index:
            raise ModelError(f"frame '{fname}': unknown link '{raw.get('link')}'")
        rot, pos = _parse_origin(raw)
        frames.append(FrameDef(name=fname, link=new_index[index[raw["link"]]],
                               rot=rot, pos=pos))
    if len({f.name for f in frames}) != len(frames):
        raise ModelError("frame names must be unique")
    return RobotModel(links, frames, meta=doc.get("meta"))


# ---------------------------------------------------------------------------
# kinematics


class FramePoses:
    """World poses of every link and named frame for one configuration."""

    def __init__(self, model: RobotModel, link_rot, link_pos):
        self._model = model
        self.link_rot = link_rot    # (L, 3, 3)
        self.link_pos = link_pos    # (L, 3)

    def pose(self, frame: str) -> tuple[np.ndarray, np.ndarray]:
        """(R, p) world pose of a link or named frame."""
        model = self._model
        if frame == BASE_FRAME:
            return self.link_rot[0].copy(), self.link_pos[0].copy()
        if frame in model.frames:
            f = model.frames[frame]
            r = self.link_rot[f.link]
            return r @ f.rot, self.link_pos[f.link] + r @ f.pos
        for i, l in enumerate(model.links):
            if l.name == frame:
                return self.link_rot[i].copy(), self.link_pos[i].copy()
        raise KeyError(f"unknown frame '{frame}'")


def _frame_link_and_offset(model: RobotModel, frame: str):
    """(link index, fixed rotation, fixed offset) for a frame name."""
    if frame == BASE_FRAME:
        return 0, np.eye(3), np.zeros(3)
    if frame in model.frames:
        f = model.frames[frame]
        return f.link, f.rot, f.pos
    for i, l in enumerate(model.links):
        if l.name == frame:
            return i, np.eye(3), np.zeros(3)
    raise KeyError(f"unknown frame '{frame}'")


def forward_kinematics(model: RobotModel, q: Configuration) -> FramePoses:
    n_links = len(model.links)
    rot = np.zeros((n_links, 3, 3))
    pos = np.zeros((n_links, 3))
    for i, link in enumerate(model.links):
        if link.parent < 0:
            rot[i], pos[i] = q.base_rot, q.base_pos
            continue
        r_par, p_par = rot[link.parent], pos[link.parent]
        r_joint = r_par @ link.rot_parent
        p_joint = p_par + r_par @ link.pos_parent
        if link.joint_type == "revolute":
            rot[i] = r_joint @ so3_exp(link.axis * q.s[link.joint_index])
            pos[i] = p_joint
        elif link.joint_type == "prismatic":
            rot[i] = r_joint
            pos[i] = p_joint + r_joint @ (link.axis * q.s[link.joint_index])
        else:  # fixed
            rot[i] = r_joint
            pos[i] = p_joint
    return FramePoses(model, rot, pos)


def _point_jacobian(model: RobotModel, fk: FramePoses, link: int,
                    point: np.ndarray) -> np.ndarray:
    """6 x (n+6) world Jacobian (linear; angular) of a point on a link."""
    j = np.zeros((6, model.nv))
    j[0:3, 0:3] = np.eye(3)
    j[0:3, 3:6] = -skew(point - fk.link_pos[0])
    j[3:6, 3:6] = np.eye(3)
    i = link
    while i >= 0:
        l = model.links[i]
        if l.joint_index >= 0:
            col = 6 + l.joint_index
            if l.joint_type == "revolute":
                # world axis through the link-frame origin
                axis_w = _joint_axis_world(model, fk, i)
                j[0:3, col] = _cross3(axis_w, point - fk.link_pos[i])
                j[3:6, col] = axis_w
            else:  # prismatic
                j[0:3, col] = _joint_axis_world(model, fk, i)
        i = l.parent
    return j


def _joint_axis_world(model: RobotModel, fk: FramePoses, i: int) -> np.ndarray:
    """World direction of link i's joint axis.

    The axis is given in the joint frame; for a revolute joint the rotation
    about the axis leaves it unchanged, so the link frame works too."""
    link = model.links[i]
    if link.joint_type == "revolute":
        return fk.link_rot[i] @ link.axis
    r_par = fk.link_rot[link.parent] if link.parent >= 0 else np.eye(3)
    return r_par @ link.rot_parent @ link.axis


def frame_jacobian(model: RobotModel, q: Configuration, frame: str) -> np.ndarray:
    """World-aligned (linear; angular) Jacobian at the frame origin."""
    fk = forward_kinematics(model, q)
    link, _, offset = _frame_link_and_offset(model, frame)
    point = fk.link_pos[link] + fk.link_rot[link] @ offset
    return _point_jacobian(model, fk, link, point)


def com_and_jacobian(model: RobotModel, q: Configuration):
    """Mass-weighted CoM position and its 3 x (n+6) linear Jacobian."""
    fk = forward_kinematics(model, q)
    p = np.zeros(3)
    j = np.zeros((3, model.nv))
    for i, link in enumerate(model.links):
        c = fk.link_pos[i] + fk.link_rot[i] @ link.com
        p += link.mass * c
        j += link.mass * _point_jacobian(model, fk, i, c)[0:3]
    return p / model.total_mass, j / model.total_mass


def com_drift(model: RobotModel, q: Configuration, nu) -> np.ndarray:
    """CoM acceleration at zero generalized acceleration (Jdot_com nu)."""
    nu = np.asarray(nu, dtype=float).reshape(model.nv)
    fk = forward_kinematics(model, q)
    omega, omega_dot, _, a_o = _body_motion(model, fk, nu, np.zeros(model.nv))
    acc = np.zeros(3)
    for i, link in enumerate(model.links):
        r = fk.link_rot[i] @ link.com
        acc += link.mass * (a_o[i] + _cross3(omega_dot[i], r)
                            + _cross3(omega[i], _cross3(omega[i], r)))
    return acc / model.total_mass


# ---------------------------------------------------------------------------
# dynamics


def _motion_subspaces(model: RobotModel, fk: FramePoses) -> np.ndarray:
    """Per-velocity-coordinate motion vectors at the world origin.

    Column k gives the (linear velocity at the origin; angular velocity)
    produced by unit nu_k.  Shape (nv, 6) for convenient row access."""
    phi = np.zeros((model.nv, 6))
    p_b = fk.link_pos[0]
    phi[0:3, 0:3] = np.eye(3)
    # unit omega = e_k moves the origin point at S(p_B) e_k; rows hold motion
    # vectors, so transpose the skew matrix
    phi[3:6, 0:3] = skew(p_b).T
    phi[3:6, 3:6] = np.eye(3)
    for i, link in enumerate(model.links):
        if link.joint_index < 0:
            continue
        axis_w = _joint_axis_world(model, fk, i)
        row = 6 + link.joint_index
        if link.joint_type == "revolute":
            phi[row, 0:3] = _cross3(fk.link_pos[i], axis_w)
            phi[row, 3:6] = axis_w
        else:
            phi[row, 0:3] = axis_w
    return phi


def _spatial_inertia_origin(mass: float, com_w: np.ndarray,
                            inertia_w: np.ndarray) -> np.ndarray:
    """6x6 spatial inertia at the world origin, (linear; angular) ordering."""
    sc = skew(com_w)
    out = np.zeros((6, 6))
    out[0:3, 0:3] = mass * np.eye(3)
    out[0:3, 3:6] = -mass * sc
    out[3:6, 0:3] = mass * sc
    out[3:6, 3:6] = inertia_w - mass * sc @ sc
    return out


def mass_matrix(model: RobotModel, q: Configuration) -> np.ndarray:
    """Composite-rigid-body mass matrix (symmetric positive definite)."""
    return _mass_matrix_fk(model, forward_kinematics(model, q))


def _mass_matrix_fk(model: RobotModel, fk: FramePoses) -> np.ndarray:
    phi = _motion_subspaces(model, fk)
    n_links = len(model.links)
    composite = np.zeros((n_links, 6, 6))
    for i, link in enumerate(model.links):
        c_w = fk.link_pos[i] + fk.link_rot[i] @ link.com
        i_w = fk.link_rot[i] @ link.inertia @ fk.link_rot[i].T
        composite[i] = _spatial_inertia_origin(link.mass, c_w, i_w)
    for i in range(n_links - 1, 0, -1):
        composite[model.links[i].parent] += composite[i]

    m = np.zeros((model.nv, model.nv))
    # joint-joint and joint-ancestor blocks
    for i, link in enumerate(model.links):
        if link.joint_index < 0:
            continue
        row = 6 + link.joint_index
        f = composite[i] @ phi[row]
        m[row, row] = phi[row] @ f
        a = link.parent
        while a >= 0:
            al = model.links[a]
            if al.joint_index >= 0:
                col = 6 + al.joint_index
                m[row, col] = m[col, row] = phi[col] @ f
            a = al.parent
        # base columns couple with every joint
        m[row, 0:6] = m[0:6, row] = phi[0:6] @ f
    # base block uses the whole-robot composite
    m[0:6, 0:6] = phi[0:6] @ composite[0] @ phi[0:6].T
    return m


def _body_motion(model: RobotModel, fk: FramePoses, nu: np.ndarray,
                 nudot: np.ndarray):
    """Per-link world angular velocity/acceleration and link-origin linear
    velocity/acceleration for given generalized velocity and acceleration."""
    n_links = len(model.links)
    omega = np.zeros((n_links, 3))
    omega_dot = np.zeros((n_links, 3))
    v_o = np.zeros((n_links, 3))
    a_o = np.zeros((n_links, 3))
    omega[0] = nu[3:6]
    omega_dot[0] = nudot[3:6]
    v_o[0] = nu[0:3]
    a_o[0] = nudot[0:3]
    for i, link in enumerate(model.links):
        if link.parent < 0:
            continue
        par = link.parent
        # parent motion evaluated at this link's origin (a material point of
        # the parent for revolute/fixed joints, the s=0 point for prismatic)
        if link.joint_type == "prismatic":
            axis_w = _joint_axis_world(model, fk, i)
            sd = nu[6 + link.joint_index]
            sdd = nudot[6 + link.joint_index]
            base_pt = fk.link_pos[i] - axis_w * _prismatic_displacement(fk, model, i)
            r = base_pt - fk.link_pos[par]
            v_pt = v_o[par] + _cross3(omega[par], r)
            a_pt = a_o[par] + _cross3(omega_dot[par], r) \
                + _cross3(omega[par], _cross3(omega[par], r))
            omega[i] = omega[par]
            omega_dot[i] = omega_dot[par]
            disp = fk.link_pos[i] - base_pt
            v_o[i] = v_pt + sd * axis_w + _cross3(omega[par], disp)
            a_o[i] = a_pt + sdd * axis_w + 2.0 * sd * _cross3(omega[par], axis_w) \
                + _cross3(omega_dot[par], disp) \
                + _cross3(omega[par], _cross3(omega[par], disp))
        else:
            r = fk.link_pos[i] - fk.link_pos[par]
            v_o[i] = v_o[par] + _cross3(omega[par], r)
            a_o[i] = a_o[par] + _cross3(omega_dot[par], r) \
                + _cross3(omega[par], _cross3(omega[par], r))
            if link.joint_type == "revolute":
                axis_w = _joint_axis_world(model, fk, i)
                sd = nu[6 + link.joint_index]
                sdd = nudot[6 + link.joint_index]
                omega[i] = omega[par] + sd * axis_w
                omega_dot[i] = omega_dot[par] + sdd * axis_w \
                    + sd * _cross3(omega[par], axis_w)
            else:
                omega[i] = omega[par]
                omega_dot[i] = omega_dot[par]
    return omega, omega_dot, v_o, a_o


def _prismatic_displacement(fk: FramePoses, model: RobotModel, i: int) -> float:
    """Recover the prismatic displacement of link i from the kinematics."""
    link = model.links[i]
    par = link.parent
    p_joint = fk.link_pos[par] + fk.link_rot[par] @ link.pos_parent
    axis_w = _joint_axis_world(model, fk, i)
    return float(axis_w @ (fk.link_pos[i] - p_joint))


def inverse_dynamics(model: RobotModel, q: Configuration, nu, nudot,
                     gravity=GRAVITY) -> np.ndarray:
    """Generalized force M nudot + h for the given motion (no contacts).

    Assembled as point-Jacobian transposes of per-body Newton-Euler
    resultants, independent of the composite-rigid-body mass matrix."""
    nu = np.asarray(nu, dtype=float).reshape(model.nv)
    nudot = np.asarray(nudot, dtype=float).reshape(model.nv)
    gravity = np.asarray(gravity, dtype=float).reshape(3)
    fk = forward_kinematics(model, q)
    omega, omega_dot, v_o, a_o = _body_motion(model, fk, nu, nudot)
    out = np.zeros(model.nv)
    for i, link in enumerate(model.links):
        c = fk.link_pos[i] + fk.link_rot[i] @ link.com
        r = c - fk.link_pos[i]
        a_c = a_o[i] + _cross3(omega_dot[i], r) \
            + _cross3(omega[i], _cross3(omega[i], r))
        i_w = fk.link_rot[i] @ link.inertia @ fk.link_rot[i].T
        force = link.mass * (a_c - gravity)
        torque = i_w @ omega_dot[i] + _cross3(omega[i], i_w @ omega[i])
        j = _point_jacobian(model, fk, i, c)
        out += j[0:3].T @ force + j[3:6].T @ torque
    return out


def _accumulate_project(model: RobotModel, phi: np.ndarray,
                        w: np.ndarray) -> np.ndarray:
    """Sum per-body spatial forces (at the world origin) over subtrees and
    pair them with the motion subspaces.  Mutates w into subtree sums."""
    for i in range(len(model.links) - 1, 0, -1):
        w[model.links[i].parent] += w[i]
    out = np.zeros(model.nv)
    out[0:6] = phi[0:6] @ w[0]
    for i, link in enumerate(model.links):
        if link.joint_index >= 0:
            row = 6 + link.joint_index
            out[row] = phi[row] @ w[i]
    return out


def _bias_forces_fk(model: RobotModel, fk: FramePoses, nu: np.ndarray,
                    gravity: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    phi = _motion_subspaces(model, fk)
    omega, omega_dot, _, a_o = _body_motion(model, fk, nu, np.zeros(model.nv))
    n_links = len(model.links)
    w = np.zeros((n_links, 6))
    w_grav = np.zeros((n_links, 6))
    for i, link in enumerate(model.links):
        c = fk.link_pos[i] + fk.link_rot[i] @ link.com
        r = c - fk.link_pos[i]
        a_c = a_o[i] + _cross3(omega_dot[i], r) \
            + _cross3(omega[i], _cross3(omega[i], r))
        i_w = fk.link_rot[i] @ link.inertia @ fk.link_rot[i].T
        force = link.mass * (a_c - gravity)
        torque = i_w @ omega_dot[i] + _cross3(omega[i], i_w @ omega[i])
        w[i, 0:3] = force
        w[i, 3:6] = torque + _cross3(c, force)
        f_g = -link.mass * gravity
        w_grav[i, 0:3] = f_g
        w_grav[i, 3:6] = _cross3(c, f_g)
    h = _accumulate_project(model, phi, w)
    g_term = _accumulate_project(model, phi, w_grav)
    return h, g_term


def bias_forces(model: RobotModel, q: Configuration, nu,
                gravity=GRAVITY) -> tuple[np.ndarray, np.ndarray]:
    """(h, G): Coriolis/centrifugal + gravity bias, and gravity term alone.

    Backward force accumulation over the tree; agrees with the point-Jacobian
    inverse-dynamics route at zero acceleration."""
    nu = np.asarray(nu, dtype=float).reshape(model.nv)
    gravity = np.asarray(gravity, dtype=float).reshape(3)
    fk = forward_kinematics(model, q)
    return _bias_forces_fk(model, fk, nu, gravity)


def actuation_selector(model: RobotModel) -> np.ndarray:
    """B mapping joint torques into generalized forces: (0; I)."""
    b = np.zeros((model.nv, model.n_joints))
    b[6:, :] = np.eye(model.n_joints)
    return b


@dataclass
class DynamicsTerms:
    M: np.ndarray
    h: np.ndarray
    G: np.ndarray
    B_sel: np.ndarray


def dynamics_terms(model: RobotModel, q: Configuration, nu,
                   gravity=GRAVITY) -> DynamicsTerms:
    nu = np.asarray(nu, dtype=float).reshape(model.nv)
    gravity = np.asarray(gravity, dtype=float).reshape(3)
    fk = forward_kinematics(model, q)
    h, g_term = _bias_forces_fk(model, fk, nu, gravity)
    return DynamicsTerms(M=_mass_matrix_fk(model, fk), h=h, G=g_term,
                         B_sel=actuation_selector(model))


# ---------------------------------------------------------------------------
# contact stacks


@dataclass
class ContactStack:
    frames: tuple[str, ...]
    jacobian: np.ndarray   # (6*n_c) x (n+6), frame blocks in declaration order
    drift: np.ndarray      # stacked Jdot nu, (6*n_c)

    @property
    def j_base(self) -> np.ndarray:
        return self.jacobian[:, :6]

    @property
    def j_joints(self) -> np.ndarray:
        return self.jacobian[:, 6:]


def frame_drift(model: RobotModel, q: Configuration, nu, frame: str) -> np.ndarray:
    """Jdot nu of a frame: its 6D acceleration at zero generalized accel."""
    nu = np.asarray(nu, dtype=float).reshape(model.nv)
    fk = forward_kinematics(model, q)
    omega, omega_dot, v_o, a_o = _body_motion(model, fk, nu, np.zeros(model.nv))
    link, _, offset = _frame_link_and_offset(model, frame)
    r = fk.link_rot[link] @ offset
    a_pt = a_o[link] + _cross3(omega_dot[link], r) \
        + _cross3(omega[link], _cross3(omega[link], r))
    return np.concatenate([a_pt, omega_dot[link]])


def contact_stack(model: RobotModel, q: Configuration, nu,
                  contact_frames) -> ContactStack:
    frames = tuple(contact_frames)
    rows = []
    drifts = []
    for f in frames:
        rows.append(frame_jacobian(model, q, f))
        drifts.append(frame_drift(model, q, nu, f))
    jac = np.vstack(rows) if rows else np.zeros((0, model.nv))
    drift = np.concatenate(drifts) if drifts else np.zeros(0)
    return ContactStack(frames=frames, jacobian=jac, drift=drift)
