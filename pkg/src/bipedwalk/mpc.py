"""Receding-horizon center-of-mass control on the table-cart model.

Per horizontal axis the center of mass is a triple integrator driven by jerk,
and the ground pressure point is the affine output p - (z/g) * a.  Tracking a
reference pressure trajectory subject to support-polygon halfspaces is a
strictly convex QP.  build_mpc_qp states the problem in multiple-shooting
form (states and inputs both decision variables, dynamics as equality rows);
MpcController eliminates the states analytically onto the jerk sequence,
whose Hessian is constant and precomputed, so each tick costs one structured
solve.  Both routes are kept and cross-checked in the tests.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import convex_hull, polygon_halfspaces, rect_corners
from .qp import QpInfeasibleError, QpOptions, QpProblem, QpSolution, solve


@dataclass(frozen=True)
class TableCartModel:
    """Point mass at constant height; pressure point p - (z/g) a."""

    z_com: float = 0.58
    gravity: float = 9.81

    def __post_init__(self):
        if self.z_com <= 0.0 or self.gravity <= 0.0:
            raise ValueError("z_com and gravity must be positive")

    @property
    def output_matrix(self) -> np.ndarray:
        """(2, 6) map from (pos, vel, acc) to the pressure point."""
        c = np.zeros((2, 6))
        c[:, 0:2] = np.eye(2)
        c[:, 4:6] = -(self.z_com / self.gravity) * np.eye(2)
        return c

    def discretize(self, dt: float) -> tuple[np.ndarray, np.ndarray]:
        """Exact zero-order-hold triple integrator (A, B) for step dt."""
        if dt <= 0.0:
            raise ValueError("dt must be positive")
        a3 = np.array([[1.0, dt, 0.5 * dt * dt],
                       [0.0, 1.0, dt],
                       [0.0, 0.0, 1.0]])
        b3 = np.array([dt**3 / 6.0, 0.5 * dt * dt, dt])
        return np.kron(a3, np.eye(2)), np.kron(b3.reshape(3, 1), np.eye(2))


def zmp_output(model: TableCartModel, chi: np.ndarray) -> np.ndarray:
    """Pressure point of a (6,) state (or batch (..., 6))."""
    chi = np.asarray(chi, dtype=float)
    return chi[..., 0:2] - (model.z_com / model.gravity) * chi[..., 4:6]


def integrate_com(chi: np.ndarray, jerk: np.ndarray, dt: float) -> np.ndarray:
    """Exact constant-jerk update of a (pos, vel, acc) state."""
    chi = np.asarray(chi, dtype=float).reshape(6)
    u = np.asarray(jerk, dtype=float).reshape(2)
    p, v, a = chi[0:2], chi[2:4], chi[4:6]
    return np.concatenate([
        p + v * dt + 0.5 * a * dt * dt + u * dt**3 / 6.0,
        v + a * dt + 0.5 * u * dt * dt,
        a + u * dt,
    ])


def support_halfspaces(feet: list[tuple[np.ndarray, float]], half_length: float,
                       half_width: float, margin: float = 0.0
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Halfspace rows (G, h) with G p <= h containing the support region.

    feet is a list of (center_xy, yaw) sole rectangles; the region is the
    convex hull of their corners, shrunk inward by margin.
    """
    if not feet:
        raise ValueError("support region needs at least one foot")
    corners = np.vstack([rect_corners(np.asarray(c, dtype=float).reshape(2),
                                      yaw, half_length, half_width)
                         for c, yaw in feet])
    hull = convex_hull(corners)
    return polygon_halfspaces(hull, margin=margin)


def _weight(w, name: str) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.ndim == 0:
        w = float(w) * np.eye(2)
    if w.shape != (2, 2):
        raise ValueError(f"{name} must be a scalar or a (2, 2) matrix")
    return w


@dataclass
class MpcProblemData:
    """One preview instance: references and support regions per node."""

    x0: np.ndarray                      # (6,) current state
    zmp_refs: np.ndarray                # (N, 2) references at nodes 1..N
    supports: list[tuple[np.ndarray, np.ndarray] | None] | None = None
    # supports[k] constrains the pressure point at node k+1; None rows are
    # unconstrained nodes


def build_mpc_qp(model: TableCartModel, data: MpcProblemData, dt: float,
                 q_weight=1.0, r_weight=1e-6) -> QpProblem:
    """Multiple-shooting statement of the preview problem.

    Decision vector z = (chi_1 .. chi_N, u_0 .. u_{N-1}), dynamics as
    equality rows chi_{k+1} - A chi_k - B u_k = 0, support rows composed
    with the pressure-point output per node.
    """
    a_d, b_d = model.discretize(dt)
    c_out = model.output_matrix
    q_w = _weight(q_weight, "q_weight")
    r_w = _weight(r_weight, "r_weight")
    refs = np.asarray(data.zmp_refs, dtype=float)
    n = refs.shape[0]
    if n < 1 or refs.shape[1] != 2:
        raise ValueError("zmp_refs must be (N, 2) with N >= 1")
    x0 = np.asarray(data.x0, dtype=float).reshape(6)
    dim = 6 * n + 2 * n

    hess = np.zeros((dim, dim))
    grad = np.zeros(dim)
    cqc = c_out.T @ q_w @ c_out
    for k in range(n):
        sl = slice(6 * k, 6 * k + 6)
        hess[sl, sl] = cqc
        grad[6 * k:6 * k + 6] = -c_out.T @ q_w @ refs[k]
        su = slice(6 * n + 2 * k, 6 * n + 2 * k + 2)
        hess[su, su] = r_w

    a_eq = np.zeros((6 * n, dim))
    b_eq = np.zeros(6 * n)
    for k in range(n):
        rows = slice(6 * k, 6 * k + 6)
        a_eq[rows, 6 * k:6 * k + 6] = np.eye(6)
        if k == 0:
            b_eq[rows] = a_d @ x0
        else:
            a_eq[rows, 6 * (k - 1):6 * k] = -a_d
        a_eq[rows, 6 * n + 2 * k:6 * n + 2 * k + 2] = -b_d

    blocks_a, blocks_b = [], []
    supports = data.supports or [None] * n
    if len(supports) != n:
        raise ValueError("supports must list one region (or None) per node")
    for k, sup in enumerate(supports):
        if sup is None:
            continue
        g, h = sup
        g = np.atleast_2d(np.asarray(g, dtype=float))
        rows = np.zeros((g.shape[0], dim))
        rows[:, 6 * k:6 * k + 6] = g @ c_out
        blocks_a.append(rows)
        blocks_b.append(np.asarray(h, dtype=float).reshape(-1))
    a_in = np.vstack(blocks_a) if blocks_a else None
    b_in = np.concatenate(blocks_b) if blocks_b else None
    return QpProblem(H=hess, g=grad, A_eq=a_eq, b_eq=b_eq,
                     A_in=a_in, b_in=b_in)


def split_mpc_solution(x: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """(states (N, 6), inputs (N, 2)) from a multiple-shooting solution."""
    x = np.asarray(x, dtype=float)
    return x[:6 * n].reshape(n, 6), x[6 * n:].reshape(n, 2)


class MpcInfeasibleError(RuntimeError):
    """No jerk sequence keeps the pressure point inside the support regions."""

    def __init__(self, node: int, violation: float):
        super().__init__(f"preview node {node} support constraint infeasible "
                         f"(violation {violation:.3e})")
        self.node = node
        self.violation = violation


@dataclass
class MpcStep:
    jerk: np.ndarray            # (2,) first input of the optimal sequence
    zmp: np.ndarray             # (2,) pressure point predicted at node 1
    inputs: np.ndarray          # (N, 2) full optimal sequence
    states: np.ndarray          # (N, 6) predicted states at nodes 1..N
    iterations: int
    n_active: int


class MpcController:
    """Condensed preview controller with a constant precomputed Hessian."""

    def __init__(self, model: TableCartModel, dt: float = 0.02, n_nodes: int = 100,
                 q_weight=1.0, r_weight=1e-6, options: QpOptions | None = None):
        if n_nodes < 1:
            raise ValueError("need at least one preview node")
        self.model = model
        self.dt = float(dt)
        self.n = int(n_nodes)
        self.q = _weight(q_weight, "q_weight")
        self.r = _weight(r_weight, "r_weight")
        self.options = options
        a_d, b_d = model.discretize(dt)
        c_out = model.output_matrix
        n = self.n
        # state transition powers and input impulse maps
        powers = [np.eye(6)]
        for _ in range(n):
            powers.append(a_d @ powers[-1])
        impulses = [p @ b_d for p in powers]        # A^j B, (6, 2)
        # chi_k = free[k] x0 + M[k] u  (k = 1..N stored at index k-1)
        self._free = np.stack([powers[k] for k in range(1, n + 1)])      # (N,6,6)
        m_full = np.zeros((n, 6, 2 * n))
        for k in range(1, n + 1):
            for j in range(k):
                m_full[k - 1][:, 2 * j:2 * j + 2] = impulses[k - 1 - j]
        self._m = m_full
        # output stacks: y = Phi u + F x0
        self._phi = np.concatenate([c_out @ m_full[k] for k in range(n)])   # (2N, 2N)
        self._f_out = np.concatenate([c_out @ self._free[k] for k in range(n)])
        q_bar = np.kron(np.eye(n), self.q)
        r_bar = np.kron(np.eye(n), self.r)
        self._hess = self._phi.T @ q_bar @ self._phi + r_bar
        self._hess = 0.5 * (self._hess + self._hess.T)
        self._phi_q = self._phi.T @ q_bar
        self._c_out = c_out
        self._last: QpSolution | None = None
        self._last_rows = -1

    def reset(self) -> None:
        self._last = None
        self._last_rows = -1

    def step(self, data: MpcProblemData) -> MpcStep:
        n = self.n
        x0 = np.asarray(data.x0, dtype=float).reshape(6)
        refs = np.asarray(data.zmp_refs, dtype=float)
        if refs.shape != (n, 2):
            raise ValueError(f"zmp_refs must be ({n}, 2)")
        free_out = self._f_out @ x0                      # (2N,)
        grad = self._phi_q @ (free_out - refs.reshape(-1))

        blocks_a, blocks_b, row_nodes = [], [], []
        supports = data.supports or [None] * n
        if len(supports) != n:
            raise ValueError("supports must list one region (or None) per node")
        for k, sup in enumerate(supports):
            if sup is None:
                continue
            g, h = sup
            g6 = np.atleast_2d(np.asarray(g, dtype=float)) @ self._c_out
            blocks_a.append(g6 @ self._m[k])
            blocks_b.append(np.asarray(h, dtype=float).reshape(-1)
                            - g6 @ (self._free[k] @ x0))
            row_nodes.extend([k + 1] * g6.shape[0])
        a_in = np.vstack(blocks_a) if blocks_a else None
        b_in = np.concatenate(blocks_b) if blocks_b else None
        problem = QpProblem(H=self._hess, g=grad, A_in=a_in, b_in=b_in)

        warm = self._last if self._last is not None and \
            self._last_rows == (0 if b_in is None else len(b_in)) else None
        try:
            sol = solve(problem, warm_start=warm, options=self.options)
        except QpInfeasibleError as err:
            node, violation = 0, err.max_violation
            if a_in is not None and err.x is not None:
                resid = a_in @ err.x - b_in
                worst = int(np.argmax(resid))
                node, violation = row_nodes[worst], float(resid[worst])
            raise MpcInfeasibleError(node, violation) from err
        self._last = sol
        self._last_rows = 0 if b_in is None else len(b_in)

        u = sol.x.reshape(n, 2)
        states = (self._free @ x0) + np.einsum("kij,j->ki", self._m, sol.x)
        return MpcStep(jerk=u[0].copy(), zmp=zmp_output(self.model, states[0]),
                       inputs=u, states=states, iterations=sol.iterations,
                       n_active=len(sol.active_set))
