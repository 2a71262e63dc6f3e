"""Dense convex QP solver (primal active set) shared by MPC, IK and WBC.

Solves  min 1/2 x' H x + g' x  s.t.  A_eq x = b_eq,  A_in x <= b_in
with H symmetric positive semidefinite.  A small diagonal regularization
makes the factorized Hessian positive definite.  Equality-constrained
subproblems are solved through a Schur complement on a cached Cholesky
factor; ties in constraint selection are broken by lowest row index
(Bland's rule) so the iterate sequence is deterministic and cycle-free.
Infeasibility is detected by a Phase-1 slack-minimization QP.

Multiplier convention at the optimum:

    H x + g + A_eq' lam_eq + A_in' lam_in = 0,   lam_in >= 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve


@dataclass
class QpProblem:
    H: np.ndarray
    g: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_in: np.ndarray | None = None
    b_in: np.ndarray | None = None

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        self.g = np.asarray(self.g, dtype=float).reshape(-1)
        n = self.dim
        if self.H.shape != (n, n):
            raise ValueError(f"H must be {n}x{n}, got {self.H.shape}")
        if self.A_eq is None or np.size(self.A_eq) == 0:
            self.A_eq = np.zeros((0, n))
            self.b_eq = np.zeros(0)
        else:
            self.A_eq = np.asarray(self.A_eq, dtype=float).reshape(-1, n)
            self.b_eq = np.asarray(self.b_eq, dtype=float).reshape(-1)
        if self.A_in is None or np.size(self.A_in) == 0:
            self.A_in = np.zeros((0, n))
            self.b_in = np.zeros(0)
        else:
            self.A_in = np.asarray(self.A_in, dtype=float).reshape(-1, n)
            self.b_in = np.asarray(self.b_in, dtype=float).reshape(-1)
        if len(self.b_eq) != self.A_eq.shape[0] or len(self.b_in) != self.A_in.shape[0]:
            raise ValueError("constraint matrix/vector row counts disagree")

    @property
    def dim(self) -> int:
        return len(self.g)

    @property
    def n_eq(self) -> int:
        return self.A_eq.shape[0]

    @property
    def n_in(self) -> int:
        return self.A_in.shape[0]

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.H @ x + self.g @ x)


@dataclass
class QpSolution:
    x: np.ndarray
    objective: float
    eq_multipliers: np.ndarray
    in_multipliers: np.ndarray
    active_set: tuple[int, ...]
    iterations: int
    status: str = "optimal"


@dataclass
class QpOptions:
    reg: float = 1e-9            # diagonal shift making H + reg*I PD
    feas_tol: float = 1e-8
    mult_tol: float = 1e-9       # multiplier negativity threshold
    step_tol: float = 1e-11
    max_iters: int | None = None


class QpInfeasibleError(RuntimeError):
    """Raised when Phase 1 cannot reduce the constraint slacks to zero."""

    def __init__(self, max_violation: float, x: np.ndarray | None = None):
        super().__init__(f"QP infeasible: minimal max constraint violation {max_violation:.3e}")
        self.max_violation = max_violation
        self.x = x


class _Core:
    """Active-set iteration on a fixed problem with a cached Cholesky."""

    def __init__(self, problem: QpProblem, options: QpOptions):
        self.p = problem
        self.opt = options
        n = problem.dim
        self.h_sym = 0.5 * (problem.H + problem.H.T)
        # shift relative to the Hessian scale so badly scaled problems are
        # not biased; one refinement pass in eqp() removes the remainder
        scale = float(np.max(np.abs(np.diag(self.h_sym)), initial=0.0))
        h_reg = self.h_sym + options.reg * max(scale, 1e-12) * np.eye(n)
        try:
            self.chol = cho_factor(h_reg, lower=True)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - reg should prevent this
            raise ValueError("Hessian not positive definite after regularization") from exc
        self.row_norms = (np.linalg.norm(problem.A_in, axis=1)
                          if problem.n_in else np.zeros(0))
        self.iterations = 0

    def eqp(self, working: list[int], b_act: np.ndarray):
        """Solve the equality-constrained QP  min 1/2 x'Hx + g'x  s.t.
        A_act x = b_act  via Schur complement; returns (x, lam) or None when
        the active rows are linearly dependent."""
        self.iterations += 1
        a_act = np.vstack((self.p.A_eq, self.p.A_in[working]))
        u = cho_solve(self.chol, -self.p.g)
        if a_act.shape[0] == 0:
            u += cho_solve(self.chol, -(self.h_sym @ u + self.p.g))
            return u, np.zeros(0)
        y = cho_solve(self.chol, a_act.T)
        s = a_act @ y
        r = a_act @ u - b_act
        try:
            lam = np.linalg.solve(s, r)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(lam)):
            return None
        if np.linalg.norm(s @ lam - r, np.inf) > 1e-6 * (np.linalg.norm(r, np.inf) + 1.0):
            return None  # numerically dependent working set
        x = u - y @ lam
        # one KKT refinement pass against the unshifted Hessian
        r1 = self.h_sym @ x + self.p.g + a_act.T @ lam
        r2 = a_act @ x - b_act
        t = cho_solve(self.chol, r1)
        try:
            d_lam = np.linalg.solve(s, r2 - a_act @ t)
        except np.linalg.LinAlgError:  # pragma: no cover - s solved above
            return x, lam
        x = x - t - y @ d_lam
        lam = lam + d_lam
        return x, lam

    def run(self, x: np.ndarray, working: list[int]) -> QpSolution:
        """Primal active-set loop from a feasible x with active rows `working`."""
        p, opt = self.p, self.opt
        n_in = p.n_in
        max_iters = opt.max_iters or (3 * (p.dim + n_in + p.n_eq) + 20)
        for _ in range(max_iters):
            b_act = np.concatenate((p.b_eq, p.b_in[working]))
            sol = self.eqp(working, b_act)
            if sol is None:
                # dependent working set: drop the most recently added row
                working.pop()
                continue
            x_star, lam = sol
            step = x_star - x
            if np.linalg.norm(step, np.inf) <= opt.step_tol * (1.0 + np.linalg.norm(x, np.inf)):
                lam_in_w = lam[p.n_eq:]
                neg = [k for k, lw in enumerate(lam_in_w) if lw < -opt.mult_tol]
                if not neg:
                    lam_in = np.zeros(n_in)
                    for k, row in enumerate(working):
                        lam_in[row] = max(lam_in_w[k], 0.0)
                    return QpSolution(
                        x=x_star, objective=p.objective(x_star),
                        eq_multipliers=lam[:p.n_eq], in_multipliers=lam_in,
                        active_set=tuple(sorted(working)), iterations=self.iterations)
                # Bland: drop the lowest constraint index among negative multipliers
                drop = min(neg, key=lambda k: working[k])
                working.pop(drop)
                continue
            # ratio test over rows outside the working set; first (lowest
            # index) minimizer wins so the iterate sequence cannot cycle
            alpha = 1.0
            blocking = -1
            if n_in:
                dens = p.A_in @ step
                slacks = np.maximum(p.b_in - p.A_in @ x, 0.0)
                step_norm = np.linalg.norm(step)
                usable = dens > 1e-13 * (self.row_norms * step_norm + 1e-300)
                if working:
                    usable[np.asarray(working, dtype=int)] = False
                if np.any(usable):
                    ratios = np.full(n_in, np.inf)
                    ratios[usable] = slacks[usable] / dens[usable]
                    best = int(np.argmin(ratios))
                    if ratios[best] < 1.0 - 1e-15:
                        alpha = float(ratios[best])
                        blocking = best
            x = x + alpha * step
            if blocking >= 0:
                working.append(blocking)
        raise RuntimeError(f"active-set iteration limit {max_iters} exceeded")


def _phase1(problem: QpProblem, x0: np.ndarray, options: QpOptions) -> np.ndarray:
    """Find a feasible point by minimizing inequality slacks.

    Solves  min 1's + (delta/2)(|x - x_anchor|^2 + |s|^2)  subject to
    A_in x - s <= b_in, s >= 0 (rows scaled to unit norm) and the original
    equalities.  The linear slack cost pushes s onto its bound, so a
    feasible problem ends with s = 0 exactly (up to subproblem precision)
    instead of the biased optimum a pure quadratic slack cost would give,
    while the uniform tiny quadratic keeps the Hessian positive definite
    at condition number 1.  The anchor re-centers between passes, so its
    bias vanishes as the iterate approaches the feasible set; a pass that
    fails to halve the worst violation certifies irreducibility.
    """
    n, mi = problem.dim, problem.n_in
    delta = 1e-4
    norms = np.linalg.norm(problem.A_in, axis=1)
    scale = np.where(norms > 0.0, norms, 1.0)
    a_s = problem.A_in / scale[:, None]
    b_s = problem.b_in / scale
    h = delta * np.eye(n + mi)
    a_eq = np.hstack((problem.A_eq, np.zeros((problem.n_eq, mi))))
    a_in = np.vstack((
        np.hstack((a_s, -np.eye(mi))),
        np.hstack((np.zeros((mi, n)), -np.eye(mi))),
    ))
    b_in = np.concatenate((b_s, np.zeros(mi)))
    sub_opt = QpOptions(reg=options.reg, feas_tol=options.feas_tol,
                        mult_tol=options.mult_tol, step_tol=options.step_tol,
                        max_iters=10 * (n + 2 * mi + problem.n_eq) + 100)
    x = np.asarray(x0, dtype=float)
    worst = float(np.max(a_s @ x - b_s, initial=0.0))
    for _ in range(6):
        if worst <= options.feas_tol:
            return x
        g = np.concatenate((-delta * x, np.ones(mi)))
        p1 = QpProblem(H=h, g=g, A_eq=a_eq, b_eq=problem.b_eq.copy(),
                       A_in=a_in.copy(), b_in=b_in.copy())
        s0 = np.maximum(a_s @ x - b_s, 0.0) + 1.0
        sol = _Core(p1, sub_opt).run(np.concatenate((x, s0)), [])
        x_new = sol.x[:n]
        new_worst = float(np.max(a_s @ x_new - b_s, initial=0.0))
        raw = float(np.max(problem.A_in @ x_new - problem.b_in, initial=0.0))
        if new_worst >= 0.5 * worst and new_worst > options.feas_tol:
            raise QpInfeasibleError(raw, x=x_new)
        x, worst = x_new, new_worst
    if worst <= options.feas_tol:
        return x
    raise QpInfeasibleError(float(np.max(problem.A_in @ x - problem.b_in, initial=0.0)), x=x)


def solve(problem: QpProblem, warm_start=None, options: QpOptions | None = None) -> QpSolution:
    """Solve a convex QP; deterministic for identical inputs.

    warm_start may be a QpSolution or an iterable of inequality row indices;
    when the warm working set reproduces a feasible subproblem optimum the
    main loop starts there, otherwise a cold start (Phase 1 if needed) is
    used.
    """
    opt = options or QpOptions()
    core = _Core(problem, opt)
    n_in = problem.n_in

    # unconstrained / inactive fast path
    if problem.n_eq == 0:
        x_uc, _ = core.eqp([], np.zeros(0))
        if n_in == 0 or np.all(problem.A_in @ x_uc <= problem.b_in + opt.feas_tol):
            return QpSolution(
                x=x_uc, objective=problem.objective(x_uc),
                eq_multipliers=np.zeros(0), in_multipliers=np.zeros(n_in),
                active_set=(), iterations=core.iterations)

    # warm start: adopt the previous active set when it checks out
    if warm_start is not None:
        rows = warm_start.active_set if isinstance(warm_start, QpSolution) else tuple(warm_start)
        rows = [int(r) for r in rows if 0 <= int(r) < n_in]
        if len(set(rows)) == len(rows):
            b_act = np.concatenate((problem.b_eq, problem.b_in[rows]))
            sol = core.eqp(list(rows), b_act)
            if sol is not None:
                x_w, _ = sol
                if np.all(problem.A_in @ x_w <= problem.b_in + opt.feas_tol):
                    return core.run(x_w, list(rows))

    # cold start: equality-consistent point, then Phase 1 if still infeasible
    if problem.n_eq > 0:
        x0, residual, *_ = np.linalg.lstsq(problem.A_eq, problem.b_eq, rcond=None)
        eq_err = np.linalg.norm(problem.A_eq @ x0 - problem.b_eq, np.inf)
        if eq_err > 1e-6:
            raise QpInfeasibleError(float(eq_err), x=x0)
    else:
        x0 = np.zeros(problem.dim)
    if n_in > 0 and not np.all(problem.A_in @ x0 <= problem.b_in + opt.feas_tol):
        x0 = _phase1(problem, x0, opt)
    working = [i for i in range(n_in)
               if abs(problem.A_in[i] @ x0 - problem.b_in[i]) <= opt.feas_tol]
    # start from a consistent working set but avoid over-determined sets
    if len(working) + problem.n_eq > problem.dim:
        working = working[:max(problem.dim - problem.n_eq, 0)]
    return core.run(x0, working)


def kkt_residual(problem: QpProblem, solution: QpSolution) -> dict:
    """KKT residual components at a candidate solution (diagnostics)."""
    x = solution.x
    stationarity = problem.H @ x + problem.g
    if problem.n_eq:
        stationarity = stationarity + problem.A_eq.T @ solution.eq_multipliers
    if problem.n_in:
        stationarity = stationarity + problem.A_in.T @ solution.in_multipliers
    primal_eq = np.abs(problem.A_eq @ x - problem.b_eq) if problem.n_eq else np.zeros(0)
    slack = problem.b_in - problem.A_in @ x if problem.n_in else np.zeros(0)
    out = {
        "stationarity": float(np.linalg.norm(stationarity, np.inf)),
        "primal_eq": float(np.max(primal_eq, initial=0.0)),
        "primal_in": float(np.max(-slack, initial=0.0)),
        "dual": float(np.max(-solution.in_multipliers, initial=0.0)),
        "complementarity": float(np.max(np.abs(solution.in_multipliers * slack), initial=0.0)),
    }
    out["max"] = max(out.values())
    return out


def save_qp(path, problem: QpProblem) -> None:
    """Dump a QP to a self-describing text file (dimensions header, then
    H, g, A_eq, b_eq, A_in, b_in row-major)."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("qpdump 1\n")
        f.write(f"{problem.dim} {problem.n_eq} {problem.n_in}\n")
        for block in (problem.H, problem.g.reshape(1, -1),
                      problem.A_eq, problem.b_eq.reshape(1, -1),
                      problem.A_in, problem.b_in.reshape(1, -1)):
            for row in np.atleast_2d(block):
                f.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_qp(path) -> QpProblem:
    with open(path, "r", encoding="utf-8") as f:
        magic = f.readline().split()
        if magic[:1] != ["qpdump"]:
            raise ValueError("not a qpdump file")
        n, me, mi = (int(v) for v in f.readline().split())
        rows = [np.array([float(v) for v in line.split()]) for line in f if line.strip()]
    expect = n + 1 + (me if me else 0) + (1 if me else 0) + (mi if mi else 0) + (1 if mi else 0)
    # blocks are always written, b vectors as single rows (possibly empty)
    idx = 0
    H = np.array(rows[idx:idx + n]); idx += n
    g = rows[idx]; idx += 1
    A_eq = np.array(rows[idx:idx + me]).reshape(me, n); idx += me
    b_eq = rows[idx] if me else np.zeros(0)
    idx += 1 if me else 0
    A_in = np.array(rows[idx:idx + mi]).reshape(mi, n); idx += mi
    b_in = rows[idx] if mi else np.zeros(0)
    del expect
    return QpProblem(H=H, g=g, A_eq=A_eq, b_eq=b_eq, A_in=A_in, b_in=b_in)
