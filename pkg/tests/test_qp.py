"""QP solver versus exhaustive active-set enumeration."""
from __future__ import annotations

from itertools import combinations

import numpy as np
import pytest

from bipedwalk.qp import (
    QpInfeasibleError,
    QpOptions,
    QpProblem,
    QpSolution,
    kkt_residual,
    load_qp,
    save_qp,
    solve,
)


def brute_force_qp(problem: QpProblem, tol: float = 1e-9):
    """Enumerate every inequality subset as a candidate active set and keep
    the best KKT-consistent point.  Independent oracle for small problems."""
    n, me, mi = problem.dim, problem.n_eq, problem.n_in
    best_x, best_f = None, np.inf
    for k in range(mi + 1):
        for subset in combinations(range(mi), k):
            a = np.vstack((problem.A_eq, problem.A_in[list(subset)]))
            b = np.concatenate((problem.b_eq, problem.b_in[list(subset)]))
            m = me + k
            kkt = np.block([[problem.H, a.T], [a, np.zeros((m, m))]])
            rhs = np.concatenate((-problem.g, b))
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError:
                continue
            if not np.all(np.isfinite(sol)):
                continue
            if np.linalg.norm(kkt @ sol - rhs, np.inf) > 1e-7:
                continue
            x, lam_in = sol[:n], sol[n + me:]
            if mi and np.any(problem.A_in @ x > problem.b_in + tol):
                continue
            if np.any(lam_in < -tol):
                continue
            f = problem.objective(x)
            if f < best_f - 1e-12:
                best_f, best_x = f, x
    return best_x, best_f


def random_problem(rng: np.random.Generator, feasible: bool = True) -> QpProblem:
    n = int(rng.integers(2, 7))
    me = int(rng.integers(0, min(3, n)))
    mi = int(rng.integers(1, 9))
    m = rng.normal(size=(n, n))
    H = m @ m.T + 0.3 * np.eye(n)
    g = rng.normal(scale=3.0, size=n)
    x_feas = rng.normal(size=n)
    A_eq = rng.normal(size=(me, n))
    b_eq = A_eq @ x_feas
    A_in = rng.normal(size=(mi, n))
    slack = rng.uniform(0.0, 1.0, size=mi) if feasible else rng.uniform(-2.0, 0.5, size=mi)
    b_in = A_in @ x_feas + slack
    return QpProblem(H=H, g=g, A_eq=A_eq, b_eq=b_eq, A_in=A_in, b_in=b_in)


def test_simple_inequality_example():
    p = QpProblem(H=np.eye(2), g=np.zeros(2), A_in=[[-1.0, 0.0]], b_in=[-1.0])
    sol = solve(p)
    np.testing.assert_allclose(sol.x, [1.0, 0.0], atol=1e-7)
    assert sol.active_set == (0,)
    assert sol.in_multipliers[0] == pytest.approx(1.0, abs=1e-7)


def test_equality_multiplier_convention():
    p = QpProblem(H=np.eye(2), g=np.zeros(2), A_eq=[[1.0, 1.0]], b_eq=[2.0])
    sol = solve(p)
    np.testing.assert_allclose(sol.x, [1.0, 1.0], atol=1e-9)
    assert sol.eq_multipliers[0] == pytest.approx(-1.0, abs=1e-8)
    # convention: H x + g + A_eq' lam = 0
    res = p.H @ sol.x + p.g + p.A_eq.T @ sol.eq_multipliers
    np.testing.assert_allclose(res, 0.0, atol=1e-8)


def test_unconstrained_fast_path():
    H = np.diag([2.0, 4.0])
    g = np.array([-2.0, -8.0])
    sol = solve(QpProblem(H=H, g=g))
    np.testing.assert_allclose(sol.x, [1.0, 2.0], atol=1e-7)
    assert sol.active_set == ()


def test_phase1_infeasible_reports_minimal_total_violation():
    # x <= 0 and x >= 1 cannot both hold; any x in [0, 1] attains the
    # minimal total violation of 1, and the report matches the held point
    p = QpProblem(H=np.eye(1), g=np.zeros(1), A_in=[[1.0], [-1.0]], b_in=[0.0, -1.0])
    with pytest.raises(QpInfeasibleError) as exc:
        solve(p)
    x = exc.value.x
    viol = np.maximum(p.A_in @ x - p.b_in, 0.0)
    assert exc.value.max_violation == pytest.approx(float(viol.max()), abs=1e-9)
    assert float(viol.sum()) == pytest.approx(1.0, abs=1e-4)


def test_infeasible_equalities_detected():
    p = QpProblem(H=np.eye(2), g=np.zeros(2),
                  A_eq=[[1.0, 0.0], [1.0, 0.0]], b_eq=[0.0, 1.0])
    with pytest.raises(QpInfeasibleError):
        solve(p)


def test_matches_enumeration_oracle_on_random_instances():
    rng = np.random.default_rng(2024)
    checked_active = 0
    for _ in range(250):
        p = random_problem(rng)
        sol = solve(p)
        x_ref, f_ref = brute_force_qp(p)
        assert x_ref is not None
        np.testing.assert_allclose(sol.x, x_ref, atol=1e-8)
        assert sol.objective == pytest.approx(f_ref, abs=1e-8)
        assert kkt_residual(p, sol)["max"] <= 1e-6
        if sol.active_set:
            checked_active += 1
    assert checked_active > 50  # the sample hits genuinely constrained optima


def test_flags_infeasible_random_instances():
    rng = np.random.default_rng(99)
    found = 0
    for _ in range(100):
        p = random_problem(rng, feasible=True)
        # append a contradiction of the first row
        a = p.A_in[0]
        A_in = np.vstack((p.A_in, -a))
        b_in = np.concatenate((p.b_in, [-p.b_in[0] - 1.0]))
        bad = QpProblem(H=p.H, g=p.g, A_eq=p.A_eq, b_eq=p.b_eq, A_in=A_in, b_in=b_in)
        try:
            solve(bad)
        except QpInfeasibleError:
            found += 1
    assert found == 100


def test_determinism_bitwise():
    rng = np.random.default_rng(5)
    for _ in range(20):
        p = random_problem(rng)
        s1 = solve(p)
        s2 = solve(p)
        assert s1.x.tobytes() == s2.x.tobytes()
        assert s1.iterations == s2.iterations
        assert s1.active_set == s2.active_set


def test_scale_robustness():
    rng = np.random.default_rng(17)
    for _ in range(30):
        p = random_problem(rng)
        sol = solve(p)
        scaled = QpProblem(H=1e3 * p.H, g=1e3 * p.g, A_eq=p.A_eq, b_eq=p.b_eq,
                           A_in=p.A_in, b_in=p.b_in)
        sol_s = solve(scaled)
        np.testing.assert_allclose(
            sol_s.x, sol.x, atol=1e-6 * (1.0 + np.linalg.norm(sol.x)))


def test_warm_start_reduces_iterations():
    rng = np.random.default_rng(31)
    tried = 0
    warm_total = cold_total = 0
    for _ in range(50):
        p = random_problem(rng)
        sol = solve(p)
        if not sol.active_set:
            continue
        # shift the objective slightly: same active set expected
        p2 = QpProblem(H=p.H, g=p.g + 1e-3 * rng.normal(size=p.dim),
                       A_eq=p.A_eq, b_eq=p.b_eq, A_in=p.A_in, b_in=p.b_in)
        cold = solve(p2)
        warm = solve(p2, warm_start=sol)
        np.testing.assert_allclose(warm.x, cold.x, atol=1e-7)
        # the warm path pays one validating subproblem solve, never more
        assert warm.iterations <= cold.iterations + 1
        warm_total += warm.iterations
        cold_total += cold.iterations
        tried += 1
    assert tried > 10
    assert warm_total <= cold_total


def test_psd_hessian_regularization():
    # rank-deficient H: regularization keeps the KKT solvable
    H = np.array([[1.0, 0.0], [0.0, 0.0]])
    g = np.array([-1.0, 0.0])
    p = QpProblem(H=H, g=g, A_in=[[0.0, -1.0]], b_in=[0.5])
    sol = solve(p, options=QpOptions(reg=1e-9))
    assert sol.x[0] == pytest.approx(1.0, abs=1e-6)


def test_kkt_residual_reports_violations():
    p = QpProblem(H=np.eye(2), g=np.zeros(2), A_in=[[-1.0, 0.0]], b_in=[-1.0])
    sol = solve(p)
    bad = QpSolution(x=np.array([0.0, 0.0]), objective=0.0,
                     eq_multipliers=np.zeros(0), in_multipliers=np.zeros(1),
                     active_set=(), iterations=0)
    r = kkt_residual(p, bad)
    assert r["primal_in"] == pytest.approx(1.0)
    assert kkt_residual(p, sol)["max"] <= 1e-7


def test_dump_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    p = random_problem(rng)
    f = tmp_path / "problem.qp"
    save_qp(f, p)
    q = load_qp(f)
    np.testing.assert_array_equal(q.H, p.H)
    np.testing.assert_array_equal(q.g, p.g)
    np.testing.assert_array_equal(q.A_eq, p.A_eq)
    np.testing.assert_array_equal(q.b_eq, p.b_eq)
    np.testing.assert_array_equal(q.A_in, p.A_in)
    np.testing.assert_array_equal(q.b_in, p.b_in)
    s1, s2 = solve(p), solve(q)
    assert s1.x.tobytes() == s2.x.tobytes()
