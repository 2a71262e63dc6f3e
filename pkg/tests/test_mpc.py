"""Preview controller tests, cross-checked against an affine LQ recursion."""
import numpy as np
import pytest
import scipy.linalg

from bipedwalk.mpc import (
    MpcController,
    MpcInfeasibleError,
    MpcProblemData,
    TableCartModel,
    build_mpc_qp,
    integrate_com,
    split_mpc_solution,
    support_halfspaces,
    zmp_output,
)
from bipedwalk.qp import solve


def riccati_tracking(a, b, c, q, r, x0, refs):
    """Affine backward recursion for the output-tracking LQ problem.

    Minimizes sum_{k=1..N} 0.5|C x_k - r_k|^2_Q + sum_{k=0..N-1} 0.5 u_k^T R u_k
    exactly; an independent route to the same optimum as the preview QP.
    """
    n = len(refs)
    s_p = c.T @ q @ c
    p_mat = s_p.copy()
    q_vec = -c.T @ q @ refs[-1]
    gains = []
    for k in range(n - 2, -2, -1):  # k = N-2 .. -1, building u_{k+1} .. u_0
        lam = r + b.T @ p_mat @ b
        k_gain = np.linalg.solve(lam, b.T @ p_mat @ a)
        k_ff = np.linalg.solve(lam, b.T @ q_vec)
        gains.append((k_gain, k_ff))
        p_new = a.T @ p_mat @ a - a.T @ p_mat @ b @ k_gain
        q_new = a.T @ q_vec - a.T @ p_mat @ b @ k_ff
        if k >= 0:  # nodes 1..N-1 carry a state cost; node 0 does not
            p_new = p_new + s_p
            q_new = q_new - c.T @ q @ refs[k]
        p_mat = 0.5 * (p_new + p_new.T)
        q_vec = q_new
    gains.reverse()  # gains[k] produces u_k
    xs, us = [np.asarray(x0, dtype=float)], []
    for k in range(n):
        k_gain, k_ff = gains[k]
        u = -k_gain @ xs[-1] - k_ff
        us.append(u)
        xs.append(a @ xs[-1] + b @ u)
    return np.array(us), np.array(xs[1:])


def random_instance(rng, n=None):
    model = TableCartModel(z_com=rng.uniform(0.4, 0.9))
    dt = rng.uniform(0.05, 0.2)
    n = n or int(rng.integers(3, 9))
    x0 = rng.normal(scale=[0.1, 0.1, 0.2, 0.2, 0.5, 0.5])
    refs = np.cumsum(rng.normal(scale=0.01, size=(n, 2)), axis=0) + rng.normal(scale=0.05, size=2)
    q = np.diag(rng.uniform(0.5, 2.0, size=2))
    r = rng.uniform(1e-4, 1e-2) * np.eye(2)
    return model, dt, x0, refs, q, r


def test_discretize_matches_matrix_exponential():
    model = TableCartModel(z_com=0.6)
    dt = 0.07
    a_d, b_d = model.discretize(dt)
    a_c = np.zeros((6, 6))
    a_c[0:2, 2:4] = np.eye(2)
    a_c[2:4, 4:6] = np.eye(2)
    b_c = np.zeros((6, 2))
    b_c[4:6] = np.eye(2)
    aug = np.zeros((8, 8))
    aug[:6, :6] = a_c
    aug[:6, 6:] = b_c
    exp_aug = scipy.linalg.expm(aug * dt)
    assert np.allclose(a_d, exp_aug[:6, :6], atol=1e-12)
    assert np.allclose(b_d, exp_aug[:6, 6:], atol=1e-12)


def test_output_matrix_and_zmp():
    model = TableCartModel(z_com=0.58, gravity=9.81)
    chi = np.array([0.1, -0.2, 1.0, 2.0, 0.5, -0.3])
    z = zmp_output(model, chi)
    k = 0.58 / 9.81
    assert np.allclose(z, [0.1 - k * 0.5, -0.2 + k * 0.3])
    assert np.allclose(model.output_matrix @ chi, z)
    batch = np.stack([chi, 2 * chi])
    assert zmp_output(model, batch).shape == (2, 2)


def test_integrate_com_matches_discretization():
    model = TableCartModel()
    rng = np.random.default_rng(3)
    a_d, b_d = model.discretize(0.013)
    for _ in range(20):
        chi = rng.normal(size=6)
        u = rng.normal(size=2)
        assert np.allclose(integrate_com(chi, u, 0.013), a_d @ chi + b_d @ u,
                           atol=1e-14)


def test_support_halfspaces_single_foot():
    g, h = support_halfspaces([(np.zeros(2), 0.0)], 0.07, 0.03)
    assert g.shape[0] == 4
    inside = np.array([0.05, 0.02])
    outside = [np.array([0.08, 0.0]), np.array([0.0, 0.04])]
    assert np.all(g @ inside <= h + 1e-12)
    for p in outside:
        assert np.any(g @ p > h)
    # margin shrinks the admissible box
    g2, h2 = support_halfspaces([(np.zeros(2), 0.0)], 0.07, 0.03, margin=0.02)
    assert np.any(g2 @ np.array([0.06, 0.0]) > h2)


def test_support_halfspaces_rotated_and_union():
    yaw = np.pi / 4
    g, h = support_halfspaces([(np.zeros(2), yaw)], 0.07, 0.03)
    corner = np.array([[np.cos(yaw), -np.sin(yaw)], [np.sin(yaw), np.cos(yaw)]]) @ [0.07, 0.03]
    assert np.all(g @ (0.999 * corner) <= h + 1e-12)
    assert np.any(g @ (1.01 * corner) > h)
    # two separated feet: points between the rectangles are in the hull
    feet = [(np.array([0.0, 0.08]), 0.0), (np.array([0.0, -0.08]), 0.0)]
    g, h = support_halfspaces(feet, 0.07, 0.03)
    assert np.all(g @ np.array([0.0, 0.0]) <= h + 1e-12)
    assert np.all(g @ np.array([0.05, 0.04]) <= h + 1e-12)
    assert np.any(g @ np.array([0.075, 0.0]) > h)


def test_build_mpc_qp_dimensions():
    model = TableCartModel()
    box = support_halfspaces([(np.zeros(2), 0.0)], 0.07, 0.03)
    data = MpcProblemData(x0=np.zeros(6), zmp_refs=np.zeros((2, 2)),
                          supports=[box, None])
    problem = build_mpc_qp(model, data, dt=0.1)
    assert problem.dim == 16           # 2 states of 6 + 2 inputs of 2
    assert problem.n_eq == 12          # dynamics rows for both nodes
    assert problem.n_in == 4           # one box at node 1


@pytest.mark.parametrize("seed", range(10))
def test_shooting_and_condensed_routes_agree(seed):
    rng = np.random.default_rng(100 + seed)
    model, dt, x0, refs, q, r = random_instance(rng, n=int(rng.integers(2, 7)))
    n = len(refs)
    supports = None
    if seed % 2 == 0:
        # a generous box around each reference keeps some rows active
        supports = [support_halfspaces([(refs[k], 0.0)], 0.06, 0.04)
                    for k in range(n)]
    data = MpcProblemData(x0=x0, zmp_refs=refs, supports=supports)
    shooting = solve(build_mpc_qp(model, data, dt, q, r))
    states_ms, inputs_ms = split_mpc_solution(shooting.x, n)
    ctrl = MpcController(model, dt=dt, n_nodes=n, q_weight=q, r_weight=r)
    step = ctrl.step(data)
    assert np.allclose(step.inputs, inputs_ms, atol=1e-6)
    assert np.allclose(step.states, states_ms, atol=1e-6)


def test_matches_riccati_recursion_50_instances():
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(50):
        model, dt, x0, refs, q, r = random_instance(rng)
        a_d, b_d = model.discretize(dt)
        us_ref, xs_ref = riccati_tracking(a_d, b_d, model.output_matrix,
                                          q, r, x0, refs)
        ctrl = MpcController(model, dt=dt, n_nodes=len(refs), q_weight=q, r_weight=r)
        step = ctrl.step(MpcProblemData(x0=x0, zmp_refs=refs))
        worst = max(worst, float(np.max(np.abs(step.inputs - us_ref))))
        assert np.allclose(step.inputs, us_ref, atol=1e-6)
        assert np.allclose(step.states, xs_ref, atol=1e-6)
    assert worst < 1e-6


def test_equilibrium_holds_zero_jerk():
    model = TableCartModel()
    p = np.array([0.3, -0.1])
    chi = np.concatenate([p, np.zeros(4)])
    ctrl = MpcController(model, dt=0.05, n_nodes=30)
    step = ctrl.step(MpcProblemData(x0=chi, zmp_refs=np.tile(p, (30, 1))))
    assert np.allclose(step.inputs, 0.0, atol=1e-12)
    assert np.allclose(step.states, np.tile(chi, (30, 1)), atol=1e-12)


def test_receding_horizon_converges_to_constant_reference():
    model = TableCartModel()
    target = np.array([0.05, 0.02])
    ctrl = MpcController(model, dt=0.02, n_nodes=80, r_weight=1e-6)
    chi = np.zeros(6)
    refs = np.tile(target, (80, 1))
    errs = []
    for _ in range(400):
        step = ctrl.step(MpcProblemData(x0=chi, zmp_refs=refs))
        chi = integrate_com(chi, step.jerk, 0.02)
        errs.append(np.linalg.norm(zmp_output(model, chi) - target))
    assert errs[-1] < 1e-5
    assert max(errs) < 0.1


def test_support_constraint_clamps_zmp():
    model = TableCartModel()
    n = 20
    box = support_halfspaces([(np.zeros(2), 0.0)], 0.05, 0.05)
    refs = np.tile([0.2, 0.0], (n, 1))     # reference far outside the box
    data = MpcProblemData(x0=np.zeros(6), zmp_refs=refs,
                          supports=[box] * n)
    ctrl = MpcController(model, dt=0.05, n_nodes=n)
    step = ctrl.step(data)
    zmps = zmp_output(model, step.states)
    g, h = box
    for z in zmps:
        assert np.all(g @ z <= h + 1e-8)
    # the x edge binds at most nodes, and the constraint actually bites
    assert np.max(zmps[:, 0]) == pytest.approx(0.05, abs=1e-8)
    free = ctrl.step(MpcProblemData(x0=np.zeros(6), zmp_refs=refs))
    assert np.max(zmp_output(model, free.states)[:, 0]) > 0.05 + 0.01
    assert step.n_active > 0


def test_warm_start_reuses_active_set():
    model = TableCartModel()
    n = 20
    box = support_halfspaces([(np.zeros(2), 0.0)], 0.05, 0.05)
    refs = np.tile([0.2, 0.0], (n, 1))
    data = MpcProblemData(x0=np.zeros(6), zmp_refs=refs, supports=[box] * n)
    ctrl = MpcController(model, dt=0.05, n_nodes=n)
    first = ctrl.step(data)
    second = ctrl.step(data)
    assert second.iterations <= first.iterations
    assert np.allclose(first.jerk, second.jerk, atol=1e-12)


def test_empty_support_is_reported_infeasible():
    # a margin wider than the sole half-sizes empties the pressure polytope;
    # the error names the first offending horizon node (1-based)
    model = TableCartModel()
    n = 5
    empty_box = support_halfspaces([(np.array([0.0, 0.0]), 0.0)], 0.05, 0.05,
                                   margin=0.06)
    data = MpcProblemData(x0=np.zeros(6), zmp_refs=np.zeros((n, 2)),
                          supports=[None, None, empty_box, None, None])
    ctrl = MpcController(model, dt=0.05, n_nodes=n)
    with pytest.raises(MpcInfeasibleError) as err:
        ctrl.step(data)
    assert err.value.node == 3
    assert err.value.violation > 1e-3


def test_far_support_is_still_reachable():
    # jerk is unbounded and the jerk-to-pressure map is surjective, so even
    # a distant support box admits a (violent) feasible input sequence
    model = TableCartModel()
    n = 5
    far_box = support_halfspaces([(np.array([2.0, 0.0]), 0.0)], 0.05, 0.05)
    data = MpcProblemData(x0=np.zeros(6), zmp_refs=np.zeros((n, 2)),
                          supports=[far_box] + [None] * (n - 1))
    ctrl = MpcController(model, dt=0.05, n_nodes=n)
    step = ctrl.step(data)
    assert step.n_active > 0


def test_tracks_walking_pressure_reference():
    from bipedwalk.footsteps import FootSide
    from bipedwalk.plan import make_plan, straight_walk_setup

    setup, ref, initial = straight_walk_setup(walk_time=6.0)
    plan = make_plan(ref, initial, setup)
    model = TableCartModel(z_com=0.58)
    dt = 0.02
    ctrl = MpcController(model, dt=dt, n_nodes=100)
    chi = np.zeros(6)
    t, errs = 0.0, []
    horizon_end = plan.end_time + 1.0
    while t < horizon_end:
        refs = np.array([plan.zmp_ref(t + dt * (k + 1)) for k in range(100)])
        step = ctrl.step(MpcProblemData(x0=chi, zmp_refs=refs))
        chi = integrate_com(chi, step.jerk, dt)
        t += dt
        errs.append(np.linalg.norm(zmp_output(model, chi) - plan.zmp_ref(t)))
    rms = float(np.sqrt(np.mean(np.square(errs))))
    assert rms < 0.01
    # the center of mass ends above the final stance midpoint
    final_zmp = plan.zmp_ref(horizon_end)
    assert np.linalg.norm(chi[0:2] - final_zmp) < 5e-3
    assert np.linalg.norm(chi[2:4]) < 0.05


def test_model_validation():
    with pytest.raises(ValueError):
        TableCartModel(z_com=-1.0)
    with pytest.raises(ValueError):
        TableCartModel().discretize(0.0)
    with pytest.raises(ValueError):
        MpcController(TableCartModel(), n_nodes=0)
    with pytest.raises(ValueError):
        support_halfspaces([], 0.07, 0.03)
