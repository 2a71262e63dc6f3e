import copy
import json

import numpy as np
import pytest

from bipedwalk.rigid_body import (GRAVITY, Configuration, ModelError,
                                  actuation_selector, bias_forces,
                                  bundled_model, com_and_jacobian, com_drift,
                                  contact_stack, dynamics_terms,
                                  forward_kinematics, frame_drift,
                                  frame_jacobian, inverse_dynamics,
                                  load_model, mass_matrix, rpy_matrix, skew,
                                  so3_exp)


# ---------------------------------------------------------------------------
# helpers / oracles


def random_rotation(rng):
    return so3_exp(rng.normal(scale=1.0, size=3))


def random_configuration(model, rng, joint_scale=0.4):
    lo = np.maximum(model.joint_limits[:, 0], -joint_scale)
    hi = np.minimum(model.joint_limits[:, 1], joint_scale)
    return Configuration(
        base_pos=rng.normal(scale=0.5, size=3),
        base_rot=random_rotation(rng),
        s=rng.uniform(lo, hi))


def fk_oracle(doc, q):
    """Naive chain composition straight off the JSON document: world pose of
    every link by walking each link's ancestor chain independently."""
    links = {l["name"]: l for l in doc["links"]}
    order = [l["name"] for l in doc["links"]]
    jidx = {}
    k = 0
    for name in order:
        j = links[name].get("joint", {})
        if j.get("type") in ("revolute", "prismatic"):
            jidx[name] = k
            k += 1

    def pose(name):
        l = links[name]
        if l["parent"] is None:
            return q.base_rot.copy(), q.base_pos.copy()
        r_par, p_par = pose(l["parent"])
        origin = l.get("origin", {})
        r_fix = rpy_matrix(origin.get("rpy", [0, 0, 0]))
        p_fix = np.asarray(origin.get("xyz", [0, 0, 0]), dtype=float)
        r_j = r_par @ r_fix
        p_j = p_par + r_par @ p_fix
        joint = l.get("joint", {})
        if joint.get("type") == "revolute":
            return r_j @ so3_exp(np.asarray(joint["axis"], float) * q.s[jidx[name]]), p_j
        if joint.get("type") == "prismatic":
            return r_j, p_j + r_j @ (np.asarray(joint["axis"], float) * q.s[jidx[name]])
        return r_j, p_j

    return pose


def rot_vee(r):
    """Inverse of skew for a near-identity rotation difference."""
    return 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])


def fd_twist(model, q, frame, nu, delta=1e-6):
    """Finite-difference twist of a frame along direction nu."""
    qp = q.integrate(nu, delta)
    qm = q.integrate(nu, -delta)
    fkp = forward_kinematics(model, qp)
    fkm = forward_kinematics(model, qm)
    rp, pp = fkp.pose(frame)
    rm, pm = fkm.pose(frame)
    lin = (pp - pm) / (2.0 * delta)
    ang = rot_vee(rp @ rm.T) / (2.0 * delta)
    return np.concatenate([lin, ang])


def total_energy(model, q, nu):
    m = mass_matrix(model, q)
    p_g, _ = com_and_jacobian(model, q)
    return 0.5 * nu @ m @ nu - model.total_mass * GRAVITY @ p_g


def rk4_free_step(model, q, nu, dt):
    """One RK4 step of unforced floating dynamics with retraction."""
    def accel(qq, vv):
        terms = dynamics_terms(model, qq, vv)
        return np.linalg.solve(terms.M, -terms.h)

    k1v = accel(q, nu)
    q2 = q.integrate(nu, dt / 2)
    v2 = nu + (dt / 2) * k1v
    k2v = accel(q2, v2)
    q3 = q.integrate(v2, dt / 2)
    v3 = nu + (dt / 2) * k2v
    k3v = accel(q3, v3)
    q4 = q.integrate(v3, dt)
    v4 = nu + dt * k3v
    k4v = accel(q4, v4)
    nu_avg = (nu + 2 * v2 + 2 * v3 + v4) / 6.0
    dv = (k1v + 2 * k2v + 2 * k3v + k4v) / 6.0
    return q.integrate(nu_avg, dt), nu + dt * dv


MIXED_DOC = {
    "format": "bipedwalk-model",
    "version": 1,
    "links": [
        {"name": "root", "parent": None, "mass": 2.0, "com": [0.1, 0.0, 0.0],
         "inertia": [0.02, 0.03, 0.04, 0.0, 0.0, 0.0]},
        {"name": "swivel", "parent": "root",
         "origin": {"xyz": [0.2, 0.0, 0.0], "rpy": [0.1, -0.2, 0.3]},
         "joint": {"type": "revolute", "axis": [0.0, 0.0, 1.0]},
         "mass": 1.0, "com": [0.0, 0.1, 0.0],
         "inertia": [0.01, 0.01, 0.02, 0.0, 0.0, 0.0]},
        {"name": "slider", "parent": "swivel",
         "origin": {"xyz": [0.0, 0.3, 0.0]},
         "joint": {"type": "prismatic", "axis": [1.0, 0.0, 0.0]},
         "mass": 0.7, "com": [0.05, 0.0, 0.0],
         "inertia": [0.005, 0.006, 0.007, 0.0, 0.0, 0.0]},
        {"name": "cap", "parent": "slider",
         "origin": {"xyz": [0.1, 0.0, 0.1], "rpy": [0.0, 0.4, 0.0]},
         "mass": 0.3, "com": [0.0, 0.0, 0.05],
         "inertia": [0.001, 0.001, 0.001, 0.0, 0.0, 0.0]},
    ],
    "frames": [{"name": "probe", "link": "cap", "xyz": [0.05, -0.02, 0.1],
                "rpy": [0.2, 0.0, -0.1]}],
}


# ---------------------------------------------------------------------------
# loading and validation


def test_bundled_models_load():
    biped = bundled_model("biped12")
    assert biped.n_joints == 12
    assert biped.total_mass == pytest.approx(31.0)
    for name in ("left_sole", "right_sole", "torso"):
        assert name in biped.frames
    assert bundled_model("single_body").n_joints == 0
    assert bundled_model("pendulum").n_joints == 1


def test_load_rejects_bad_documents():
    base = {"format": "bipedwalk-model", "version": 1}
    with pytest.raises(ModelError, match="document"):
        load_model({"format": "other", "version": 1, "links": []})
    with pytest.raises(ModelError, match="version"):
        load_model({"format": "bipedwalk-model", "version": 3, "links": []})
    with pytest.raises(ModelError, match="no links"):
        load_model({**base, "links": []})
    with pytest.raises(ModelError, match="cycle"):
        load_model({**base, "links": [
            {"name": "a", "parent": "b", "mass": 1.0},
            {"name": "b", "parent": "a", "mass": 1.0}]})
    with pytest.raises(ModelError, match="unknown parent"):
        load_model({**base, "links": [
            {"name": "a", "parent": None, "mass": 1.0},
            {"name": "b", "parent": "ghost", "mass": 1.0}]})
    with pytest.raises(ModelError, match="exactly one root"):
        load_model({**base, "links": [
            {"name": "a", "parent": None, "mass": 1.0},
            {"name": "b", "parent": None, "mass": 1.0}]})
    with pytest.raises(ModelError, match="axis"):
        load_model({**base, "links": [
            {"name": "a", "parent": None, "mass": 1.0},
            {"name": "b", "parent": "a", "mass": 1.0,
             "joint": {"type": "revolute", "axis": [0, 0, 2]}}]})
    with pytest.raises(ModelError, match="mass"):
        load_model({**base, "links": [{"name": "a", "parent": None, "mass": 0.0}]})


def test_load_rejects_indefinite_inertia_naming_link():
    doc = {"format": "bipedwalk-model", "version": 1, "links": [
        {"name": "wonky", "parent": None, "mass": 1.0,
         "inertia": [1e-3, -1e-3, 1e-3, 0.0, 0.0, 0.0]}]}
    with pytest.raises(ModelError, match="wonky"):
        load_model(doc)


def test_load_is_file_order_independent():
    doc = copy.deepcopy(MIXED_DOC)
    doc["links"] = [doc["links"][k] for k in (2, 0, 3, 1)]  # children first
    shuffled = load_model(doc)
    original = load_model(MIXED_DOC)
    assert shuffled.joint_names == original.joint_names
    assert [l.name for l in shuffled.links] == [l.name for l in original.links]
    rng = np.random.default_rng(3)
    q = Configuration(np.zeros(3), np.eye(3),
                      rng.normal(scale=0.3, size=original.n_joints))
    r1, p1 = forward_kinematics(original, q).pose("probe")
    r2, p2 = forward_kinematics(shuffled, q).pose("probe")
    np.testing.assert_allclose(p1, p2, atol=0.0)
    np.testing.assert_allclose(r1, r2, atol=0.0)


def test_configuration_validation():
    with pytest.raises(ValueError, match="orthonormal"):
        Configuration(np.zeros(3), np.eye(3) * 1.01, np.zeros(2))
    flipped = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(ValueError, match="left-handed"):
        Configuration(np.zeros(3), flipped, np.zeros(2))


# ---------------------------------------------------------------------------
# forward kinematics


def test_home_pose_of_biped_fixture():
    model = bundled_model("biped12")
    q = model.home_configuration(base_pos=[0.0, 0.0, model.meta["home_base_height"]])
    fk = forward_kinematics(model, q)
    for name, y in (("left_sole", 0.05), ("right_sole", -0.05)):
        r, p = fk.pose(name)
        np.testing.assert_allclose(p, [0.0, y, 0.0], atol=1e-12)
        np.testing.assert_allclose(r, np.eye(3), atol=1e-12)
    r, p = fk.pose("torso")
    np.testing.assert_allclose(p, [0.0, 0.0, 0.71], atol=1e-12)
    r, p = fk.pose("base")
    np.testing.assert_allclose(p, q.base_pos, atol=0.0)


def test_base_rotation_preserves_relative_transforms():
    model = bundled_model("biped12")
    rng = np.random.default_rng(7)
    s = rng.normal(scale=0.3, size=12)
    q1 = Configuration([0.1, -0.2, 0.6], np.eye(3), s)
    q2 = Configuration([0.1, -0.2, 0.6], random_rotation(rng), s)
    fk1, fk2 = forward_kinematics(model, q1), forward_kinematics(model, q2)
    for frame in ("left_sole", "right_sole", "torso"):
        r1, p1 = fk1.pose(frame)
        r2, p2 = fk2.pose(frame)
        rb1, pb1 = fk1.pose("base")
        rb2, pb2 = fk2.pose("base")
        np.testing.assert_allclose(rb1.T @ r1, rb2.T @ r2, atol=1e-12)
        np.testing.assert_allclose(rb1.T @ (p1 - pb1), rb2.T @ (p2 - pb2), atol=1e-12)


def test_fk_matches_naive_chain_oracle():
    rng = np.random.default_rng(11)
    from importlib.resources import files
    doc = json.loads(files("bipedwalk").joinpath("models/biped12.json").read_text())
    model = load_model(doc)
    for _ in range(10):
        q = random_configuration(model, rng)
        fk = forward_kinematics(model, q)
        oracle = fk_oracle(doc, q)
        for link in model.links:
            r_ref, p_ref = oracle(link.name)
            r, p = fk.pose(link.name)
            np.testing.assert_allclose(r, r_ref, atol=1e-12)
            np.testing.assert_allclose(p, p_ref, atol=1e-12)


def test_fk_mixed_joints_matches_oracle():
    model = load_model(MIXED_DOC)
    rng = np.random.default_rng(13)
    for _ in range(10):
        q = random_configuration(model, rng, joint_scale=0.8)
        fk = forward_kinematics(model, q)
        oracle = fk_oracle(MIXED_DOC, q)
        for name in ("swivel", "slider", "cap"):
            r_ref, p_ref = oracle(name)
            r, p = fk.pose(name)
            np.testing.assert_allclose(r, r_ref, atol=1e-12)
            np.testing.assert_allclose(p, p_ref, atol=1e-12)


def test_unknown_frame_errors():
    model = bundled_model("single_body")
    q = model.home_configuration()
    with pytest.raises(KeyError, match="nope"):
        forward_kinematics(model, q).pose("nope")
    with pytest.raises(KeyError, match="nope"):
        frame_jacobian(model, q, "nope")


# ---------------------------------------------------------------------------
# jacobians


def test_base_jacobian_is_identity_block():
    model = bundled_model("biped12")
    rng = np.random.default_rng(19)
    for _ in range(5):
        q = random_configuration(model, rng)
        j = frame_jacobian(model, q, "base")
        np.testing.assert_array_equal(j[:, :6], np.eye(6))
        np.testing.assert_array_equal(j[:, 6:], np.zeros((6, 12)))


def test_fixed_offset_frame_jacobian_analytic():
    model = bundled_model("biped12")
    rng = np.random.default_rng(23)
    q = random_configuration(model, rng)
    j = frame_jacobian(model, q, "torso")  # rigid offset r from the base
    r_off = np.array([0.0, 0.0, 0.1])
    np.testing.assert_allclose(j[0:3, 0:3], np.eye(3), atol=1e-12)
    np.testing.assert_allclose(j[0:3, 3:6], -skew(q.base_rot @ r_off), atol=1e-12)
    np.testing.assert_allclose(j[0:3, 6:], 0.0, atol=1e-12)
    np.testing.assert_allclose(j[3:6, 3:6], np.eye(3), atol=1e-12)


@pytest.mark.parametrize("model_src", ["biped12", "mixed"])
def test_frame_jacobians_match_finite_differences(model_src):
    model = load_model(MIXED_DOC) if model_src == "mixed" else bundled_model(model_src)
    frames = ["probe", "slider"] if model_src == "mixed" else \
        ["left_sole", "right_sole", "torso", "l_knee"]
    rng = np.random.default_rng(29)
    for _ in range(25):
        q = random_configuration(model, rng)
        nu = rng.normal(size=model.nv)
        for frame in frames:
            j = frame_jacobian(model, q, frame)
            ref = fd_twist(model, q, frame, nu)
            scale = np.linalg.norm(ref) + 1.0
            assert np.linalg.norm(j @ nu - ref) <= 1e-5 * scale


def test_com_single_body_formula():
    doc = {"format": "bipedwalk-model", "version": 1, "links": [
        {"name": "b", "parent": None, "mass": 2.5, "com": [0.1, -0.2, 0.3],
         "inertia": [0.01, 0.01, 0.01, 0.0, 0.0, 0.0]}]}
    model = load_model(doc)
    rng = np.random.default_rng(31)
    q = Configuration(rng.normal(size=3), random_rotation(rng), np.zeros(0))
    p_g, j_g = com_and_jacobian(model, q)
    np.testing.assert_allclose(p_g, q.base_pos + q.base_rot @ [0.1, -0.2, 0.3],
                               atol=1e-12)
    np.testing.assert_allclose(j_g[:, :3], np.eye(3), atol=1e-12)


def test_com_symmetric_at_home():
    model = bundled_model("biped12")
    q = model.home_configuration(base_pos=[0, 0, 0.61])
    p_g, _ = com_and_jacobian(model, q)
    assert abs(p_g[0]) < 0.02
    assert p_g[1] == pytest.approx(0.0, abs=1e-12)
    assert 0.2 < p_g[2] < 0.61


def test_com_jacobian_matches_finite_differences():
    model = bundled_model("biped12")
    rng = np.random.default_rng(37)
    for _ in range(25):
        q = random_configuration(model, rng)
        nu = rng.normal(size=model.nv)
        _, j_g = com_and_jacobian(model, q)
        delta = 1e-6
        pp, _ = com_and_jacobian(model, q.integrate(nu, delta))
        pm, _ = com_and_jacobian(model, q.integrate(nu, -delta))
        ref = (pp - pm) / (2 * delta)
        assert np.linalg.norm(j_g @ nu - ref) <= 1e-5 * (np.linalg.norm(ref) + 1.0)


def test_com_drift_matches_jacobian_finite_difference():
    model = bundled_model("biped12")
    rng = np.random.default_rng(39)
    for _ in range(15):
        q = random_configuration(model, rng)
        nu = rng.normal(scale=0.7, size=model.nv)
        drift = com_drift(model, q, nu)
        delta = 1e-6
        _, j_plus = com_and_jacobian(model, q.integrate(nu, delta))
        _, j_now = com_and_jacobian(model, q)
        ref = ((j_plus - j_now) / delta) @ nu
        assert np.linalg.norm(drift - ref) <= 1e-4 * (np.linalg.norm(ref) + 1.0)


# ---------------------------------------------------------------------------
# mass matrix


def test_single_body_mass_matrix_analytic():
    model = bundled_model("single_body")
    rng = np.random.default_rng(41)
    for _ in range(5):
        q = Configuration(rng.normal(size=3), random_rotation(rng), np.zeros(0))
        m = mass_matrix(model, q)
        i_world = q.base_rot @ np.diag([0.01, 0.02, 0.03]) @ q.base_rot.T
        np.testing.assert_allclose(m[:3, :3], np.eye(3), atol=1e-12)
        np.testing.assert_allclose(m[3:, 3:], i_world, atol=1e-12)
        np.testing.assert_allclose(m[:3, 3:], 0.0, atol=1e-12)


def test_pendulum_joint_entry_textbook_value():
    model = bundled_model("pendulum")
    q = model.home_configuration()
    m = mass_matrix(model, q)
    # point mass 2 kg at 0.5 m plus the bob's own I_yy
    assert m[6, 6] == pytest.approx(2.0 * 0.5**2 + 0.02, abs=1e-12)
    q2 = Configuration(np.zeros(3), np.eye(3), [0.7])
    assert mass_matrix(model, q2)[6, 6] == pytest.approx(0.52, abs=1e-12)


@pytest.mark.parametrize("model_src", ["biped12", "mixed"])
def test_mass_matrix_columns_match_inverse_dynamics_probing(model_src):
    model = load_model(MIXED_DOC) if model_src == "mixed" else bundled_model(model_src)
    rng = np.random.default_rng(43)
    zero = np.zeros(model.nv)
    for _ in range(10):
        q = random_configuration(model, rng)
        m = mass_matrix(model, q)
        for i in range(model.nv):
            e = np.zeros(model.nv)
            e[i] = 1.0
            col = inverse_dynamics(model, q, zero, e, gravity=np.zeros(3))
            np.testing.assert_allclose(m[:, i], col, atol=1e-8)


def test_mass_matrix_symmetric_positive_definite_100_configs():
    model = bundled_model("biped12")
    rng = np.random.default_rng(47)
    for _ in range(100):
        q = random_configuration(model, rng)
        m = mass_matrix(model, q)
        assert np.max(np.abs(m - m.T)) <= 1e-10
        assert np.linalg.eigvalsh(m).min() > 0.0


# ---------------------------------------------------------------------------
# bias forces and energy


def test_single_body_hydrostatic_gravity():
    model = bundled_model("single_body")
    q = Configuration([0.0, 0.0, 1.0], np.eye(3), np.zeros(0))
    h, g_term = bias_forces(model, q, np.zeros(6))
    np.testing.assert_allclose(g_term[:3], [0.0, 0.0, 9.81], atol=1e-12)
    np.testing.assert_allclose(h, g_term, atol=0.0)


@pytest.mark.parametrize("model_src", ["biped12", "mixed"])
def test_bias_matches_inverse_dynamics_route(model_src):
    model = load_model(MIXED_DOC) if model_src == "mixed" else bundled_model(model_src)
    rng = np.random.default_rng(101)
    zero = np.zeros(model.nv)
    for _ in range(20):
        q = random_configuration(model, rng)
        nu = rng.normal(scale=1.0, size=model.nv)
        h, g_term = bias_forces(model, q, nu)
        np.testing.assert_allclose(h, inverse_dynamics(model, q, nu, zero),
                                   atol=1e-9)
        np.testing.assert_allclose(g_term,
                                   inverse_dynamics(model, q, zero, zero),
                                   atol=1e-9)


def test_zero_velocity_bias_equals_gravity_term():
    model = bundled_model("biped12")
    rng = np.random.default_rng(53)
    for _ in range(10):
        q = random_configuration(model, rng)
        h, g_term = bias_forces(model, q, np.zeros(model.nv))
        np.testing.assert_array_equal(h, g_term)


def test_free_fall_energy_conservation():
    model = bundled_model("biped12")
    rng = np.random.default_rng(59)
    q = random_configuration(model, rng)
    nu = np.concatenate([[0.5, -0.3, 7.0], [1.0, 2.0, 3.0],
                         rng.normal(scale=1.0, size=12)])
    e0 = total_energy(model, q, nu)
    dt = 1e-4
    for _ in range(int(0.5 / dt)):
        q, nu = rk4_free_step(model, q, nu, dt)
    e1 = total_energy(model, q, nu)
    assert abs(e1 - e0) <= 1e-4 * abs(e0)


def test_power_balance():
    # d/dt(kinetic) + gravity rate must equal the injected power
    # nu'M nudot + 0.5 nu'Mdot nu + nu'G == nu'(B tau + J'f);
    # only Mdot comes from finite differences.
    model = bundled_model("biped12")
    rng = np.random.default_rng(61)
    b_sel = actuation_selector(model)
    for _ in range(10):
        q = random_configuration(model, rng)
        nu = rng.normal(scale=0.5, size=model.nv)
        tau = rng.normal(scale=5.0, size=model.n_joints)
        f = rng.normal(scale=20.0, size=6)
        j = frame_jacobian(model, q, "left_sole")
        terms = dynamics_terms(model, q, nu)
        applied = b_sel @ tau + j.T @ f
        nudot = np.linalg.solve(terms.M, applied - terms.h)
        delta = 1e-5
        m_dot = (mass_matrix(model, q.integrate(nu, delta))
                 - mass_matrix(model, q.integrate(nu, -delta))) / (2 * delta)
        de_dt = nu @ terms.M @ nudot + 0.5 * nu @ m_dot @ nu + nu @ terms.G
        power = nu @ applied
        assert de_dt == pytest.approx(power, abs=1e-6 * (1.0 + abs(power)))


# ---------------------------------------------------------------------------
# contact stacks


def test_contact_stack_blocks_and_order():
    model = bundled_model("biped12")
    rng = np.random.default_rng(67)
    q = random_configuration(model, rng)
    nu = rng.normal(size=model.nv)
    single = contact_stack(model, q, nu, ["left_sole"])
    np.testing.assert_array_equal(single.jacobian,
                                  frame_jacobian(model, q, "left_sole"))
    both = contact_stack(model, q, nu, ["left_sole", "right_sole"])
    assert both.jacobian.shape == (12, model.nv)
    np.testing.assert_array_equal(both.jacobian[6:],
                                  frame_jacobian(model, q, "right_sole"))
    np.testing.assert_array_equal(both.j_base, both.jacobian[:, :6])
    np.testing.assert_array_equal(both.j_joints, both.jacobian[:, 6:])
    with pytest.raises(KeyError):
        contact_stack(model, q, nu, ["nope"])


@pytest.mark.parametrize("model_src,frame", [("biped12", "left_sole"),
                                             ("biped12", "torso"),
                                             ("mixed", "probe")])
def test_drift_matches_finite_difference_of_jacobian(model_src, frame):
    model = load_model(MIXED_DOC) if model_src == "mixed" else bundled_model(model_src)
    rng = np.random.default_rng(71)
    for _ in range(15):
        q = random_configuration(model, rng)
        nu = rng.normal(scale=0.7, size=model.nv)
        drift = frame_drift(model, q, nu, frame)
        delta = 1e-6
        j_plus = frame_jacobian(model, q.integrate(nu, delta), frame)
        j_now = frame_jacobian(model, q, frame)
        ref = ((j_plus - j_now) / delta) @ nu
        assert np.linalg.norm(drift - ref) <= 1e-4 * (np.linalg.norm(ref) + 1.0)


def test_drift_zero_velocity_is_zero():
    model = bundled_model("biped12")
    q = model.home_configuration(base_pos=[0, 0, 0.61])
    stack = contact_stack(model, q, np.zeros(model.nv),
                          ["left_sole", "right_sole"])
    np.testing.assert_allclose(stack.drift, 0.0, atol=1e-15)
