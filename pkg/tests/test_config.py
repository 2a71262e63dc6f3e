import json

import numpy as np
import pytest

from bipedwalk.config import (CONFIG_DIR_ENV, ConfigError, build_scenario,
                              list_bundled_configs, load_config,
                              resolve_config_path, scenario_schema,
                              standing_control_point, validate_config)
from bipedwalk.simulator import (SimMode, standing_scenario,
                                 straight_position_scenario,
                                 straight_torque_scenario)
from bipedwalk.unicycle import (ConstantReference, LineReference,
                                SampledReference)


def minimal_config(**extra):
    doc = {"version": 1, "duration": 3.0}
    doc.update(extra)
    return doc


def test_schema_is_a_valid_draft202012_document():
    from jsonschema import Draft202012Validator
    Draft202012Validator.check_schema(scenario_schema())


def test_minimal_config_builds_standing_defaults():
    loaded = build_scenario(minimal_config())
    spec = loaded.spec
    assert spec.duration == 3.0
    assert spec.sim.mode is SimMode.POSITION
    assert loaded.model.n_joints == 12
    assert not loaded.live and loaded.out is None
    # default reference holds the standing control point
    home = standing_control_point(spec.setup)
    np.testing.assert_allclose(spec.reference.position(0.0), home)
    np.testing.assert_allclose(spec.reference.velocity(5.0), np.zeros(2))


def test_validation_rejects_unknown_and_bad_fields():
    with pytest.raises(ConfigError) as exc:
        validate_config(minimal_config(bogus=1))
    assert "bogus" in str(exc.value)
    with pytest.raises(ConfigError, match="duration"):
        validate_config(minimal_config(duration=-1.0))
    with pytest.raises(ConfigError, match="mode"):
        validate_config(minimal_config(mode="hover"))
    # line references require a velocity
    with pytest.raises(ConfigError):
        validate_config(minimal_config(reference={"source": "line"}))
    # errors accumulate instead of stopping at the first violation
    with pytest.raises(ConfigError) as exc:
        validate_config(minimal_config(duration=-1.0, mode="hover"))
    assert len(exc.value.errors) >= 2


def test_config_must_be_a_json_object(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("[1, 2]")
    with pytest.raises(ConfigError, match="object"):
        load_config(path)
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(path)
    with pytest.raises(ConfigError, match="read"):
        load_config(tmp_path / "missing.json")


def test_bundled_configs_all_build():
    names = list_bundled_configs()
    assert {"standing_position", "standing_torque", "straight_position",
            "straight_torque", "straight_file",
            "serve_default"} <= set(names)
    for name in names:
        loaded = build_scenario(resolve_config_path(name))
        assert loaded.model.n_joints == 12


def _assert_setup_equal(a, b):
    assert (a.horizon, a.dt, a.switch_ratio, a.apex) == \
           (b.horizon, b.dt, b.switch_ratio, b.apex)
    np.testing.assert_array_equal(a.unicycle.d, b.unicycle.d)
    np.testing.assert_array_equal(a.unicycle.K, b.unicycle.K)
    assert a.unicycle.v_max == b.unicycle.v_max
    assert a.unicycle.omega_max == b.unicycle.omega_max
    assert vars(a.planner.constraints) == vars(b.planner.constraints)
    assert vars(a.planner.weights) == vars(b.planner.weights)
    assert (a.planner.m, a.planner.stop_pos_tol, a.planner.stop_yaw_tol) == \
           (b.planner.m, b.planner.stop_pos_tol, b.planner.stop_yaw_tol)


@pytest.mark.parametrize("name,fixture", [
    ("straight_position", straight_position_scenario),
    ("straight_torque", straight_torque_scenario),
    ("standing_position", lambda: standing_scenario("position")),
    ("standing_torque", lambda: standing_scenario("torque")),
])
def test_shipped_configs_mirror_python_fixtures(name, fixture):
    loaded = build_scenario(resolve_config_path(name))
    want = fixture()
    got = loaded.spec
    _assert_setup_equal(got.setup, want.setup)
    assert got.duration == want.duration
    assert got.sim == want.sim
    assert got.gains == want.gains and got.contact == want.contact
    assert got.weights == want.weights
    assert got.knee_bend == want.knee_bend
    assert got.support_margin == want.support_margin
    for t in (0.0, 0.7, 5.0, 30.0):
        np.testing.assert_allclose(got.reference.position(t),
                                   want.reference.position(t), atol=1e-12)
        np.testing.assert_allclose(got.reference.velocity(t),
                                   want.reference.velocity(t), atol=1e-12)


def test_reference_sources(tmp_path):
    line = build_scenario(minimal_config(
        reference={"source": "line", "start": [0.1, 0.2],
                   "velocity": [0.05, 0.0], "t0": 1.0, "t_stop": 3.0}))
    ref = line.spec.reference
    assert isinstance(ref, LineReference)
    np.testing.assert_allclose(ref.position(2.0), [0.15, 0.2])
    np.testing.assert_allclose(ref.position(9.0), ref.position(3.0))

    const = build_scenario(minimal_config(
        reference={"source": "constant", "position": [1.0, -1.0]}))
    assert isinstance(const.spec.reference, ConstantReference)
    np.testing.assert_allclose(const.spec.reference.position(0.0),
                               [1.0, -1.0])

    live = build_scenario(minimal_config(reference={"source": "live"}))
    assert live.live
    np.testing.assert_allclose(
        live.spec.reference.position(0.0),
        standing_control_point(live.spec.setup))

    csv = tmp_path / "ref.csv"
    csv.write_text("t,xf_x,xf_y,vxf_x,vxf_y\n0,0.2,0,0.1,0\n1,0.3,0,0.1,0\n")
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(minimal_config(
        reference={"source": "file", "path": "ref.csv"})))
    filed = build_scenario(cfg)
    assert isinstance(filed.spec.reference, SampledReference)
    np.testing.assert_allclose(filed.spec.reference.position(0.5), [0.25, 0])

    with pytest.raises(ConfigError, match="reference/path"):
        build_scenario(minimal_config(
            reference={"source": "file", "path": str(tmp_path / "nope.csv")}))


def test_model_resolution_errors():
    with pytest.raises(ConfigError, match="bundled model"):
        build_scenario(minimal_config(model="not_a_model"))
    with pytest.raises(ConfigError, match="model"):
        build_scenario(minimal_config(model="/does/not/exist.json"))


def test_cli_overrides_win_over_config():
    loaded = build_scenario(minimal_config(mode="position", duration=9.0,
                                           out="from_config"),
                            mode="torque", duration=2.0, out="/tmp/cli_out")
    assert loaded.spec.sim.mode is SimMode.TORQUE
    assert loaded.spec.duration == 2.0
    assert str(loaded.out) == "/tmp/cli_out"


def test_config_dir_env_var(tmp_path, monkeypatch):
    custom = minimal_config(label="from-env")
    (tmp_path / "mine.json").write_text(json.dumps(custom))
    monkeypatch.setenv(CONFIG_DIR_ENV, str(tmp_path))
    path = resolve_config_path("mine")
    assert path.parent == tmp_path
    assert build_scenario(path).spec.label == "from-env"
    # bundled names still resolve when not shadowed
    assert resolve_config_path("standing_position").name == \
        "standing_position.json"
    monkeypatch.delenv(CONFIG_DIR_ENV)
    with pytest.raises(ConfigError, match="not found"):
        resolve_config_path("mine")


def test_planning_overrides_map_onto_setup():
    loaded = build_scenario(minimal_config(planning={
        "horizon": 9.0, "switch_ratio": 0.4,
        "unicycle": {"d": [0.15, 0.01], "k": [3.0, 1.5], "v_max": 0.3},
        "planner": {"m": 0.06, "constraints": {"t_min": 2.0, "d_max": 0.2},
                    "weights": {"k_x": 4.0}},
    }))
    setup = loaded.spec.setup
    assert setup.horizon == 9.0 and setup.switch_ratio == 0.4
    np.testing.assert_array_equal(setup.unicycle.d, [0.15, 0.01])
    np.testing.assert_array_equal(setup.unicycle.K, np.diag([3.0, 1.5]))
    assert setup.unicycle.v_max == 0.3
    assert setup.planner.m == 0.06
    assert setup.planner.constraints.t_min == 2.0
    assert setup.planner.constraints.d_max == 0.2
    assert setup.planner.constraints.t_max == 5.0   # untouched default
    assert setup.planner.weights.k_x == 4.0
    # the home point follows the overridden control-point offset
    home = standing_control_point(setup)
    np.testing.assert_allclose(home, [0.15, 0.01])
