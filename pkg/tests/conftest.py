"""Shared expensive fixtures: short closed-loop runs written as log bundles.

Session-scoped so the report and CLI tests reuse one simulation each
instead of re-running the plant per test.
"""

import pytest

from bipedwalk.rigid_body import bundled_model
from bipedwalk.simulator import (run_scenario, straight_position_scenario,
                                 straight_torque_scenario)


@pytest.fixture(scope="session")
def model12():
    return bundled_model("biped12")


@pytest.fixture(scope="session")
def position_bundle(tmp_path_factory, model12):
    """6 s position-mode walk (4 steps) with its log bundle on disk."""
    outdir = tmp_path_factory.mktemp("bundle_position")
    spec = straight_position_scenario(duration=6.0, walk_time=4.0)
    result = run_scenario(model12, spec, outdir=outdir)
    return outdir, result


@pytest.fixture(scope="session")
def torque_bundle(tmp_path_factory, model12):
    """8 s torque-mode walk (2 steps) with its log bundle on disk."""
    outdir = tmp_path_factory.mktemp("bundle_torque")
    spec = straight_torque_scenario(duration=8.0, walk_time=5.0)
    result = run_scenario(model12, spec, outdir=outdir)
    return outdir, result
