import json

import numpy as np
import pytest

from tsb_monitor.core.config import Settings
from tsb_monitor.models.domain import OperatingPoint, Sample
from tsb_monitor.models.models import Label, Provenance
from tsb_monitor.schemas.schemas import SamplerConfig, SimConfig
from tsb_monitor.services.grid_model import load_case, parse_case
from tsb_monitor.services.tds_engine import make_contingency


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run acceptance-scale tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: acceptance-scale run, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


TWO_MACHINE = {
    "name": "two_machine",
    "base_mva": 100.0,
    "buses": [{"id": 1, "v_setpoint": 1.0}, {"id": 2, "v_setpoint": 1.0}, {"id": 3}],
    "branches": [
        {"from": 1, "to": 3, "r": 0.0, "x": 0.1},
        {"from": 2, "to": 3, "r": 0.0, "x": 0.1},
        {"from": 1, "to": 2, "r": 0.0, "x": 0.2},
    ],
    "generators": [
        {"bus": 1, "tj": 10.0, "xd_prime": 0.1, "p_min": 0.0, "p_max": 200.0, "slack": True},
        {"bus": 2, "tj": 8.0, "xd_prime": 0.15, "p_min": 0.0, "p_max": 150.0, "p_setpoint": 50.0},
    ],
    "loads": [{"bus": 3, "p_mw": 100.0, "q_mvar": 10.0}],
}


@pytest.fixture(scope="session")
def case9():
    return load_case("case9")


@pytest.fixture(scope="session")
def small_case():
    """Two machines feeding one load bus; the controllable space is one-dimensional."""
    return parse_case(json.dumps(TWO_MACHINE))


@pytest.fixture(scope="session")
def small_case_doc():
    return json.loads(json.dumps(TWO_MACHINE))


@pytest.fixture(scope="session")
def contingency9(case9):
    return make_contingency(case9, 5, "5-7", 0.2)


@pytest.fixture
def sim_cfg():
    return SimConfig(t_end=2.0, dt=0.01)


@pytest.fixture
def sampler_cfg():
    return SamplerConfig()


@pytest.fixture
def settings():
    return Settings(seed=0, workers=1)


class LinearIndexEvaluator:
    """
    Synthetic evaluator with a planar boundary.

    phi grows linearly with the distance to the plane w.u = c on the stable side
    (w.u < c) and on the unstable side alike, so descent always reaches the plane.
    Points outside the box [0, upper] are infeasible.
    """

    def __init__(self, w, c, upper, slope=0.1, contingency_id="synthetic"):
        self.w = np.asarray(w, dtype=float)
        self.c = float(c)
        self.upper = np.asarray(upper, dtype=float)
        self.slope = slope
        self.contingency_id = contingency_id
        self.calls = 0

    def __call__(self, op: OperatingPoint, provenance: Provenance, with_gradient: bool = True) -> Sample:
        self.calls += 1
        u = op.gen_p
        if np.any(u < -1e-9) or np.any(u > self.upper + 1e-9):
            return Sample(op=op, contingency_id=self.contingency_id, label=Label.INFEASIBLE, provenance=provenance)
        margin = self.c - float(self.w @ u)
        stable = margin > 0
        phi = self.slope * abs(margin)
        grad = None
        if with_gradient:
            # d phi / du points away from the plane on both sides
            grad = -self.slope * self.w if stable else self.slope * self.w
        return Sample(
            op=op,
            contingency_id=self.contingency_id,
            label=Label.STABLE if stable else Label.UNSTABLE,
            provenance=provenance,
            phi=phi,
            lam=1 if stable else -1,
            grad=grad,
        )


@pytest.fixture
def planar_evaluator():
    return LinearIndexEvaluator(w=[1.0, 1.0], c=300.0, upper=[300.0, 300.0])


class PlaneModel:
    """Decision function c - w.u; positive on the stable side."""

    def __init__(self, w, c):
        self.w = np.asarray(w, dtype=float)
        self.c = c

    def decision_values(self, points):
        return self.c - np.atleast_2d(points) @ self.w
