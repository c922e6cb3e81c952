import numpy as np
import pytest

from tsb_monitor.core.exceptions import ConfigError, ContractError
from tsb_monitor.models.domain import Contingency, Trajectory
from tsb_monitor.schemas.schemas import SimConfig
from tsb_monitor.services.grid_model import base_operating_point, initialize_operating_point
from tsb_monitor.services.tds_engine import (
    classify_stability,
    clearing_step,
    coi_series,
    contingencies_for_case,
    make_contingency,
    simulate,
    swing_rhs,
    write_trajectory_csv,
)


def _run(case, cont, cfg):
    init = initialize_operating_point(case, base_operating_point(case), cont)
    return init, simulate(init, cont, cfg)


def test_clearing_step_on_grid(sim_cfg):
    assert clearing_step(None, sim_cfg) == 0
    assert clearing_step(Contingency("c", 5, "5-7", 0.2), sim_cfg) == 20


@pytest.mark.parametrize(
    "cfg, t_clear",
    [
        (SimConfig(t_end=2.0, dt=0.03), 0.2),
        (SimConfig(t_end=2.0, dt=0.3), 0.2),
        (SimConfig(t_end=0.1, dt=0.01), 0.2),
    ],
    ids=["off-grid", "step-too-long", "window-too-short"],
)
def test_clearing_step_rejects(cfg, t_clear):
    with pytest.raises(ConfigError):
        clearing_step(Contingency("c", 5, "5-7", t_clear), cfg)


def test_swing_rhs_vanishes_at_equilibrium(case9):
    init = initialize_operating_point(case9, base_operating_point(case9))
    d_delta, d_omega = swing_rhs(init.delta0, init.omega0, init, init.y_pre, 377.0)
    np.testing.assert_allclose(d_delta, 0.0)
    np.testing.assert_allclose(d_omega, 0.0, atol=1e-6)


def test_undisturbed_run_stays_at_equilibrium(case9, sim_cfg):
    init, traj = _run(case9, None, sim_cfg)
    assert traj.n_steps == 201
    assert not traj.diverged
    np.testing.assert_allclose(traj.delta, np.tile(init.delta0, (traj.n_steps, 1)), atol=1e-5)
    np.testing.assert_allclose(traj.omega, 1.0, atol=1e-7)


def test_coi_weighted_deviation_is_zero(case9, contingency9, sim_cfg):
    init, traj = _run(case9, contingency9, sim_cfg)
    deviation = (traj.delta - traj.coi[:, None]) @ init.inertia
    np.testing.assert_allclose(deviation, 0.0, atol=1e-9)
    np.testing.assert_allclose(coi_series(traj, case9.generators), traj.coi)


def test_coi_dimension_mismatch():
    with pytest.raises(ContractError):
        coi_series(np.zeros((4, 3)), np.ones(2))


def test_short_fault_is_stable(case9, sim_cfg):
    cont = make_contingency(case9, 5, "5-7", 0.05)
    _, traj = _run(case9, cont, sim_cfg)
    verdict = classify_stability(traj, sim_cfg)
    assert verdict.stable
    assert verdict.lam == 1
    assert verdict.first_violation_time is None
    assert verdict.max_excursion < np.pi


def test_long_fault_at_generator_bus_is_unstable(case9, sim_cfg):
    cont = make_contingency(case9, 7, "5-7", 0.5)
    _, traj = _run(case9, cont, sim_cfg)
    verdict = classify_stability(traj, sim_cfg)
    assert not verdict.stable
    assert verdict.lam == -1
    assert verdict.first_violation_time is not None
    assert verdict.max_excursion > np.pi


def test_classify_reports_first_violation():
    times = np.arange(4) * 0.1
    delta = np.array([[0.0, 0.0], [1.0, -1.0], [3.5, -3.5], [5.0, -5.0]])
    traj = Trajectory(times=times, delta=delta, omega=np.ones_like(delta), coi=np.zeros(4))
    verdict = classify_stability(traj, SimConfig(t_end=1.0, dt=0.1))
    assert verdict.lam == -1
    assert verdict.first_violation_time == pytest.approx(0.2)
    assert verdict.max_excursion == pytest.approx(5.0)


def test_divergent_run_is_unstable():
    times = np.arange(3) * 0.1
    delta = np.zeros((3, 2))
    traj = Trajectory(times=times, delta=delta, omega=np.ones_like(delta), coi=np.zeros(3), diverged=True)
    verdict = classify_stability(traj, SimConfig(t_end=1.0, dt=0.1))
    assert not verdict.stable
    assert verdict.first_violation_time == pytest.approx(0.2)


def test_trajectory_csv_layout(tmp_path, case9, contingency9, sim_cfg):
    _, traj = _run(case9, contingency9, sim_cfg)
    path = tmp_path / "traj.csv"
    write_trajectory_csv(traj, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,delta_1,delta_2,delta_3,omega_1,omega_2,omega_3,coi"
    assert len(lines) == traj.n_steps + 1


def test_contingency_ids_and_validation(case9):
    assert make_contingency(case9, 5, "5-7", 0.2).id == "f5-t5-7"
    with pytest.raises(ContractError):
        make_contingency(case9, 4, "5-7", 0.2)
    with pytest.raises(ContractError):
        make_contingency(case9, 5, "5-9", 0.2)
    with pytest.raises(ConfigError):
        make_contingency(case9, 5, "5-7", 0.0)
    relaxed = make_contingency(case9, 4, "5-7", 0.2, require_adjacent=False)
    assert relaxed.fault_bus == 4


def test_n_minus_one_list_skips_radial_branches(case9):
    conts = contingencies_for_case(case9, 0.1)
    assert len(conts) == 12
    tripped = {c.tripped_branch for c in conts}
    assert tripped.isdisjoint({"1-4", "2-7", "3-9"})
    assert all(c.fault_bus in (case9.branch(c.tripped_branch).from_bus, case9.branch(c.tripped_branch).to_bus) for c in conts)


def test_halving_step_converges(case9):
    cont = make_contingency(case9, 5, "5-7", 0.05)
    coarse_cfg = SimConfig(t_end=2.0, dt=0.01)
    fine_cfg = SimConfig(t_end=2.0, dt=0.005)
    _, coarse = _run(case9, cont, coarse_cfg)
    _, fine = _run(case9, cont, fine_cfg)
    assert fine.n_steps == 2 * coarse.n_steps - 1
    np.testing.assert_allclose(fine.times[::2], coarse.times)

    coarse_exc = np.abs(coarse.delta - coarse.coi[:, None]).max(axis=1)
    fine_exc = np.abs(fine.delta - fine.coi[:, None]).max(axis=1)[::2]
    assert np.abs(fine_exc - coarse_exc).max() < 1e-4
    assert abs(fine_exc.max() - classify_stability(coarse, coarse_cfg).max_excursion) < 1e-4
