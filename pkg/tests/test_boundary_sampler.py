import json

import numpy as np
import pytest

from tsb_monitor.core.exceptions import ConfigError, ContractError, NoBoundaryError, StationaryPointError
from tsb_monitor.models.domain import OperatingPoint, Sample, SampleSet
from tsb_monitor.models.models import PROVENANCE_ORDER, Label, Provenance
from tsb_monitor.schemas.schemas import SamplerConfig
from tsb_monitor.services.boundary_sampler import (
    bisect_crossing,
    check_termination,
    default_gamma_cri,
    generate_dataset,
    lhs_baseline,
    load_sample_set,
    random_baseline,
    resample_gaps,
    save_sample_set,
    seed_initial_ops,
    sidecar_path,
    step_toward_boundary,
    tangent_direction,
    traverse_boundary,
)
from tests.conftest import LinearIndexEvaluator, PlaneModel

U_MAX = np.array([300.0, 300.0])
BOX = (np.zeros(2), U_MAX)


def _sample(evaluator, u, provenance=Provenance.SEED):
    return evaluator(OperatingPoint(np.asarray(u, dtype=float), np.ones(3)), provenance, True)


def test_default_gamma_cri():
    assert default_gamma_cri(U_MAX) == pytest.approx(9.0)


def test_seeds_are_cell_centres(case9):
    ops = seed_initial_ops(case9, BOX, 5, rng_seed=3, load_band=(0.9, 1.1))
    assert len(ops) == 5
    points = np.array([op.gen_p for op in ops])
    centres = (np.arange(5) + 0.5) / 5 * 300.0
    for j in range(2):
        np.testing.assert_allclose(np.sort(points[:, j]), centres)
    loads = np.array([op.load_scale for op in ops])
    assert loads.shape == (5, 3)
    assert np.all((loads >= 0.9) & (loads <= 1.1))


def test_seeds_are_reproducible(case9):
    first = seed_initial_ops(case9, BOX, 4, rng_seed=7)
    second = seed_initial_ops(case9, BOX, 4, rng_seed=7)
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a.gen_p, b.gen_p)
        np.testing.assert_array_equal(a.load_scale, b.load_scale)


@pytest.mark.parametrize("n, bounds", [(0, BOX), (3, (U_MAX, np.zeros(2)))])
def test_seeding_rejects_bad_requests(case9, n, bounds):
    with pytest.raises(ConfigError):
        seed_initial_ops(case9, bounds, n, rng_seed=0)


def test_step_moves_toward_plane(planar_evaluator, sampler_cfg):
    sample = _sample(planar_evaluator, [100.0, 100.0])
    assert sample.phi == pytest.approx(10.0)
    op = step_toward_boundary(sample, sampler_cfg, U_MAX, phi_ref=10.0)
    nu = 0.2 * np.tanh(1.0)
    np.testing.assert_allclose(op.gen_p, 100.0 + nu * 300.0)
    np.testing.assert_array_equal(op.load_scale, sample.op.load_scale)


def test_step_size_floor_near_boundary(planar_evaluator, sampler_cfg):
    sample = _sample(planar_evaluator, [149.0, 150.0])
    op = step_toward_boundary(sample, sampler_cfg, U_MAX, phi_ref=1e6)
    np.testing.assert_allclose(op.gen_p - sample.u, sampler_cfg.nu_min * 300.0)


def test_step_is_clipped_and_masked(planar_evaluator, sampler_cfg):
    sample = _sample(planar_evaluator, [290.0, 5.0])
    op = step_toward_boundary(sample, sampler_cfg, U_MAX, phi_ref=0.1, free_mask=np.array([True, False]))
    assert op.gen_p[0] == 300.0
    assert op.gen_p[1] == 5.0


def test_step_requires_gradient(planar_evaluator, sampler_cfg):
    sample = planar_evaluator(OperatingPoint(np.array([100.0, 100.0]), np.ones(3)), Provenance.SEED, False)
    with pytest.raises(ContractError):
        step_toward_boundary(sample, sampler_cfg, U_MAX)


def test_zero_gradient_is_stationary(planar_evaluator, sampler_cfg):
    sample = _sample(planar_evaluator, [100.0, 100.0])
    flat = Sample(
        op=sample.op, contingency_id="synthetic", label=Label.STABLE, provenance=Provenance.SEED,
        phi=1.0, lam=1, grad=np.zeros(2),
    )
    with pytest.raises(StationaryPointError):
        step_toward_boundary(flat, sampler_cfg, U_MAX)


def test_bisection_lands_on_boundary(planar_evaluator):
    stable = _sample(planar_evaluator, [100.0, 100.0])
    unstable = _sample(planar_evaluator, [200.0, 200.0])
    trail = []
    result = bisect_crossing(stable, unstable, planar_evaluator, phi_cri=0.5, width=0.1, trail=trail)
    assert result.critical
    assert result.provenance == Provenance.ROUTE2_BISECT
    assert abs(result.u.sum() - 300.0) < 5.0
    assert trail and trail[-1].op is result.op


def test_bisection_needs_opposite_labels(planar_evaluator):
    a = _sample(planar_evaluator, [10.0, 10.0])
    b = _sample(planar_evaluator, [20.0, 20.0])
    with pytest.raises(ContractError):
        bisect_crossing(a, b, planar_evaluator, phi_cri=0.5)


def test_tangent_in_the_plane():
    rng = np.random.default_rng(0)
    t = tangent_direction(np.array([3.0, 4.0]), rng)
    assert t @ np.array([3.0, 4.0]) == pytest.approx(0.0)
    assert np.linalg.norm(t) == pytest.approx(1.0)
    flipped = tangent_direction(np.array([3.0, 4.0]), rng, previous=-t)
    np.testing.assert_allclose(flipped, -t)


def test_tangent_in_higher_dimension_respects_mask():
    rng = np.random.default_rng(1)
    grad = np.array([1.0, -2.0, 0.5, 4.0])
    mask = np.array([True, True, True, False])
    t = tangent_direction(grad, rng, free_mask=mask)
    assert t[3] == 0.0
    assert t @ np.where(mask, grad, 0.0) == pytest.approx(0.0, abs=1e-12)
    assert np.linalg.norm(t) == pytest.approx(1.0)


def test_no_tangent_with_one_free_coordinate():
    rng = np.random.default_rng(0)
    assert tangent_direction(np.array([1.0, 1.0]), rng, free_mask=np.array([True, False])) is None


def test_traversal_stays_on_boundary(planar_evaluator):
    cfg = SamplerConfig(max_route_steps=4)
    critical = _sample(planar_evaluator, [150.0, 150.0])
    points = traverse_boundary(critical, cfg, U_MAX, planar_evaluator, np.random.default_rng(0), BOX)
    assert 0 < len(points) <= 4
    for p in points:
        assert p.critical
        assert p.provenance == Provenance.ROUTE3_TRAVERSE
        assert abs(p.u.sum() - 300.0) < 5.0
    spread = np.ptp([p.u[0] for p in points])
    assert spread > 0.0


def test_traversal_disabled(planar_evaluator):
    cfg = SamplerConfig(max_route_steps=0)
    critical = _sample(planar_evaluator, [150.0, 150.0])
    assert traverse_boundary(critical, cfg, U_MAX, planar_evaluator) == []


def test_gap_points_lie_on_model_zero_set():
    model = PlaneModel([1.0, 1.0], 300.0)
    points, gammas = resample_gaps([], model, n_new=5, rng_seed=0, bounds=BOX, n_chords=64)
    assert len(points) == 5
    for p in points:
        assert abs(p.sum() - 300.0) < 1e-4
    assert np.isinf(gammas[0])
    assert np.all(np.diff(gammas[1:]) <= 1e-9)


def test_gap_gammas_measure_distance_to_critical_samples():
    model = PlaneModel([1.0, 1.0], 300.0)
    anchors = [
        Sample(
            op=OperatingPoint(np.array([u, 300.0 - u]), np.ones(3)),
            contingency_id="synthetic", label=Label.STABLE, provenance=Provenance.ROUTE1,
            phi=0.0, lam=1, critical=True,
        )
        for u in (50.0, 150.0, 250.0)
    ]
    points, gammas = resample_gaps(anchors, model, n_new=4, rng_seed=2, bounds=BOX, n_chords=128)
    anchor_u = np.array([s.u for s in anchors])
    first = ((anchor_u - points[0]) ** 2).sum(axis=1).min()
    assert gammas[0] == pytest.approx(first)
    assert np.all(np.diff(gammas) <= 1e-9)


def test_gap_resampling_needs_a_boundary():
    class Everywhere:
        def decision_values(self, points):
            return np.ones(np.atleast_2d(points).shape[0])

    with pytest.raises(NoBoundaryError):
        resample_gaps([], Everywhere(), n_new=2, rng_seed=0, bounds=BOX)
    with pytest.raises(ContractError):
        resample_gaps([], PlaneModel([1.0, 1.0], 300.0), n_new=0, rng_seed=0, bounds=BOX)


def test_termination_check():
    assert check_termination([12.0, 4.0], 9.0)
    assert check_termination([9.0], 9.0)
    assert not check_termination([12.0, 10.0], 9.0)
    with pytest.raises(ContractError):
        check_termination([], 9.0)


def _small_run_config():
    return SamplerConfig(
        n_seeds=6, max_samples=60, resample_rounds=1, resample_n_new=3,
        resample_chords=64, max_route_steps=2, rng_seed=5,
    )


def test_dataset_on_planar_boundary(case9, contingency9):
    cfg = _small_run_config()
    evaluator = LinearIndexEvaluator([1.0, 1.0], 300.0, [300.0, 300.0], contingency_id=contingency9.id)
    result = generate_dataset(case9, contingency9, cfg, evaluator=evaluator)

    assert result.contingency_id == contingency9.id
    assert len(result.feasible()) <= cfg.max_samples
    assert result.critical()
    for s in result.critical():
        assert abs(s.u.sum() - 300.0) < 5.0
    orders = [(PROVENANCE_ORDER[s.provenance], s.seed_index, s.step_index) for s in result.samples]
    assert orders == sorted(orders)
    seeds = [s for s in result.samples if s.provenance == Provenance.SEED]
    assert len(seeds) == cfg.n_seeds
    keys = {(tuple(s.u), tuple(s.op.load_scale)) for s in result.samples}
    assert len(keys) == len(result.samples)


def test_dataset_is_deterministic(case9, contingency9):
    cfg = _small_run_config()
    runs = []
    for _ in range(2):
        evaluator = LinearIndexEvaluator([1.0, 1.0], 300.0, [300.0, 300.0], contingency_id=contingency9.id)
        runs.append(generate_dataset(case9, contingency9, cfg, evaluator=evaluator))
    assert len(runs[0]) == len(runs[1])
    for a, b in zip(runs[0].samples, runs[1].samples):
        np.testing.assert_array_equal(a.u, b.u)
        assert a.provenance == b.provenance


def test_budget_caps_feasible_evaluations(case9, contingency9):
    cfg = SamplerConfig(n_seeds=6, max_samples=8, rng_seed=5)
    evaluator = LinearIndexEvaluator([1.0, 1.0], 300.0, [300.0, 300.0], contingency_id=contingency9.id)
    result = generate_dataset(case9, contingency9, cfg, evaluator=evaluator)
    assert len(result.feasible()) == 8
    assert evaluator.calls == 8


def test_frozen_coordinates_stay_put(case9, contingency9):
    cfg = _small_run_config()
    evaluator = LinearIndexEvaluator([1.0, 1.0], 300.0, [300.0, 300.0], contingency_id=contingency9.id)
    base = OperatingPoint(np.array([120.0, 85.0]), np.ones(3))
    result = generate_dataset(
        case9, contingency9, cfg, evaluator=evaluator,
        free_mask=np.array([True, False]), base_op=base,
    )
    assert all(s.u[1] == 85.0 for s in result.samples)


def test_baselines(case9, contingency9, planar_evaluator, sampler_cfg):
    rand = random_baseline(case9, contingency9, sampler_cfg, 7, evaluator=planar_evaluator)
    lhs = lhs_baseline(case9, contingency9, sampler_cfg, 7, evaluator=planar_evaluator)
    assert len(rand) == len(lhs) == 7
    assert {s.provenance for s in rand.samples} == {Provenance.RANDOM}
    assert {s.provenance for s in lhs.samples} == {Provenance.LHS}
    assert all(s.grad is None for s in lhs.samples)
    assert [s.seed_index for s in rand.samples] == list(range(7))


def test_sample_set_jsonl(tmp_path, planar_evaluator):
    samples = [
        _sample(planar_evaluator, [100.0, 100.0]),
        _sample(planar_evaluator, [200.0, 200.0]),
        _sample(planar_evaluator, [400.0, 0.0]),
    ]
    original = SampleSet(samples, "case9", "synthetic", SamplerConfig(n_seeds=3))
    path = tmp_path / "samples.jsonl"
    save_sample_set(original, path)

    lines = path.read_text().splitlines()
    assert len(lines) == 3
    assert json.loads(lines[0])["lambda"] == 1
    assert sidecar_path(path).name == "samples.meta.json"

    loaded = load_sample_set(path)
    assert loaded.case_ref == "case9"
    assert loaded.config.n_seeds == 3
    assert [s.label for s in loaded.samples] == [Label.STABLE, Label.UNSTABLE, Label.INFEASIBLE]
    np.testing.assert_allclose(loaded.samples[0].grad, samples[0].grad)
    assert loaded.samples[2].phi is None


def test_missing_sample_set(tmp_path):
    with pytest.raises(ContractError):
        load_sample_set(tmp_path / "absent.jsonl")


def test_descent_paths_shrink_the_index(case9, contingency9, sim_cfg):
    cfg = SamplerConfig(n_seeds=6, max_samples=80, resample_rounds=0, max_route_steps=0, rng_seed=0)
    result = generate_dataset(case9, contingency9, cfg, sim=sim_cfg)

    paths = {}
    for s in result.samples:
        if s.provenance in (Provenance.SEED, Provenance.ROUTE1) and s.feasible:
            paths.setdefault(s.seed_index, []).append(s)
    steps = []
    for path in paths.values():
        path.sort(key=lambda s: s.step_index)
        for prev, nxt in zip(path, path[1:]):
            if prev.label == nxt.label:
                steps.append(abs(nxt.phi) < abs(prev.phi))
    assert len(steps) >= 3
    assert np.mean(steps) >= 0.9
