import csv
import json
from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from tsb_monitor.core.config import Settings
from tsb_monitor.core.exceptions import ContractError, FitError, UsageError
from tsb_monitor.models.domain import GridSpec, OperatingPoint, SensitivityMatrix
from tsb_monitor.models.models import Provenance, Verdict
from tsb_monitor.schemas.schemas import RefreshSchedule, SamplerConfig
from tsb_monitor.services import monitor
from tsb_monitor.services.boundary_model import constant_model
from tsb_monitor.services.boundary_sampler import generate_dataset
from tsb_monitor.services.monitor import (
    OFFLINE_ARTIFACT,
    assess,
    brute_force_oracle,
    export_plot_data,
    load_labeled_grid,
    load_offline,
    load_schedule,
    refresh_series,
    run_offline,
    run_refresh,
    save_labeled_grid,
    verdict_for,
)
from tsb_monitor.services.tds_engine import make_contingency
from tsb_monitor.utils.hashing import MANIFEST_NAME
from tests.conftest import LinearIndexEvaluator

N_OPS = 8
FIRST_HALF = [[2.0, 1.0]] * 4 + [[1.0, 2.0]] * 4
ALTERNATING = [[2.0, 1.0], [1.0, 2.0]] * 4


def _ops():
    return [OperatingPoint(np.array([60.0 + 15.0 * i, 140.0 - 10.0 * i]), np.ones(3)) for i in range(N_OPS)]


def _planted(patterns, phi_floor, excluded=()):
    """Sensitivity function returning fixed gradient patterns per contingency id."""

    def sensitivity_fn(case, ops, cont):
        pattern, floor = patterns[cont.id], phi_floor[cont.id]
        skip = excluded if cont.id == "f5-t5-7" else ()
        keep = [i for i in range(len(ops)) if i not in skip]
        return SensitivityMatrix(
            contingency_id=cont.id,
            rows=np.array([pattern[i] for i in keep], dtype=float) * (1.0 + 0.1 * np.arange(len(keep)))[:, None],
            op_refs=tuple(f"op{i}" for i in keep),
            phi=np.array([floor + i for i in keep], dtype=float),
            lambdas=np.ones(len(keep), dtype=int),
            excluded=tuple(skip),
        )

    return sensitivity_fn


@pytest.fixture
def contingencies(case9):
    return [
        make_contingency(case9, 5, "5-7", 0.2),
        make_contingency(case9, 7, "5-7", 0.2),
        make_contingency(case9, 6, "6-9", 0.2),
    ]


@pytest.fixture
def offline_settings():
    return Settings(
        seed=0,
        workers=1,
        sampler=SamplerConfig(n_seeds=6, max_samples=60, resample_rounds=1, resample_chords=64, max_route_steps=2),
    )


@pytest.fixture
def artifacts(case9, contingencies, offline_settings, tmp_path):
    fn = _planted(
        {"f5-t5-7": FIRST_HALF, "f7-t5-7": FIRST_HALF, "f6-t6-9": ALTERNATING},
        {"f5-t5-7": 1.0, "f7-t5-7": 0.5, "f6-t6-9": 2.0},
        excluded=(7,),
    )
    return run_offline(case9, _ops(), contingencies, offline_settings, tmp_path / "offline", sensitivity_fn=fn)


def _planar_factory(cont):
    return LinearIndexEvaluator([1.0, 1.0], 300.0, [300.0, 300.0], contingency_id=cont.id)


def test_verdict_bands():
    assert verdict_for(0.5, 0.1) == Verdict.SECURE
    assert verdict_for(0.1, 0.1) == Verdict.MARGINAL
    assert verdict_for(-0.05, 0.1) == Verdict.MARGINAL
    assert verdict_for(-0.5, 0.1) == Verdict.INSECURE


def test_assess_uses_worst_model():
    secure = constant_model("a", stable=True, dim=2)
    insecure = constant_model("b", stable=False, dim=2)
    report = assess(np.array([10.0, 20.0]), [secure, insecure])
    assert report.verdict == Verdict.INSECURE
    assert report.current_op_decision_value == -1.0
    assert report.boundary_model_ref == ["a", "b"]
    assert assess(OperatingPoint(np.array([10.0, 20.0]), np.ones(3)), [secure]).verdict == Verdict.SECURE
    assert assess(np.array([10.0, 20.0]), [secure], margin=2.0).verdict == Verdict.MARGINAL
    with pytest.raises(ContractError):
        assess(np.array([10.0, 20.0]), [])


def test_offline_stage_artifacts(artifacts, contingencies, tmp_path):
    assert artifacts.excluded_ops == [7]
    assert len(artifacts.ops) == N_OPS
    first, second, third = artifacts.contingencies
    assert first.assignments == [0, 0, 0, 0, 1, 1, 1]
    assert third.assignments == [0, 1, 0, 1, 0, 1, 0]
    assert artifacts.contingency_assignments == [0, 0, 1]
    # within the first group the smaller stable index is the more severe
    assert artifacts.representative_contingencies == ["f7-t5-7", "f6-t6-9"]
    assert all(r != 7 for r in first.representatives)
    assert [g.cluster_id for g in first.gaussians] == [0, 1]
    assert first.mcg[0].ranked_generators == [0, 1]
    assert first.mcg[1].ranked_generators == [1, 0]

    out = tmp_path / "offline"
    assert (out / OFFLINE_ARTIFACT).is_file()
    manifest = (out / MANIFEST_NAME).read_text()
    assert manifest.strip().endswith(OFFLINE_ARTIFACT)
    assert load_offline(out) == artifacts


def test_offline_stage_is_reproducible(case9, contingencies, offline_settings, artifacts, tmp_path):
    fn = _planted(
        {"f5-t5-7": FIRST_HALF, "f7-t5-7": FIRST_HALF, "f6-t6-9": ALTERNATING},
        {"f5-t5-7": 1.0, "f7-t5-7": 0.5, "f6-t6-9": 2.0},
        excluded=(7,),
    )
    run_offline(case9, _ops(), contingencies, offline_settings, tmp_path / "again", sensitivity_fn=fn)
    first = (tmp_path / "offline" / OFFLINE_ARTIFACT).read_bytes()
    second = (tmp_path / "again" / OFFLINE_ARTIFACT).read_bytes()
    assert first == second


def test_offline_stage_input_checks(case9, contingencies, offline_settings):
    with pytest.raises(UsageError):
        run_offline(case9, [], contingencies, offline_settings)
    with pytest.raises(FitError):
        run_offline(case9, _ops()[:1], contingencies, offline_settings)


def test_missing_offline_artifacts(tmp_path):
    with pytest.raises(UsageError):
        load_offline(tmp_path)


def test_refresh_in_a_stable_box(case9, artifacts, offline_settings):
    # the 40 MW box around (100, 100) stays below the plane
    current = OperatingPoint(np.array([100.0, 100.0]), np.ones(3))
    models, report = run_refresh(case9, current, artifacts, offline_settings, evaluator_factory=_planar_factory)
    assert [m.contingency_id for m in models] == artifacts.representative_contingencies
    assert all(m.margin is not None for m in models)
    assert set(report.matched_cluster) == set(artifacts.representative_contingencies)
    assert all(mcgs == [0, 1] or mcgs == [1, 0] for mcgs in report.mcgs.values())
    assert report.current_op_decision_value == 1.0
    assert report.unstable_fraction == 0.0
    assert report.verdict in (Verdict.SECURE, Verdict.MARGINAL)
    assert report.samples_used > 0
    assert report.load_level == pytest.approx(1.0)


def test_refresh_across_the_boundary(case9, artifacts, offline_settings):
    current = OperatingPoint(np.array([140.0, 140.0]), np.ones(3))
    models, report = run_refresh(case9, current, artifacts, offline_settings, evaluator_factory=_planar_factory)
    assert len(models) == 2
    assert report.samples_used > 0
    assert 0.0 <= report.unstable_fraction <= 1.0
    assert report.boundary_model_ref == artifacts.representative_contingencies


def test_refresh_draws_seeds_from_settings(case9, artifacts, offline_settings, monkeypatch):
    seen = []

    def recording(case, cont, cfg, *args, **kwargs):
        result = generate_dataset(case, cont, cfg, *args, **kwargs)
        seen.append((cfg.rng_seed, [tuple(s.u) for s in result.samples if s.provenance == Provenance.SEED]))
        return result

    monkeypatch.setattr(monitor, "generate_dataset", recording)
    current = OperatingPoint(np.array([100.0, 100.0]), np.ones(3))
    for seed in (0, 5):
        settings = offline_settings.model_copy(update={"seed": seed})
        run_refresh(case9, current, artifacts, settings, evaluator_factory=_planar_factory)

    n_reps = len(artifacts.representative_contingencies)
    assert [rng_seed for rng_seed, _ in seen] == [0] * n_reps + [5] * n_reps
    assert seen[0][1] != seen[n_reps][1]


def test_refresh_rejects_mismatched_search_box(case9, artifacts, offline_settings):
    current = OperatingPoint(np.array([100.0, 100.0]), np.ones(3))
    with pytest.raises(UsageError):
        run_refresh(
            case9, current, artifacts, offline_settings, search_box=[40.0], evaluator_factory=_planar_factory
        )


def test_refresh_series_follows_profile(case9, artifacts, offline_settings):
    schedule = RefreshSchedule(period=300.0, times=[0.0, 300.0], load_scale=[1.0, 1.06])
    base = OperatingPoint(np.array([100.0, 100.0]), np.ones(3))
    reports = refresh_series(case9, base, artifacts, schedule, offline_settings, evaluator_factory=_planar_factory)
    assert [r.simulated_time for r in reports] == [0.0, 300.0]
    assert [r.load_level for r in reports] == pytest.approx([1.0, 1.06])


def test_refresh_schedule_interpolates():
    schedule = RefreshSchedule(period=300.0, times=[0.0, 600.0], load_scale=[0.8, 1.1])
    assert schedule.load_at(300.0) == pytest.approx(0.95)
    assert schedule.load_at(900.0) == pytest.approx(1.1)
    with pytest.raises(ValueError):
        RefreshSchedule(period=300.0, times=[0.0, 0.0], load_scale=[1.0, 1.0])


def _oracle_evaluator(contingency9):
    return LinearIndexEvaluator([1.0, 1.0], 300.0, [250.0, 300.0], contingency_id=contingency9.id)


def test_oracle_labels_lattice(case9, contingency9, settings):
    spec = GridSpec(np.zeros(2), np.array([300.0, 300.0]), 100.0)
    grid = brute_force_oracle(case9, contingency9, spec, settings, evaluator=_oracle_evaluator(contingency9))
    assert grid.points.shape == (12, 2)
    assert grid.infeasible_points.shape == (4, 2)
    np.testing.assert_array_equal(grid.stable, grid.points.sum(axis=1) < 300.0)
    assert grid.contingency_id == contingency9.id


def test_oracle_resumes_from_checkpoint(case9, contingency9, tmp_path):
    settings = Settings(seed=0, workers=1, checkpoint_every=2)
    spec = GridSpec(np.zeros(2), np.array([300.0, 300.0]), 100.0)
    checkpoint = tmp_path / "oracle.sqlite"

    partial_run = brute_force_oracle(
        case9, contingency9, spec, settings, checkpoint, _oracle_evaluator(contingency9), max_points=5
    )
    assert partial_run.points.shape[0] + partial_run.infeasible_points.shape[0] == 5

    resumed_evaluator = _oracle_evaluator(contingency9)
    resumed = brute_force_oracle(case9, contingency9, spec, settings, checkpoint, resumed_evaluator)
    assert resumed_evaluator.calls == 11

    fresh = brute_force_oracle(case9, contingency9, spec, settings, evaluator=_oracle_evaluator(contingency9))
    np.testing.assert_array_equal(resumed.points, fresh.points)
    np.testing.assert_array_equal(resumed.stable, fresh.stable)
    np.testing.assert_allclose(resumed.phi, fresh.phi)


@pytest.mark.parametrize(
    "lower, upper",
    [([0.0, 0.0], [400.0, 300.0]), ([0.0], [300.0])],
    ids=["beyond-limits", "wrong-dimension"],
)
def test_oracle_rejects_bad_grid(case9, contingency9, settings, lower, upper):
    spec = GridSpec(np.array(lower), np.array(upper), 100.0)
    with pytest.raises(ContractError):
        brute_force_oracle(case9, contingency9, spec, settings, evaluator=_oracle_evaluator(contingency9))


def test_labeled_grid_file(case9, contingency9, settings, tmp_path):
    spec = GridSpec(np.zeros(2), np.array([300.0, 300.0]), 150.0)
    grid = brute_force_oracle(case9, contingency9, spec, settings, evaluator=_oracle_evaluator(contingency9))
    path = tmp_path / "grid.json"
    save_labeled_grid(grid, path)
    loaded = load_labeled_grid(path)
    np.testing.assert_array_equal(loaded.points, grid.points)
    np.testing.assert_array_equal(loaded.stable, grid.stable)
    assert loaded.grid_spec.interval == 150.0
    with pytest.raises(UsageError):
        load_labeled_grid(tmp_path / "none.json")


def test_export_rejects_unknown_kind(tmp_path):
    with pytest.raises(UsageError):
        export_plot_data("scatter", tmp_path)
    with pytest.raises(UsageError):
        export_plot_data("search_paths", tmp_path)


def test_export_boundary_curve(tmp_path):
    spec = GridSpec(np.zeros(2), np.array([10.0, 10.0]), 5.0)
    (path,) = export_plot_data("boundary_curve", tmp_path, model=constant_model("c", True, 2), grid_spec=spec)
    with path.open() as handle:
        rows = list(csv.reader(handle))
    assert rows[0] == ["u_1", "u_2", "decision", "label"]
    assert len(rows) == 1 + 9
    assert {r[3] for r in rows[1:]} == {"stable"}


def test_export_gradient_field(tmp_path):
    spec = GridSpec(np.zeros(2), np.array([300.0, 300.0]), 150.0)
    evaluator = LinearIndexEvaluator([1.0, 1.0], 300.0, [300.0, 300.0])
    (path,) = export_plot_data(
        "gradient_field", tmp_path, grid_spec=spec, evaluator=evaluator, load_scale=np.ones(3)
    )
    with path.open() as handle:
        rows = list(csv.reader(handle))
    assert rows[0] == ["u_1", "u_2", "phi", "grad_1", "grad_2", "label"]
    assert len(rows) == 1 + 9


def test_export_cluster_heatmap(artifacts, tmp_path):
    (path,) = export_plot_data("cluster_heatmap", tmp_path, artifacts=artifacts)
    records = json.loads(path.read_text())
    assert [r["contingency_id"] for r in records] == ["f5-t5-7", "f7-t5-7", "f6-t6-9"]
    third = records[2]
    assert third["order"] == [0, 2, 4, 6, 1, 3, 5]
    assert np.array(third["spearman"]).shape == (7, 7)


def test_export_refresh_series(case9, artifacts, offline_settings, tmp_path):
    schedule = RefreshSchedule(period=300.0, times=[0.0, 300.0], load_scale=[1.0, 1.0])
    base = OperatingPoint(np.array([100.0, 100.0]), np.ones(3))
    reports = refresh_series(case9, base, artifacts, schedule, offline_settings, evaluator_factory=_planar_factory)
    (path,) = export_plot_data("refresh_series", tmp_path / "plots", reports=reports)
    with path.open() as handle:
        rows = list(csv.reader(handle))
    assert rows[0][:5] == ["simulated_time", "load_level", "decision", "threshold", "verdict"]
    assert len(rows) == 3


def test_bundled_load_profile(tmp_path):
    schedule = load_schedule(Path(str(resources.files("tsb_monitor.data").joinpath("load_profile.json"))))
    assert schedule.period == 300.0
    assert schedule.load_at(0.0) == pytest.approx(0.8)
    assert schedule.load_at(150.0) == pytest.approx(0.825)
    with pytest.raises(UsageError):
        load_schedule(tmp_path / "profile.json")
