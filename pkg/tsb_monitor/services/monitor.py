# Offline processing, periodic refresh, online assessment, oracle and plot-data export

import csv
import json
import os
import time
from dataclasses import replace
from datetime import datetime, timezone
from functools import partial
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from tsb_monitor.core.config import Settings
from tsb_monitor.core.exceptions import ContractError, FitError, NoBoundaryError, UsageError
from tsb_monitor.core.logger import get_logger
from tsb_monitor.db.base import get_session, init_db, sqlite_url
from tsb_monitor.models.domain import (
    BoundaryModel,
    ClusterGaussian,
    Contingency,
    GridCase,
    GridSpec,
    LabeledGrid,
    McgRanking,
    OperatingPoint,
    Partition,
    Sample,
    SampleSet,
    SensitivityMatrix,
)
from tsb_monitor.models.models import PROVENANCE_ORDER, Label, OraclePointRecord, PlotKind, Provenance, Verdict
from tsb_monitor.schemas.schemas import (
    AssessmentReport,
    ClusterHeatmapRecord,
    ContingencyArtifacts,
    GaussianRecord,
    GridSpecRecord,
    LabeledGridRecord,
    McgRecord,
    OfflineArtifacts,
    RefreshSchedule,
)
from tsb_monitor.services.boundary_model import calibrate_margin, constant_model, decision, train
from tsb_monitor.services.boundary_sampler import generate_dataset
from tsb_monitor.services.grid_model import controllable_bounds
from tsb_monitor.services.scenario_select import (
    build_sensitivity_matrix,
    cluster_contingencies,
    cluster_ops,
    fit_cluster_gaussian,
    gaussian_from_moments,
    match_op,
    rank_mcg,
    select_representatives,
    spearman_matrix,
)
from tsb_monitor.services.stability_index import OperatingPointEvaluator
from tsb_monitor.utils.hashing import hash_document, write_manifest
from tsb_monitor.utils.parallel import ordered_map

logger = get_logger(__name__)

OFFLINE_ARTIFACT = "offline.json"

SensitivityFn = Callable[[GridCase, Sequence[OperatingPoint], Contingency], SensitivityMatrix]
EvaluatorFactory = Callable[[Contingency], Callable[[OperatingPoint, Provenance, bool], Sample]]


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# Offline stage


def _restrict(psi: SensitivityMatrix, n_ops: int, keep: Sequence[int]) -> SensitivityMatrix:
    """Rows of psi for the operating points in keep (positions in the original pool)."""
    dropped, kept = set(psi.excluded), set(keep)
    retained = [i for i in range(n_ops) if i not in dropped]
    position = {op_index: row for row, op_index in enumerate(retained)}
    rows = [position[i] for i in keep]
    return SensitivityMatrix(
        contingency_id=psi.contingency_id,
        rows=psi.rows[rows],
        op_refs=tuple(psi.op_refs[r] for r in rows),
        phi=psi.phi[rows],
        lambdas=psi.lambdas[rows],
        excluded=tuple(i for i in range(n_ops) if i not in kept),
    )


def cluster_gaussians(partition: Partition, points: np.ndarray) -> List[ClusterGaussian]:
    """One Gaussian per cluster; singleton clusters borrow the pooled covariance."""
    centered = points - points.mean(axis=0)
    pooled = centered.T @ centered / points.shape[0]
    gaussians = []
    for cluster_id in range(partition.k):
        members = points[partition.members(cluster_id)]
        if members.shape[0] >= 2:
            gaussians.append(fit_cluster_gaussian(members, cluster_id))
        else:
            gaussians.append(gaussian_from_moments(members[0], pooled, cluster_id))
    return gaussians


def _contingency_severity(psi: SensitivityMatrix) -> Tuple[float, int]:
    """Unstable fraction for contingencies with unstable OPs, else the smallest stable phi."""
    unstable = psi.lambdas < 0
    if unstable.any():
        return float(unstable.mean()), -1
    return float(psi.phi.min()), 1


def run_offline(
    case: GridCase,
    ops: Sequence[OperatingPoint],
    contingencies: Sequence[Contingency],
    settings: Settings,
    out_dir: Optional[Union[str, Path]] = None,
    sensitivity_fn: Optional[SensitivityFn] = None,
    case_ref: Optional[str] = None,
) -> OfflineArtifacts:
    """
    Offline stage: sensitivity matrices, OP and contingency clusters, representatives,
    per-cluster Gaussians and MCG rankings.

    Args:
        case: Grid case
        ops: Operating-point pool
        contingencies: Contingency set
        settings: Application settings (sim, static limits, thresholds, seed, workers)
        out_dir: Directory for offline.json and the manifest; None keeps results in memory
        sensitivity_fn: Replacement for build_sensitivity_matrix
        case_ref: Case identifier recorded in the artifacts

    Returns:
        OfflineArtifacts
    """
    if not ops or not contingencies:
        raise UsageError("Operating-point pool and contingency set must be nonempty")
    if len(ops) < 2:
        raise FitError("Offline stage needs at least two operating points", details={"ops": len(ops)})
    if sensitivity_fn is None:
        sensitivity_fn = partial(
            _default_sensitivity, sim=settings.sim, limits=settings.static_limits, workers=settings.workers
        )
    thresholds = settings.thresholds

    matrices = [sensitivity_fn(case, ops, cont) for cont in contingencies]
    excluded = {i for psi in matrices for i in psi.excluded}
    keep = [i for i in range(len(ops)) if i not in excluded]
    if len(keep) < 2:
        raise FitError("Fewer than two operating points are feasible under every contingency")
    if excluded:
        logger.warning("Operating points dropped from the offline pool", excluded=len(excluded))
    matrices = [_restrict(psi, len(ops), keep) for psi in matrices]
    points = np.array([ops[i].gen_p for i in keep], dtype=float)

    partitions, records = [], []
    for cont, psi in zip(contingencies, matrices):
        partition = cluster_ops(psi, seed=settings.seed, max_clusters=thresholds.max_clusters)
        representatives = select_representatives(partition, psi.phi, psi.lambdas)
        gaussians = cluster_gaussians(partition, points)
        rankings = [
            rank_mcg(psi.rows[partition.members(c)], c, thresholds.top_k_mcg) for c in range(partition.k)
        ]
        partitions.append(partition)
        records.append(
            ContingencyArtifacts(
                contingency_id=cont.id,
                fault_bus=cont.fault_bus,
                tripped_branch=cont.tripped_branch,
                t_clear=cont.t_clear,
                assignments=partition.assignments.tolist(),
                eigenvalues=[] if partition.eigenvalues is None else partition.eigenvalues.tolist(),
                representatives=[keep[r] for r in representatives],
                gaussians=[
                    GaussianRecord(
                        cluster_id=g.cluster_id, mu=g.mu.tolist(), sigma=g.sigma.tolist(), log_norm=g.log_norm
                    )
                    for g in gaussians
                ],
                mcg=[
                    McgRecord(cluster_id=r.cluster_id, ranked_generators=list(r.ranked_generators), top_k=r.top_k)
                    for r in rankings
                ],
                psi=psi.rows.tolist(),
                phi=psi.phi.tolist(),
                lambdas=psi.lambdas.tolist(),
            )
        )
        logger.info("Operating points clustered", contingency=cont.id, clusters=partition.k)

    cont_partition = cluster_contingencies(partitions, seed=settings.seed, max_clusters=thresholds.max_clusters)
    severity = [_contingency_severity(psi) for psi in matrices]
    cont_reps = select_representatives(
        cont_partition, [s for s, _ in severity], [lam for _, lam in severity]
    )
    artifacts = OfflineArtifacts(
        case_ref=case_ref or case.name,
        seed=settings.seed,
        ops=[op.gen_p.tolist() for op in ops],
        load_scales=[op.load_scale.tolist() for op in ops],
        excluded_ops=sorted(excluded),
        contingencies=records,
        contingency_assignments=cont_partition.assignments.tolist(),
        representative_contingencies=[contingencies[i].id for i in cont_reps],
    )
    logger.info(
        "Offline stage complete",
        contingencies=len(contingencies),
        contingency_clusters=cont_partition.k,
        representatives=artifacts.representative_contingencies,
    )
    if out_dir is not None:
        save_offline(artifacts, out_dir)
    return artifacts


def _default_sensitivity(case, ops, cont, sim, limits, workers) -> SensitivityMatrix:
    return build_sensitivity_matrix(case, ops, cont, sim, limits, workers)


def save_offline(artifacts: OfflineArtifacts, out_dir: Union[str, Path]) -> Path:
    """Write offline.json atomically plus the manifest; nothing is left behind on failure."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / OFFLINE_ARTIFACT
    try:
        _atomic_write(path, artifacts.model_dump_json(indent=2))
        write_manifest(out_dir, [OFFLINE_ARTIFACT])
    except Exception as e:
        logger.error("Failed to write offline artifacts", error=str(e))
        for leftover in (path, path.with_name(path.name + ".tmp")):
            leftover.unlink(missing_ok=True)
        raise
    return path


def load_offline(path: Union[str, Path]) -> OfflineArtifacts:
    path = Path(path)
    if path.is_dir():
        path = path / OFFLINE_ARTIFACT
    if not path.is_file():
        raise UsageError(f"Offline artifacts not found: {path}")
    return OfflineArtifacts.model_validate_json(path.read_text())


def contingency_from_artifacts(record: ContingencyArtifacts) -> Contingency:
    return Contingency(record.contingency_id, record.fault_bus, record.tripped_branch, record.t_clear)


def gaussians_from_artifacts(record: ContingencyArtifacts) -> List[ClusterGaussian]:
    return [
        ClusterGaussian(np.array(g.mu), np.array(g.sigma), g.log_norm, g.cluster_id) for g in record.gaussians
    ]


def rankings_from_artifacts(record: ContingencyArtifacts) -> List[McgRanking]:
    return [McgRanking(r.cluster_id, tuple(r.ranked_generators), r.top_k) for r in record.mcg]


# Online stage


def verdict_for(value: float, threshold: float) -> Verdict:
    if value > threshold:
        return Verdict.SECURE
    if abs(value) <= threshold:
        return Verdict.MARGINAL
    return Verdict.INSECURE


def assess(
    current_op: Union[OperatingPoint, np.ndarray],
    models: Sequence[BoundaryModel],
    margin: Optional[float] = None,
) -> AssessmentReport:
    """
    Verdict from the worst-case decision value over the boundary models.

    Args:
        current_op: Operating point or its controllable gen_p vector
        models: One boundary model per critical contingency
        margin: Threshold override; defaults to the worst model's calibrated margin

    Returns:
        AssessmentReport
    """
    if not models:
        raise ContractError("Assessment needs at least one boundary model")
    started = time.perf_counter()
    u = current_op.gen_p if isinstance(current_op, OperatingPoint) else np.asarray(current_op, dtype=float)
    values = [decision(model, u) for model in models]
    worst = int(np.argmin(values))
    threshold = margin if margin is not None else (models[worst].margin or 0.0)
    return AssessmentReport(
        timestamp=datetime.now(timezone.utc),
        boundary_model_ref=[m.contingency_id for m in models],
        current_op=u.tolist(),
        current_op_decision_value=values[worst],
        margin_threshold=threshold,
        verdict=verdict_for(values[worst], threshold),
        wall_time=time.perf_counter() - started,
    )


def _search_box(
    case: GridCase,
    current: OperatingPoint,
    mcgs: Sequence[int],
    half_widths: Sequence[float],
) -> Tuple[Tuple[np.ndarray, np.ndarray], np.ndarray]:
    if len(half_widths) != len(mcgs):
        raise UsageError(
            "Search box needs one half-width per most critical generator",
            details={"half_widths": len(half_widths), "mcgs": len(mcgs)},
        )
    lower, upper = controllable_bounds(case)
    free = np.zeros(current.dim, dtype=bool)
    free[list(mcgs)] = True
    width = np.zeros(current.dim)
    for gen, half in zip(mcgs, half_widths):
        width[gen] = half
    lo = np.where(free, np.maximum(lower, current.gen_p - width), current.gen_p)
    hi = np.where(free, np.minimum(upper, current.gen_p + width), current.gen_p)
    return (lo, hi), free


def run_refresh(
    case: GridCase,
    current_op: OperatingPoint,
    artifacts: OfflineArtifacts,
    settings: Settings,
    search_box: Optional[Sequence[float]] = None,
    evaluator_factory: Optional[EvaluatorFactory] = None,
) -> Tuple[List[BoundaryModel], AssessmentReport]:
    """
    Refresh the boundary around the current operating point and assess it.

    For each representative contingency the current OP is matched to a cluster, the
    search box spans the cluster's MCGs around the current OP (other controllables
    frozen), and a boundary is sampled and trained in that box.

    Args:
        case: Grid case
        current_op: Current scheduling operating point
        artifacts: Offline artifacts
        settings: Application settings
        search_box: Per-MCG half-widths (MW); default thresholds.search_half_width_mw
        evaluator_factory: Replacement evaluator per contingency

    Returns:
        Tuple of (boundary model per representative contingency, assessment report)
    """
    if not artifacts.representative_contingencies:
        raise UsageError("Offline artifacts hold no representative contingency")
    started = time.perf_counter()
    thresholds = settings.thresholds
    by_id = {record.contingency_id: record for record in artifacts.contingencies}
    level = float(np.mean(current_op.load_scale)) if current_op.load_scale.size else 1.0
    band = (level * (1.0 - thresholds.forecast_band), level * (1.0 + thresholds.forecast_band))
    sampler_cfg = settings.sampler.model_copy(update={"rng_seed": settings.seed})

    models, matched, mcg_map = [], {}, {}
    samples_used, unstable, feasible = 0, 0, 0
    for cont_id in artifacts.representative_contingencies:
        record = by_id[cont_id]
        cont = contingency_from_artifacts(record)
        cluster_id, mcgs = match_op(
            current_op.gen_p, gaussians_from_artifacts(record), rankings_from_artifacts(record)
        )
        matched[cont_id], mcg_map[cont_id] = cluster_id, list(mcgs)
        half = list(search_box) if search_box is not None else [thresholds.search_half_width_mw] * len(mcgs)
        bounds, free = _search_box(case, current_op, mcgs, half)
        evaluator = (
            evaluator_factory(cont)
            if evaluator_factory is not None
            else OperatingPointEvaluator(case, cont, settings.sim, settings.static_limits)
        )
        sample_set = generate_dataset(
            case,
            cont,
            sampler_cfg,
            settings.sim,
            evaluator=evaluator,
            bounds=bounds,
            free_mask=free,
            base_op=current_op,
            load_band=band,
            limits=settings.static_limits,
            workers=settings.workers,
            case_ref=artifacts.case_ref,
        )
        model = _train_or_constant(sample_set, cont_id, current_op.dim)
        margin = (
            thresholds.margin
            if thresholds.margin is not None
            else calibrate_margin(model, sample_set.samples, settings.sampler.phi_cri)
        )
        models.append(replace(model, margin=margin))
        usable = sample_set.feasible()
        samples_used += len(usable)
        feasible += len(usable)
        unstable += sum(1 for s in usable if s.label == Label.UNSTABLE)

    report = assess(current_op, models)
    report = report.model_copy(
        update={
            "load_level": level,
            "matched_cluster": matched,
            "mcgs": mcg_map,
            "samples_used": samples_used,
            "unstable_fraction": unstable / feasible if feasible else None,
            "wall_time": time.perf_counter() - started,
        }
    )
    logger.info(
        "Refresh complete",
        verdict=report.verdict.value,
        decision_value=report.current_op_decision_value,
        samples=samples_used,
        wall_time=report.wall_time,
    )
    return models, report


def _train_or_constant(sample_set: SampleSet, contingency_id: str, dim: int) -> BoundaryModel:
    try:
        return train(sample_set)
    except NoBoundaryError as e:
        usable = sample_set.feasible()
        all_stable = bool(usable) and all(s.label == Label.STABLE for s in usable)
        logger.warning("Search box holds a single class", contingency=contingency_id, reason=e.message)
        return constant_model(contingency_id, all_stable, dim)


def refresh_series(
    case: GridCase,
    base_op: OperatingPoint,
    artifacts: OfflineArtifacts,
    schedule: RefreshSchedule,
    settings: Settings,
    evaluator_factory: Optional[EvaluatorFactory] = None,
) -> List[AssessmentReport]:
    """
    Walk the load profile one refresh period at a time.

    The current OP at each refresh is base_op with every load scaled to the profile level.
    """
    reports = []
    t = schedule.times[0]
    while t <= schedule.times[-1] + 1e-9:
        level = schedule.load_at(t)
        current = OperatingPoint(base_op.gen_p.copy(), np.full(base_op.load_scale.shape, level))
        _, report = run_refresh(case, current, artifacts, settings, schedule.search_box, evaluator_factory)
        reports.append(report.model_copy(update={"simulated_time": t, "load_level": level}))
        t += schedule.period
    return reports


def load_schedule(path: Union[str, Path]) -> RefreshSchedule:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"Load profile not found: {path}")
    return RefreshSchedule.model_validate_json(path.read_text())


# Brute-force oracle


def _oracle_point(evaluator, load_scale: np.ndarray, point: np.ndarray) -> Tuple[bool, Optional[bool], Optional[float]]:
    sample = evaluator(OperatingPoint(point, load_scale), Provenance.ORACLE, False)
    if not sample.feasible:
        return False, None, None
    return True, sample.label == Label.STABLE, sample.phi


def oracle_run_key(case: GridCase, contingency: Contingency, grid_spec: GridSpec, settings: Settings) -> str:
    return hash_document(
        {
            "case": case.name,
            "contingency": contingency.id,
            "t_clear": contingency.t_clear,
            "lower": list(map(float, grid_spec.lower)),
            "upper": list(map(float, grid_spec.upper)),
            "interval": grid_spec.interval,
            "sim": settings.sim.model_dump(),
        }
    )


def brute_force_oracle(
    case: GridCase,
    contingency: Contingency,
    grid_spec: GridSpec,
    settings: Settings,
    checkpoint: Optional[Union[str, Path]] = None,
    evaluator: Optional[Callable[[OperatingPoint, Provenance, bool], Sample]] = None,
    max_points: Optional[int] = None,
) -> LabeledGrid:
    """
    Label every lattice point of grid_spec by full simulation.

    Loads stay at their base level. With a checkpoint database, results are committed
    every settings.checkpoint_every points and a rerun resumes from the committed ones.

    Args:
        case: Grid case
        contingency: Contingency
        grid_spec: Lattice over the controllable generators
        settings: Application settings
        checkpoint: SQLite file for resumable runs
        evaluator: Replacement evaluator
        max_points: Stop after this many new evaluations (interrupted run)

    Returns:
        LabeledGrid over the evaluated points
    """
    lower, upper = controllable_bounds(case)
    if grid_spec.lower.shape != lower.shape or grid_spec.upper.shape != upper.shape:
        raise ContractError("Grid dimension does not match the controllable generators")
    if np.any(grid_spec.lower < lower - 1e-9) or np.any(grid_spec.upper > upper + 1e-9):
        raise ContractError("Grid exceeds the generator limits")
    if np.any(grid_spec.upper < grid_spec.lower):
        raise ContractError("Grid upper corner lies below the lower corner")

    evaluator = evaluator or OperatingPointEvaluator(case, contingency, settings.sim, settings.static_limits)
    points = grid_spec.lattice()
    load_scale = np.ones(len(case.loads))
    run_key = oracle_run_key(case, contingency, grid_spec, settings)
    results: Dict[int, Tuple[bool, Optional[bool], Optional[float]]] = {}

    session_gen, db = None, None
    if checkpoint is not None:
        url = sqlite_url(checkpoint)
        init_db(url)
        session_gen = get_session(url)
        db = next(session_gen)
        for row in db.query(OraclePointRecord).filter(OraclePointRecord.run_key == run_key):
            results[row.point_index] = (row.feasible, row.stable, row.phi)
        if results:
            logger.info("Resuming oracle run", run_key=run_key[:12], done=len(results), total=len(points))

    pending = [i for i in range(len(points)) if i not in results]
    if max_points is not None:
        pending = pending[:max_points]
    chunk = max(1, settings.checkpoint_every)
    evaluate = partial(_oracle_point, evaluator, load_scale)
    try:
        for start in range(0, len(pending), chunk):
            batch = pending[start : start + chunk]
            outcomes = ordered_map(evaluate, [points[i] for i in batch], settings.workers)
            for index, outcome in zip(batch, outcomes):
                results[index] = outcome
            if db is not None:
                db.add_all(
                    OraclePointRecord(
                        run_key=run_key,
                        point_index=index,
                        coords=json.dumps(points[index].tolist()),
                        feasible=outcome[0],
                        stable=outcome[1],
                        phi=outcome[2],
                    )
                    for index, outcome in zip(batch, outcomes)
                )
                db.commit()
            logger.info("Oracle progress", done=len(results), total=len(points))
    finally:
        if session_gen is not None:
            session_gen.close()

    done = sorted(results)
    feasible = [i for i in done if results[i][0]]
    infeasible = [i for i in done if not results[i][0]]
    dim = points.shape[1]
    grid = LabeledGrid(
        points=points[feasible].reshape(-1, dim),
        stable=np.array([bool(results[i][1]) for i in feasible], dtype=bool),
        phi=np.array([results[i][2] for i in feasible], dtype=float),
        grid_spec=grid_spec,
        infeasible_points=points[infeasible].reshape(-1, dim),
        contingency_id=contingency.id,
    )
    logger.info(
        "Oracle complete",
        contingency=contingency.id,
        feasible=len(feasible),
        infeasible=len(infeasible),
        stable=int(grid.stable.sum()),
    )
    return grid


def grid_to_record(grid: LabeledGrid) -> LabeledGridRecord:
    spec = grid.grid_spec
    return LabeledGridRecord(
        contingency_id=grid.contingency_id,
        grid_spec=GridSpecRecord(lower=spec.lower.tolist(), upper=spec.upper.tolist(), interval=spec.interval),
        points=grid.points.tolist(),
        stable=grid.stable.tolist(),
        phi=grid.phi.tolist(),
        infeasible_points=grid.infeasible_points.tolist(),
    )


def save_labeled_grid(grid: LabeledGrid, path: Union[str, Path]) -> None:
    _atomic_write(Path(path), grid_to_record(grid).model_dump_json())


def load_labeled_grid(path: Union[str, Path]) -> LabeledGrid:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"Labeled grid not found: {path}")
    record = LabeledGridRecord.model_validate_json(path.read_text())
    spec = GridSpec(np.array(record.grid_spec.lower), np.array(record.grid_spec.upper), record.grid_spec.interval)
    dim = spec.lower.shape[0]
    return LabeledGrid(
        points=np.array(record.points, dtype=float).reshape(-1, dim),
        stable=np.array(record.stable, dtype=bool),
        phi=np.array(record.phi, dtype=float),
        grid_spec=spec,
        infeasible_points=np.array(record.infeasible_points, dtype=float).reshape(-1, dim),
        contingency_id=record.contingency_id,
    )


# Plot-data export


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.10g}"


def _export_search_paths(sample_set: SampleSet, out_dir: Path) -> List[Path]:
    dim = sample_set.samples[0].op.dim
    ordered = sorted(
        sample_set.samples, key=lambda s: (s.seed_index, s.step_index, PROVENANCE_ORDER[s.provenance])
    )
    header = ["seed_index", "step_index", "provenance"] + [f"u_{i + 1}" for i in range(dim)]
    header += ["label", "phi", "critical"]
    rows = [
        [s.seed_index, s.step_index, s.provenance.value]
        + [_fmt(v) for v in s.u]
        + [s.label.value, _fmt(s.phi), int(s.critical)]
        for s in ordered
    ]
    return [_write_csv(out_dir / "search_paths.csv", header, rows)]


def _export_boundary_curve(model: BoundaryModel, grid_spec: GridSpec, out_dir: Path) -> List[Path]:
    points = grid_spec.lattice()
    values = model.decision_values(points)
    header = [f"u_{i + 1}" for i in range(points.shape[1])] + ["decision", "label"]
    rows = [
        [_fmt(v) for v in p] + [_fmt(d), (Label.STABLE if d > 0 else Label.UNSTABLE).value]
        for p, d in zip(points, values)
    ]
    return [_write_csv(out_dir / "boundary_curve.csv", header, rows)]


def _export_gradient_field(
    grid_spec: GridSpec,
    evaluator: Callable[[OperatingPoint, Provenance, bool], Sample],
    load_scale: np.ndarray,
    out_dir: Path,
    workers: int,
) -> List[Path]:
    points = grid_spec.lattice()
    samples = ordered_map(
        partial(_gradient_point, evaluator, load_scale), list(points), workers
    )
    dim = points.shape[1]
    header = [f"u_{i + 1}" for i in range(dim)] + ["phi"] + [f"grad_{i + 1}" for i in range(dim)] + ["label"]
    rows = [
        [_fmt(v) for v in s.u] + [_fmt(s.phi)] + [_fmt(g) for g in s.grad] + [s.label.value]
        for s in samples
        if s.feasible and s.grad is not None
    ]
    return [_write_csv(out_dir / "gradient_field.csv", header, rows)]


def _gradient_point(evaluator, load_scale: np.ndarray, point: np.ndarray) -> Sample:
    return evaluator(OperatingPoint(point, load_scale), Provenance.ORACLE, True)


def _export_cluster_heatmap(artifacts: OfflineArtifacts, out_dir: Path) -> List[Path]:
    records = []
    for record in artifacts.contingencies:
        sc = spearman_matrix(np.array(record.psi, dtype=float))
        order = np.argsort(np.array(record.assignments), kind="stable")
        records.append(
            ClusterHeatmapRecord(
                contingency_id=record.contingency_id,
                order=order.tolist(),
                assignments=record.assignments,
                spearman=sc[np.ix_(order, order)].tolist(),
            ).model_dump()
        )
    path = out_dir / "cluster_heatmap.json"
    path.write_text(json.dumps(records, indent=2, sort_keys=True))
    return [path]


def _export_refresh_series(reports: Sequence[AssessmentReport], out_dir: Path) -> List[Path]:
    header = ["simulated_time", "load_level", "decision", "threshold", "verdict", "unstable_fraction", "samples", "wall_time"]
    rows = [
        [
            _fmt(r.simulated_time),
            _fmt(r.load_level),
            _fmt(r.current_op_decision_value),
            _fmt(r.margin_threshold),
            r.verdict.value,
            _fmt(r.unstable_fraction),
            r.samples_used,
            _fmt(r.wall_time),
        ]
        for r in reports
    ]
    return [_write_csv(out_dir / "refresh_series.csv", header, rows)]


def export_plot_data(
    kind: Union[str, PlotKind],
    out_dir: Union[str, Path],
    sample_set: Optional[SampleSet] = None,
    model: Optional[BoundaryModel] = None,
    grid_spec: Optional[GridSpec] = None,
    artifacts: Optional[OfflineArtifacts] = None,
    reports: Optional[Sequence[AssessmentReport]] = None,
    evaluator: Optional[Callable[[OperatingPoint, Provenance, bool], Sample]] = None,
    load_scale: Optional[np.ndarray] = None,
    workers: int = 1,
) -> List[Path]:
    """
    Write the data behind one figure kind as CSV or JSON.

    Args:
        kind: search_paths, boundary_curve, gradient_field, cluster_heatmap or refresh_series
        out_dir: Output directory
        sample_set: Samples for search_paths
        model: Boundary model for boundary_curve
        grid_spec: Lattice for boundary_curve and gradient_field
        artifacts: Offline artifacts for cluster_heatmap
        reports: Assessment reports for refresh_series
        evaluator: Gradient evaluator for gradient_field
        load_scale: Load multipliers for gradient_field
        workers: Worker processes for gradient_field

    Returns:
        Paths written
    """
    try:
        kind = PlotKind(kind)
    except ValueError as e:
        raise UsageError(f"Unknown plot kind: {kind}", details={"kinds": [k.value for k in PlotKind]}) from e
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if kind == PlotKind.SEARCH_PATHS:
        if sample_set is None or not sample_set.samples:
            raise UsageError("search_paths needs a nonempty sample set")
        paths = _export_search_paths(sample_set, out_dir)
    elif kind == PlotKind.BOUNDARY_CURVE:
        if model is None or grid_spec is None:
            raise UsageError("boundary_curve needs a boundary model and a grid")
        paths = _export_boundary_curve(model, grid_spec, out_dir)
    elif kind == PlotKind.GRADIENT_FIELD:
        if evaluator is None or grid_spec is None or load_scale is None:
            raise UsageError("gradient_field needs an evaluator, a grid and load multipliers")
        paths = _export_gradient_field(grid_spec, evaluator, load_scale, out_dir, workers)
    elif kind == PlotKind.CLUSTER_HEATMAP:
        if artifacts is None or not artifacts.contingencies:
            raise UsageError("cluster_heatmap needs offline artifacts")
        paths = _export_cluster_heatmap(artifacts, out_dir)
    else:
        if not reports:
            raise UsageError("refresh_series needs assessment reports")
        paths = _export_refresh_series(reports, out_dir)
    logger.info("Plot data exported", kind=kind.value, files=[p.name for p in paths])
    return paths
