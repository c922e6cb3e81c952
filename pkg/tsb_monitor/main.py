"""Command-line entry point: one subcommand per pipeline stage."""

import argparse
import json
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from tsb_monitor import __version__
from tsb_monitor.core.config import Settings, load_settings
from tsb_monitor.core.exceptions import EXIT_NUMERICAL, EXIT_OK, TsbError, UsageError
from tsb_monitor.core.logger import get_logger, setup_logging
from tsb_monitor.models.domain import Contingency, GridCase, GridSpec, OperatingPoint
from tsb_monitor.schemas.schemas import (
    AssessmentReport,
    GapResampleRecord,
    GaussianRecord,
    OperatingPointRecord,
    PartitionRecord,
)
from tsb_monitor.services.boundary_model import (
    calibrate_margin,
    evaluate_accuracy,
    load_model,
    save_model,
    train,
)
from tsb_monitor.services.boundary_sampler import (
    check_termination,
    default_gamma_cri,
    generate_dataset,
    lhs_baseline,
    load_sample_set,
    random_baseline,
    resample_gaps,
    save_sample_set,
    seed_initial_ops,
)
from tsb_monitor.services.grid_model import base_operating_point, controllable_bounds, load_case
from tsb_monitor.services.monitor import (
    assess,
    brute_force_oracle,
    cluster_gaussians,
    export_plot_data,
    gaussians_from_artifacts,
    load_labeled_grid,
    load_offline,
    load_schedule,
    rankings_from_artifacts,
    refresh_series,
    run_offline,
    run_refresh,
    save_labeled_grid,
)
from tsb_monitor.services.scenario_select import (
    build_sensitivity_matrix,
    cluster_contingencies,
    cluster_ops,
    match_op,
    select_representatives,
)
from tsb_monitor.services.stability_index import OperatingPointEvaluator
from tsb_monitor.services.tds_engine import contingencies_for_case, make_contingency

logger = get_logger(__name__)

DEFAULT_FAULT_BUS = 5
DEFAULT_TRIP = "5-7"
DEFAULT_T_CLEAR = 0.2


def _parse_vector(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")], dtype=float)
    except ValueError as e:
        raise UsageError(f"Expected comma-separated numbers, got: {text}") from e


def _contingency(case: GridCase, args) -> Contingency:
    return make_contingency(case, args.fault_bus, args.trip, args.t_clear)


def _contingency_set(case: GridCase, args) -> List[Contingency]:
    if args.all_contingencies:
        return contingencies_for_case(case, args.t_clear)
    return [_contingency(case, args)]


def _op_pool(case: GridCase, args, settings: Settings) -> List[OperatingPoint]:
    """Operating points from --ops (JSON list) or an LHS draw of --n-ops points."""
    if args.ops:
        path = Path(args.ops)
        if not path.is_file():
            raise UsageError(f"Operating-point file not found: {path}")
        records = [OperatingPointRecord.model_validate(r) for r in json.loads(path.read_text())]
        return [
            OperatingPoint(
                np.array(r.gen_p, dtype=float),
                np.array(r.load_scale, dtype=float) if r.load_scale is not None else np.ones(len(case.loads)),
            )
            for r in records
        ]
    return seed_initial_ops(
        case, controllable_bounds(case), args.n_ops, settings.seed, settings.sampler.load_band
    )


def _current_op(case: GridCase, args) -> OperatingPoint:
    base = base_operating_point(case)
    if args.op is None:
        return base
    return base.with_gen_p(_parse_vector(args.op))


def _emit(payload) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# Subcommands


def cmd_oracle(args, settings: Settings) -> None:
    case = load_case(args.case)
    cont = _contingency(case, args)
    lower, upper = controllable_bounds(case)
    spec = GridSpec(
        _parse_vector(args.lower) if args.lower else lower,
        _parse_vector(args.upper) if args.upper else upper,
        args.interval,
    )
    out = _out(args)
    checkpoint = args.checkpoint or out / "oracle.sqlite"
    grid = brute_force_oracle(case, cont, spec, settings, checkpoint=checkpoint)
    save_labeled_grid(grid, out / "oracle.json")
    _emit({"feasible": int(grid.points.shape[0]), "stable": int(grid.stable.sum()),
           "infeasible": int(grid.infeasible_points.shape[0])})


def cmd_sample(args, settings: Settings) -> None:
    case = load_case(args.case)
    cont = _contingency(case, args)
    cfg = settings.sampler.model_copy(update={"rng_seed": settings.seed})
    if args.method == "boundary":
        sample_set = generate_dataset(
            case, cont, cfg, settings.sim, limits=settings.static_limits,
            workers=settings.workers, case_ref=str(args.case),
        )
    elif args.method == "random":
        sample_set = random_baseline(case, cont, cfg, args.n, settings.sim, workers=settings.workers)
    else:
        sample_set = lhs_baseline(case, cont, cfg, args.n, settings.sim, workers=settings.workers)
    path = _out(args) / "samples.jsonl"
    save_sample_set(sample_set, path, settings.sim)
    _emit({"samples": len(sample_set), "feasible": len(sample_set.feasible()),
           "critical": len(sample_set.critical()), "path": str(path)})


def cmd_train(args, settings: Settings) -> None:
    sample_set = load_sample_set(args.samples or Path(args.out) / "samples.jsonl")
    model = train(sample_set)
    margin = settings.thresholds.margin
    if margin is None:
        margin = calibrate_margin(model, sample_set.samples, settings.sampler.phi_cri)
    model = replace(model, margin=margin)
    path = _out(args) / "model.json"
    save_model(model, path)
    payload = {"training_accuracy": model.training_accuracy, "supports": int(model.support_points.shape[0]),
               "margin": margin, "path": str(path)}
    if args.grid:
        payload["accuracy"] = evaluate_accuracy(model, load_labeled_grid(args.grid), settings.sampler.phi_cri)
    _emit(payload)


def cmd_resample(args, settings: Settings) -> None:
    case = load_case(args.case)
    sample_set = load_sample_set(args.samples or Path(args.out) / "samples.jsonl")
    model = load_model(args.model or Path(args.out) / "model.json")
    points, gammas = resample_gaps(
        sample_set, model, args.n_new, settings.seed, controllable_bounds(case), settings.sampler.resample_chords
    )
    gamma_cri = settings.sampler.gamma_cri or default_gamma_cri(controllable_bounds(case)[1])
    record = GapResampleRecord(
        ops=[p.tolist() for p in points],
        gammas=gammas.tolist(),
        gamma_cri=gamma_cri,
        terminate=check_termination(gammas, gamma_cri),
    )
    (_out(args) / "resample.json").write_text(record.model_dump_json(indent=2))
    _emit(record.model_dump())


def _ops_partition(case, args, settings, cont):
    ops = _op_pool(case, args, settings)
    psi = build_sensitivity_matrix(case, ops, cont, settings.sim, settings.static_limits, settings.workers)
    partition = cluster_ops(psi, args.k, settings.seed, settings.thresholds.max_clusters)
    return ops, psi, partition


def cmd_cluster_ops(args, settings: Settings) -> None:
    case = load_case(args.case)
    cont = _contingency(case, args)
    _, psi, partition = _ops_partition(case, args, settings, cont)
    record = PartitionRecord(
        element_ids=list(psi.op_refs),
        assignments=partition.assignments.tolist(),
        k=partition.k,
        eigenvalues=partition.eigenvalues.tolist() if partition.eigenvalues is not None else [],
        representatives=select_representatives(partition, psi.phi, psi.lambdas),
    )
    (_out(args) / "ops_partition.json").write_text(record.model_dump_json(indent=2))
    _emit({"k": record.k, "representatives": record.representatives})


def cmd_cluster_contingencies(args, settings: Settings) -> None:
    case = load_case(args.case)
    contingencies = contingencies_for_case(case, args.t_clear)
    ops = _op_pool(case, args, settings)
    partitions = []
    for cont in contingencies:
        psi = build_sensitivity_matrix(case, ops, cont, settings.sim, settings.static_limits, settings.workers)
        partitions.append(cluster_ops(psi, None, settings.seed, settings.thresholds.max_clusters))
    partition = cluster_contingencies(partitions, args.k, settings.seed, settings.thresholds.max_clusters)
    record = PartitionRecord(
        element_ids=[c.id for c in contingencies],
        assignments=partition.assignments.tolist(),
        k=partition.k,
        eigenvalues=partition.eigenvalues.tolist() if partition.eigenvalues is not None else [],
    )
    (_out(args) / "contingency_partition.json").write_text(record.model_dump_json(indent=2))
    _emit({"k": record.k, "assignments": record.assignments})


def cmd_fit_gaussians(args, settings: Settings) -> None:
    case = load_case(args.case)
    cont = _contingency(case, args)
    ops, psi, partition = _ops_partition(case, args, settings, cont)
    excluded = set(psi.excluded)
    points = np.array([op.gen_p for i, op in enumerate(ops) if i not in excluded])
    records = [
        GaussianRecord(cluster_id=g.cluster_id, mu=g.mu.tolist(), sigma=g.sigma.tolist(), log_norm=g.log_norm)
        for g in cluster_gaussians(partition, points)
    ]
    (_out(args) / "gaussians.json").write_text(json.dumps([r.model_dump() for r in records], indent=2))
    _emit({"clusters": len(records)})


def cmd_match(args, settings: Settings) -> None:
    case = load_case(args.case)
    artifacts = load_offline(args.artifacts or args.out)
    u = _current_op(case, args).gen_p
    result = {}
    for record in artifacts.contingencies:
        cluster_id, mcgs = match_op(u, gaussians_from_artifacts(record), rankings_from_artifacts(record))
        result[record.contingency_id] = {"cluster": cluster_id, "mcgs": list(mcgs)}
    _emit(result)


def cmd_offline(args, settings: Settings) -> None:
    case = load_case(args.case)
    ops = _op_pool(case, args, settings)
    artifacts = run_offline(case, ops, _contingency_set(case, args), settings, out_dir=_out(args),
                            case_ref=str(args.case))
    _emit({"contingency_assignments": artifacts.contingency_assignments,
           "representative_contingencies": artifacts.representative_contingencies})


def _default_profile() -> Path:
    return Path(str(resources.files("tsb_monitor.data").joinpath("load_profile.json")))


def cmd_refresh(args, settings: Settings) -> None:
    case = load_case(args.case)
    artifacts = load_offline(args.artifacts or args.out)
    out = _out(args)
    current = _current_op(case, args)
    if args.single:
        models, report = run_refresh(case, current, artifacts, settings)
        for model in models:
            save_model(model, out / f"model_{model.contingency_id}.json")
        reports = [report]
    else:
        schedule = load_schedule(args.profile or _default_profile())
        reports = refresh_series(case, current, artifacts, schedule, settings)
        export_plot_data("refresh_series", out, reports=reports)
    (out / "reports.jsonl").write_text("\n".join(r.model_dump_json() for r in reports) + "\n")
    _emit([{"verdict": r.verdict.value, "decision": r.current_op_decision_value,
            "load_level": r.load_level} for r in reports])


def cmd_assess(args, settings: Settings) -> None:
    case = load_case(args.case)
    paths = args.models or sorted(str(p) for p in Path(args.out).glob("model*.json"))
    if not paths:
        raise UsageError("No boundary models found")
    report = assess(_current_op(case, args), [load_model(p) for p in paths], settings.thresholds.margin)
    print(report.model_dump_json(indent=2))


def cmd_export(args, settings: Settings) -> None:
    case = load_case(args.case)
    out = _out(args)
    kwargs = {}
    if args.kind == "search_paths":
        kwargs["sample_set"] = load_sample_set(args.samples or out / "samples.jsonl")
    elif args.kind in ("boundary_curve", "gradient_field"):
        lower, upper = controllable_bounds(case)
        kwargs["grid_spec"] = GridSpec(lower, upper, args.interval)
        if args.kind == "boundary_curve":
            kwargs["model"] = load_model(args.model or out / "model.json")
        else:
            cont = _contingency(case, args)
            kwargs["evaluator"] = OperatingPointEvaluator(case, cont, settings.sim, settings.static_limits)
            kwargs["load_scale"] = np.ones(len(case.loads))
            kwargs["workers"] = settings.workers
    elif args.kind == "cluster_heatmap":
        kwargs["artifacts"] = load_offline(args.artifacts or out)
    elif args.kind == "refresh_series":
        path = Path(args.reports or out / "reports.jsonl")
        if not path.is_file():
            raise UsageError(f"Reports not found: {path}")
        kwargs["reports"] = [
            AssessmentReport.model_validate_json(line) for line in path.read_text().splitlines() if line.strip()
        ]
    paths = export_plot_data(args.kind, out, **kwargs)
    _emit([str(p) for p in paths])


COMMANDS = {
    "oracle": cmd_oracle,
    "sample": cmd_sample,
    "train": cmd_train,
    "resample": cmd_resample,
    "cluster-ops": cmd_cluster_ops,
    "cluster-contingencies": cmd_cluster_contingencies,
    "fit-gaussians": cmd_fit_gaussians,
    "match": cmd_match,
    "offline": cmd_offline,
    "refresh": cmd_refresh,
    "assess": cmd_assess,
    "export": cmd_export,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsb-monitor", description="Transient stability boundary monitoring")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--case", default="case9", help="Case file or bundled case name")
    parser.add_argument("--seed", type=int, default=None, help="Global random seed")
    parser.add_argument("--out", default="out", help="Artifact directory")
    parser.add_argument("--workers", type=int, default=None, help="Worker processes")
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--log-level", default=None)

    contingency = argparse.ArgumentParser(add_help=False)
    contingency.add_argument("--fault-bus", type=int, default=DEFAULT_FAULT_BUS)
    contingency.add_argument("--trip", default=DEFAULT_TRIP, help="Tripped branch id")
    contingency.add_argument("--t-clear", type=float, default=DEFAULT_T_CLEAR)

    pool = argparse.ArgumentParser(add_help=False)
    pool.add_argument("--ops", default=None, help="JSON list of operating points")
    pool.add_argument("--n-ops", type=int, default=50, help="LHS pool size when --ops is absent")
    pool.add_argument("--k", type=int, default=None, help="Cluster count; default eigengap")

    current = argparse.ArgumentParser(add_help=False)
    current.add_argument("--op", default=None, help="Controllable gen_p, comma-separated (MW)")
    current.add_argument("--artifacts", default=None, help="Offline artifact directory")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("oracle", parents=[contingency], help="Brute-force labeled lattice")
    p.add_argument("--interval", type=float, default=5.0)
    p.add_argument("--lower", default=None)
    p.add_argument("--upper", default=None)
    p.add_argument("--checkpoint", default=None, help="SQLite checkpoint file")

    p = sub.add_parser("sample", parents=[contingency], help="Generate a sample set")
    p.add_argument("--method", choices=("boundary", "random", "lhs"), default="boundary")
    p.add_argument("--n", type=int, default=300, help="Baseline sample count")

    p = sub.add_parser("train", help="Train the boundary model")
    p.add_argument("--samples", default=None)
    p.add_argument("--grid", default=None, help="Oracle grid for accuracy")

    p = sub.add_parser("resample", help="Maximin gap points on the boundary model")
    p.add_argument("--samples", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--n-new", type=int, default=8)

    sub.add_parser("cluster-ops", parents=[contingency, pool], help="Cluster operating points")
    p = sub.add_parser("cluster-contingencies", parents=[contingency, pool], help="Cluster N-1 contingencies")
    sub.add_parser("fit-gaussians", parents=[contingency, pool], help="Per-cluster Gaussians")
    sub.add_parser("match", parents=[current], help="Match an operating point to clusters")

    p = sub.add_parser("offline", parents=[contingency, pool], help="Offline stage")
    p.add_argument("--all-contingencies", action="store_true", help="Use the full N-1 list")

    p = sub.add_parser("refresh", parents=[current], help="Refresh boundaries around the current OP")
    p.add_argument("--profile", default=None, help="Load profile JSON; default bundled profile")
    p.add_argument("--single", action="store_true", help="One refresh at the given OP")

    p = sub.add_parser("assess", parents=[current], help="Assess an operating point")
    p.add_argument("--models", nargs="*", default=None)

    p = sub.add_parser("export", parents=[contingency, current], help="Write plot data")
    p.add_argument("--kind", required=True)
    p.add_argument("--samples", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--reports", default=None)
    p.add_argument("--interval", type=float, default=5.0)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    # Global exception handler
    try:
        settings = load_settings(args.config, seed=args.seed, workers=args.workers)
        setup_logging(args.log_level or settings.log_level, settings.log_json)
        logger.info("Running command", command=args.command, case=str(args.case), seed=settings.seed)
        COMMANDS[args.command](args, settings)
    except TsbError as e:
        logger.error(
            "Command failed",
            command=args.command,
            error=e.message,
            error_type=type(e).__name__,
            details=e.details,
            exit_code=e.exit_code,
        )
        return e.exit_code
    except Exception as e:
        logger.error("Unhandled exception", command=args.command, error=str(e), exc_info=True)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
