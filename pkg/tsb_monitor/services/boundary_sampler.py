# Boundary-focused sampling: gradient descent routes, bisection, traversal, gap filling

from dataclasses import replace
from functools import partial
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import qmc

from tsb_monitor.core.exceptions import (
    BisectionError,
    ConfigError,
    ContractError,
    NoBoundaryError,
    SeedingError,
    StationaryPointError,
)
from tsb_monitor.core.logger import get_logger
from tsb_monitor.models.domain import BoundaryModel, Contingency, GridCase, OperatingPoint, Sample, SampleSet
from tsb_monitor.models.models import PROVENANCE_ORDER, Label, Provenance
from tsb_monitor.schemas.schemas import (
    SampleRecord,
    SampleSetSidecar,
    SamplerConfig,
    SimConfig,
    StaticLimitsConfig,
)
from tsb_monitor.services.boundary_model import project_to_boundary, train
from tsb_monitor.services.grid_model import controllable_bounds
from tsb_monitor.services.stability_index import OperatingPointEvaluator
from tsb_monitor.utils.hashing import hash_array
from tsb_monitor.utils.parallel import ordered_map

logger = get_logger(__name__)

Evaluator = Callable[[OperatingPoint, Provenance, bool], Sample]
Bounds = Tuple[np.ndarray, np.ndarray]

REFLECT_TRIES = 3
PROBE_TRIES = 3


def default_gamma_cri(u_max: np.ndarray) -> float:
    """(1% of the largest controllable limit)^2, in MW^2."""
    return float((0.01 * np.max(u_max)) ** 2)


def seed_initial_ops(
    case: GridCase,
    bounds: Bounds,
    n: int,
    rng_seed: int,
    load_band: Tuple[float, float] = (0.9, 1.1),
) -> List[OperatingPoint]:
    """
    Latin Hypercube design over the controllable box, loads uniform in the band.

    Args:
        case: Grid case (number of loads)
        bounds: (lower, upper) gen_p box in MW
        n: Number of points
        rng_seed: Seed of both the design and the load draw
        load_band: Range of every load multiplier

    Returns:
        n operating points
    """
    lower, upper = (np.asarray(b, dtype=float) for b in bounds)
    if n < 1:
        raise ConfigError("Number of seeds must be at least 1")
    if lower.shape != upper.shape or np.any(upper < lower):
        raise ConfigError("Seeding box is empty", details={"lower": lower.tolist(), "upper": upper.tolist()})
    sampler = qmc.LatinHypercube(d=lower.shape[0], scramble=False, seed=rng_seed)
    unit = sampler.random(n)
    gen_p = lower + unit * (upper - lower)
    rng = np.random.default_rng(rng_seed)
    loads = rng.uniform(load_band[0], load_band[1], size=(n, len(case.loads)))
    return [OperatingPoint(gen_p[i], loads[i]) for i in range(n)]


def _masked(vector: np.ndarray, free_mask: Optional[np.ndarray]) -> np.ndarray:
    return vector if free_mask is None else np.where(free_mask, vector, 0.0)


def step_toward_boundary(
    sample: Sample,
    cfg: SamplerConfig,
    u_max: np.ndarray,
    phi_ref: Optional[float] = None,
    bounds: Optional[Bounds] = None,
    free_mask: Optional[np.ndarray] = None,
    scale: float = 1.0,
) -> OperatingPoint:
    """
    Normalized gradient step: u - nu * u_max * g / |g|_inf, clipped to the box.

    nu = clamp(nu_max * tanh(|phi| / phi_ref), nu_min, nu_max) shrinks near the boundary.

    Args:
        sample: Feasible sample carrying a gradient
        cfg: Sampler configuration
        u_max: Per-coordinate step scale (largest controllable outputs)
        phi_ref: Index scale; defaults to cfg.phi_ref
        bounds: Clipping box; defaults to [0, u_max]
        free_mask: Coordinates allowed to move
        scale: Extra step multiplier (halved on infeasible reflections)

    Returns:
        Next operating point (same load multipliers)
    """
    if not sample.feasible or sample.grad is None:
        raise ContractError("Step requires a feasible sample with a gradient")
    phi_ref = phi_ref or cfg.phi_ref or 1.0
    grad = _masked(np.asarray(sample.grad, dtype=float), free_mask)
    g_inf = float(np.max(np.abs(grad))) if grad.size else 0.0
    if g_inf == 0.0 or not np.isfinite(g_inf):
        raise StationaryPointError("Index gradient vanishes", details={"op": sample.u.tolist()})
    nu = float(np.clip(cfg.nu_max * np.tanh(abs(sample.phi or 0.0) / phi_ref), cfg.nu_min, cfg.nu_max))
    lower, upper = bounds if bounds is not None else (np.zeros_like(u_max), u_max)
    u_next = sample.u - scale * nu * np.asarray(u_max) * grad / g_inf
    return sample.op.with_gen_p(np.clip(u_next, lower, upper))


def bisect_crossing(
    a: Sample,
    b: Sample,
    evaluator: Evaluator,
    phi_cri: float,
    width: float = 0.1,
    trail: Optional[List[Sample]] = None,
) -> Sample:
    """
    Bisect between two feasible samples of opposite label until criticality.

    Stops when the midpoint has |phi| < phi_cri or the interval is narrower than
    width (MW) in every coordinate. Load multipliers are taken from a.

    Args:
        a: One endpoint
        b: Opposite-label endpoint of the same contingency
        evaluator: (op, provenance, with_gradient) -> Sample
        phi_cri: Criticality threshold
        width: Per-coordinate interval floor in MW
        trail: Receives every evaluated midpoint, in order

    Returns:
        Last midpoint, flagged critical, provenance route2_bisect
    """
    if not a.feasible or not b.feasible:
        raise BisectionError("Bisection endpoint is infeasible")
    if a.label == b.label:
        raise ContractError("Bisection endpoints share the same label")
    if a.contingency_id != b.contingency_id:
        raise ContractError("Bisection endpoints belong to different contingencies")

    lo, hi = a, b
    while True:
        mid_u = 0.5 * (lo.u + hi.u)
        mid = evaluator(a.op.with_gen_p(mid_u), Provenance.ROUTE2_BISECT, True)
        if trail is not None:
            trail.append(mid)
        if not mid.feasible:
            raise BisectionError("Bisection midpoint is infeasible", details={"op": mid_u.tolist()})
        if mid.phi is not None and abs(mid.phi) < phi_cri:
            return replace(mid, critical=True)
        if mid.label == lo.label:
            lo = mid
        else:
            hi = mid
        if np.max(np.abs(lo.u - hi.u)) < width:
            return replace(mid, critical=True)


def tangent_direction(
    grad: np.ndarray,
    rng: np.random.Generator,
    previous: Optional[np.ndarray] = None,
    free_mask: Optional[np.ndarray] = None,
) -> Optional[np.ndarray]:
    """
    Unit vector orthogonal to the gradient within the free coordinates.

    Dimension 2 has a unique perpendicular; higher dimensions draw one random
    direction and complete it by Gram-Schmidt. The sign follows previous when given.
    """
    g = _masked(np.asarray(grad, dtype=float), free_mask)
    free = np.ones_like(g, dtype=bool) if free_mask is None else np.asarray(free_mask, dtype=bool)
    norm = np.linalg.norm(g)
    if free.sum() < 2 or norm == 0.0:
        return None
    g_hat = g / norm
    idx = np.flatnonzero(free)
    t = np.zeros_like(g)
    if idx.size == 2:
        t[idx[0]], t[idx[1]] = -g_hat[idx[1]], g_hat[idx[0]]
    else:
        for _ in range(10):
            r = np.zeros_like(g)
            r[idx] = rng.standard_normal(idx.size)
            r -= (r @ g_hat) * g_hat
            if np.linalg.norm(r) > 1e-8:
                t = r
                break
        else:
            return None
    t /= np.linalg.norm(t)
    if previous is not None and t @ previous < 0:
        t = -t
    return t


def tangent_step(
    sample: Sample,
    direction: np.ndarray,
    cfg: SamplerConfig,
    u_max: np.ndarray,
    bounds: Bounds,
) -> OperatingPoint:
    """Uncorrected traversal probe: one scalar step traverse_step * max(u_max) along direction."""
    step = cfg.traverse_step * float(np.max(u_max))
    return sample.op.with_gen_p(np.clip(sample.u + step * direction, bounds[0], bounds[1]))


def _correct_onto_boundary(
    probe: Sample,
    evaluator: Evaluator,
    cfg: SamplerConfig,
    u_max: np.ndarray,
    bounds: Bounds,
    free_mask: Optional[np.ndarray],
    trail: List[Sample],
) -> Optional[Sample]:
    """Find an opposite-label partner along the probe's descent direction and bisect to it."""
    if probe.phi is not None and abs(probe.phi) < cfg.phi_cri:
        return replace(probe, critical=True)
    if probe.grad is None:
        return None
    g = _masked(np.asarray(probe.grad, dtype=float), free_mask)
    norm = np.linalg.norm(g)
    if norm == 0.0:
        return None
    # Descent of phi leads to the boundary from either side
    normal = -g / norm
    distance = 0.5 * cfg.traverse_step * float(np.max(u_max))
    for _ in range(PROBE_TRIES):
        partner_u = np.clip(probe.u + distance * normal, bounds[0], bounds[1])
        partner = evaluator(probe.op.with_gen_p(partner_u), Provenance.ROUTE3_TRAVERSE, True)
        trail.append(partner)
        if not partner.feasible:
            return None
        if partner.label != probe.label:
            try:
                return bisect_crossing(probe, partner, evaluator, cfg.phi_cri, cfg.bisect_width_mw, trail)
            except BisectionError:
                return None
        distance *= 2.0
    return None


def traverse_boundary(
    critical: Sample,
    cfg: SamplerConfig,
    u_max: np.ndarray,
    evaluator: Evaluator,
    rng: Optional[np.random.Generator] = None,
    bounds: Optional[Bounds] = None,
    free_mask: Optional[np.ndarray] = None,
    trail: Optional[List[Sample]] = None,
) -> List[Sample]:
    """
    Walk along the boundary from a critical sample, perpendicular to the gradient.

    Up to max_route_steps points are produced, split over both tangent directions.
    Each probe is pulled back onto the boundary by a corrective bisection; an arm
    stops when the correction fails or leaves the feasible region.

    Args:
        critical: Critical sample with a gradient
        cfg: Sampler configuration
        u_max: Step scale (MW)
        evaluator: (op, provenance, with_gradient) -> Sample
        rng: Generator for the random tangent in dimension > 2
        bounds: Box; defaults to [0, u_max]
        free_mask: Coordinates allowed to move
        trail: Receives every evaluated sample

    Returns:
        Corrected boundary samples, provenance route3_traverse
    """
    if cfg.max_route_steps == 0 or critical.grad is None:
        return []
    rng = rng or np.random.default_rng(cfg.rng_seed)
    bounds = bounds if bounds is not None else (np.zeros_like(u_max), np.asarray(u_max))
    trail = trail if trail is not None else []
    first = tangent_direction(critical.grad, rng, free_mask=free_mask)
    if first is None:
        return []

    points: List[Sample] = []
    arm_lengths = [(cfg.max_route_steps + 1) // 2, cfg.max_route_steps // 2]
    for sign, length in zip((1.0, -1.0), arm_lengths):
        current, direction = critical, sign * first
        for _ in range(length):
            probe_op = tangent_step(current, direction, cfg, u_max, bounds)
            if np.array_equal(probe_op.gen_p, current.u):
                break
            probe = evaluator(probe_op, Provenance.ROUTE3_TRAVERSE, True)
            trail.append(probe)
            if not probe.feasible:
                break
            corrected = _correct_onto_boundary(probe, evaluator, cfg, u_max, bounds, free_mask, trail)
            if corrected is None:
                logger.debug("Traversal arm stopped", op=probe.u.tolist())
                break
            corrected = replace(corrected, provenance=Provenance.ROUTE3_TRAVERSE, critical=True)
            points.append(corrected)
            if corrected.grad is None:
                break
            next_dir = tangent_direction(corrected.grad, rng, previous=direction, free_mask=free_mask)
            if next_dir is None:
                break
            current, direction = corrected, next_dir
    return points


def _chord_candidates(
    model,
    bounds: Bounds,
    n_chords: int,
    rng: np.random.Generator,
    anchors: np.ndarray,
) -> List[np.ndarray]:
    lower, upper = bounds
    span = upper - lower
    starts = rng.uniform(lower, upper, size=(n_chords, lower.shape[0]))
    ends = rng.uniform(lower, upper, size=(n_chords, lower.shape[0]))
    if anchors.size:
        # Short chords through perturbed existing boundary samples
        offsets = rng.standard_normal(anchors.shape) * 0.05 * span
        starts = np.vstack([starts, np.clip(anchors - offsets, lower, upper)])
        ends = np.vstack([ends, np.clip(anchors + offsets, lower, upper)])
    d_start = model.decision_values(starts)
    d_end = model.decision_values(ends)
    values = np.concatenate([d_start, d_end])
    if np.all(values > 0) or np.all(values <= 0):
        raise NoBoundaryError("Boundary model predicts a single class over the box")
    candidates = []
    for a, b, da, db in zip(starts, ends, d_start, d_end):
        if np.sign(da) != np.sign(db):
            candidates.append(project_to_boundary(model, a, b))
    return candidates


def resample_gaps(
    samples: Union[SampleSet, Sequence[Sample]],
    model: BoundaryModel,
    n_new: int,
    rng_seed: int,
    bounds: Bounds,
    n_chords: int = 256,
) -> Tuple[List[np.ndarray], np.ndarray]:
    """
    Greedy maximin selection of new points on the model's zero set.

    Candidates come from bisecting the model along random chords with opposite
    predicted labels. Each pick maximizes gamma, the minimum squared distance to the
    existing critical samples and to earlier picks.

    Args:
        samples: Existing samples; their critical members are the reference set
        model: Trained boundary model (anything exposing decision_values)
        n_new: Points to select
        rng_seed: Seed of the chord draw
        bounds: Box (MW)
        n_chords: Random chords in the candidate pool

    Returns:
        Tuple of (selected points, gamma of each pick); gamma is +inf with no reference points
    """
    if n_new < 1:
        raise ContractError("n_new must be at least 1")
    items = samples.samples if isinstance(samples, SampleSet) else list(samples)
    existing = np.array([s.u for s in items if s.feasible and s.critical], dtype=float)
    existing = existing.reshape(-1, bounds[0].shape[0])
    rng = np.random.default_rng(rng_seed)
    candidates = _chord_candidates(model, bounds, n_chords, rng, existing)
    if not candidates:
        raise NoBoundaryError("No boundary candidates found")
    pool = np.array(candidates)

    if existing.shape[0]:
        min_d2 = ((pool[:, None, :] - existing[None, :, :]) ** 2).sum(axis=2).min(axis=1)
    else:
        min_d2 = np.full(pool.shape[0], np.inf)
    taken = np.zeros(pool.shape[0], dtype=bool)
    selected, gammas = [], []
    for _ in range(min(n_new, pool.shape[0])):
        scores = np.where(taken, -np.inf, min_d2)
        k = int(np.argmax(scores))
        selected.append(pool[k].copy())
        gammas.append(float(min_d2[k]))
        taken[k] = True
        min_d2 = np.minimum(min_d2, ((pool - pool[k]) ** 2).sum(axis=1))
    return selected, np.array(gammas)


def check_termination(gammas: Sequence[float], gamma_cri: float) -> bool:
    """True iff the smallest gamma is at or below gamma_cri."""
    gammas = np.asarray(gammas, dtype=float)
    if gammas.size == 0:
        raise ContractError("Termination check needs at least one gamma")
    return bool(gammas.min() <= gamma_cri)


class _Collector:
    """Single owner of the evaluated samples, the budget and the step counters."""

    def __init__(self, evaluator: Evaluator, max_samples: int):
        self.evaluator = evaluator
        self.max_samples = max_samples
        self.samples: List[Sample] = []
        self.keys: Dict[str, int] = {}
        self.steps: Dict[int, int] = {}
        self.evaluated = 0

    @property
    def exhausted(self) -> bool:
        return self.evaluated >= self.max_samples

    def _key(self, op: OperatingPoint) -> str:
        return hash_array(op.gen_p, op.load_scale)

    def next_step(self, seed_index: int) -> int:
        self.steps[seed_index] = self.steps.get(seed_index, 0) + 1
        return self.steps[seed_index]

    def record(self, sample: Sample, seed_index: int, step_index: Optional[int] = None) -> Sample:
        key = self._key(sample.op)
        if key in self.keys:
            return self.samples[self.keys[key]]
        step = self.next_step(seed_index) if step_index is None else step_index
        sample = replace(sample, seed_index=seed_index, step_index=step)
        self.keys[key] = len(self.samples)
        self.samples.append(sample)
        if sample.feasible:
            self.evaluated += 1
        return sample

    def mark_critical(self, sample: Sample) -> Sample:
        key = self._key(sample.op)
        stored = replace(self.samples[self.keys[key]], critical=True)
        self.samples[self.keys[key]] = stored
        return stored

    def bound(self, seed_index: int) -> Evaluator:
        """Evaluator that records into this collector and stops at the budget."""

        def evaluate(op: OperatingPoint, provenance: Provenance, with_gradient: bool = True) -> Sample:
            key = self._key(op)
            if key in self.keys:
                return self.samples[self.keys[key]]
            if self.exhausted:
                raise _BudgetExhausted()
            return self.record(self.evaluator(op, provenance, with_gradient), seed_index)

        return evaluate

    def sorted_samples(self) -> List[Sample]:
        return sorted(
            self.samples,
            key=lambda s: (PROVENANCE_ORDER[s.provenance], s.seed_index, s.step_index),
        )


class _BudgetExhausted(Exception):
    pass


def _descend(
    seed: Sample,
    seed_index: int,
    collector: _Collector,
    cfg: SamplerConfig,
    u_max: np.ndarray,
    phi_ref: float,
    bounds: Bounds,
    free_mask: Optional[np.ndarray],
    rng: np.random.Generator,
) -> Optional[Sample]:
    """Route 1 from one seed, finishing with a bisection when the label flips."""
    evaluate = collector.bound(seed_index)
    current = seed
    for _ in range(cfg.max_descent_steps):
        if current.phi is not None and abs(current.phi) < cfg.phi_cri:
            return collector.mark_critical(current)
        nxt = None
        for attempt in range(REFLECT_TRIES):
            try:
                op = step_toward_boundary(
                    current, cfg, u_max, phi_ref, bounds, free_mask, scale=0.5**attempt
                )
            except StationaryPointError:
                noise = _masked(rng.normal(0.0, cfg.nu_min, size=current.u.shape) * u_max, free_mask)
                op = current.op.with_gen_p(np.clip(current.u + noise, bounds[0], bounds[1]))
            candidate = evaluate(op, Provenance.ROUTE1, True)
            if candidate.feasible:
                nxt = candidate
                break
        if nxt is None:
            logger.debug("Descent left the feasible region", seed_index=seed_index)
            return None
        if nxt.label != current.label:
            trail: List[Sample] = []
            try:
                return collector.mark_critical(
                    bisect_crossing(current, nxt, evaluate, cfg.phi_cri, cfg.bisect_width_mw, trail)
                )
            except BisectionError:
                return None
        if np.array_equal(nxt.u, current.u):
            return None
        current = nxt
    if current.phi is not None and abs(current.phi) < cfg.phi_cri:
        return collector.mark_critical(current)
    return None


def _explore(
    starts: List[Tuple[int, Sample]],
    collector: _Collector,
    cfg: SamplerConfig,
    u_max: np.ndarray,
    phi_ref: float,
    bounds: Bounds,
    free_mask: Optional[np.ndarray],
    rng: np.random.Generator,
) -> None:
    """Routes 1 and 2 from every start, then route 3 from every critical sample found."""
    criticals: List[Tuple[int, Sample]] = []
    for seed_index, start in starts:
        if not start.feasible:
            continue
        if start.phi is not None and abs(start.phi) < cfg.phi_cri:
            criticals.append((seed_index, collector.mark_critical(start)))
            continue
        found = _descend(start, seed_index, collector, cfg, u_max, phi_ref, bounds, free_mask, rng)
        if found is not None:
            criticals.append((seed_index, found))
    for seed_index, critical in criticals:
        for point in traverse_boundary(critical, cfg, u_max, collector.bound(seed_index), rng, bounds, free_mask):
            collector.mark_critical(point)


def generate_dataset(
    case: GridCase,
    contingency: Contingency,
    cfg: SamplerConfig,
    sim: Optional[SimConfig] = None,
    evaluator: Optional[Evaluator] = None,
    bounds: Optional[Bounds] = None,
    free_mask: Optional[np.ndarray] = None,
    base_op: Optional[OperatingPoint] = None,
    load_band: Optional[Tuple[float, float]] = None,
    limits: Optional[StaticLimitsConfig] = None,
    workers: int = 1,
    case_ref: Optional[str] = None,
) -> SampleSet:
    """
    Generate a boundary-focused sample set for one contingency.

    Seeds are screened, descended toward the boundary (routes 1 and 2), the boundary
    is traversed from every critical sample (route 3), and maximin gap points on the
    preliminary model are evaluated as new seeds until the termination test fires.

    Args:
        case: Grid case
        contingency: Contingency
        cfg: Sampler configuration
        sim: Simulation settings for the default evaluator
        evaluator: Replacement (op, provenance, with_gradient) -> Sample
        bounds: Search box; defaults to the controllable generator limits
        free_mask: Coordinates allowed to move; the rest stay at base_op
        base_op: Operating point holding the frozen coordinates
        load_band: Load multiplier range; defaults to cfg.load_band
        limits: Static screen for the default evaluator
        workers: Worker processes for seed evaluation
        case_ref: Case identifier recorded on the set

    Returns:
        SampleSet ordered by provenance, seed index and step index
    """
    evaluator = evaluator or OperatingPointEvaluator(case, contingency, sim or SimConfig(), limits)
    _, u_max = controllable_bounds(case)
    if bounds is None:
        bounds = controllable_bounds(case)
    lower, upper = (np.asarray(b, dtype=float).copy() for b in bounds)
    if free_mask is not None:
        free_mask = np.asarray(free_mask, dtype=bool)
        if base_op is None:
            raise ContractError("Frozen coordinates need a base operating point")
        lower = np.where(free_mask, lower, base_op.gen_p)
        upper = np.where(free_mask, upper, base_op.gen_p)
    bounds = (lower, upper)
    gamma_cri = cfg.gamma_cri or default_gamma_cri(u_max)
    rng = np.random.default_rng(cfg.rng_seed)
    collector = _Collector(evaluator, cfg.max_samples)

    seeds = seed_initial_ops(case, bounds, cfg.n_seeds, cfg.rng_seed, load_band or cfg.load_band)
    seed_samples = ordered_map(partial(_evaluate_seed, evaluator), seeds, workers)
    starts = []
    for i, sample in enumerate(seed_samples):
        if collector.exhausted:
            break
        starts.append((i, collector.record(sample, i, step_index=0)))
    feasible = [s for _, s in starts if s.feasible]
    logger.info("Seeds evaluated", contingency=contingency.id, seeds=len(starts), feasible=len(feasible))
    if not feasible:
        raise SeedingError("Every seed operating point is infeasible", details={"n_seeds": cfg.n_seeds})
    phi_ref = cfg.phi_ref or abs(feasible[0].phi or 0.0) or 1.0

    next_seed = cfg.n_seeds
    try:
        _explore(starts, collector, cfg, u_max, phi_ref, bounds, free_mask, rng)
        for round_index in range(cfg.resample_rounds):
            try:
                model = train(collector.samples)
                points, gammas = resample_gaps(
                    collector.samples, model, cfg.resample_n_new, cfg.rng_seed + round_index + 1,
                    bounds, cfg.resample_chords,
                )
            except NoBoundaryError as e:
                logger.warning("Gap re-sampling skipped", reason=e.message, round=round_index)
                break
            if check_termination(gammas, gamma_cri):
                logger.info("Termination criterion met", round=round_index, min_gamma=float(gammas.min()))
                break
            new_starts = []
            for point in points:
                load = _nearest_load_scale(collector.samples, point)
                sample = collector.bound(next_seed)(
                    OperatingPoint(point, load), Provenance.GAP_RESAMPLE, True
                )
                new_starts.append((next_seed, sample))
                next_seed += 1
            _explore(new_starts, collector, cfg, u_max, phi_ref, bounds, free_mask, rng)
    except _BudgetExhausted:
        logger.info("Sample budget exhausted", max_samples=cfg.max_samples)

    result = SampleSet(
        samples=collector.sorted_samples(),
        case_ref=case_ref or case.name,
        contingency_id=contingency.id,
        config=cfg,
    )
    logger.info(
        "Dataset generated",
        contingency=contingency.id,
        samples=len(result),
        feasible=len(result.feasible()),
        critical=len(result.critical()),
    )
    return result


def _evaluate_seed(evaluator: Evaluator, op: OperatingPoint) -> Sample:
    return evaluator(op, Provenance.SEED, True)


def _nearest_load_scale(samples: Sequence[Sample], point: np.ndarray) -> np.ndarray:
    feasible = [s for s in samples if s.feasible]
    distances = [float(np.sum((s.u - point) ** 2)) for s in feasible]
    return feasible[int(np.argmin(distances))].op.load_scale.copy()


def _baseline(
    case: GridCase,
    contingency: Contingency,
    points: np.ndarray,
    loads: np.ndarray,
    provenance: Provenance,
    evaluator: Evaluator,
    workers: int,
    cfg: SamplerConfig,
) -> SampleSet:
    ops = [OperatingPoint(points[i], loads[i]) for i in range(points.shape[0])]
    results = ordered_map(partial(_evaluate_baseline, evaluator, provenance), ops, workers)
    samples = [replace(s, seed_index=i) for i, s in enumerate(results)]
    return SampleSet(samples=samples, case_ref=case.name, contingency_id=contingency.id, config=cfg)


def _evaluate_baseline(evaluator: Evaluator, provenance: Provenance, op: OperatingPoint) -> Sample:
    return evaluator(op, provenance, False)


def random_baseline(
    case: GridCase,
    contingency: Contingency,
    cfg: SamplerConfig,
    n: int,
    sim: Optional[SimConfig] = None,
    evaluator: Optional[Evaluator] = None,
    workers: int = 1,
) -> SampleSet:
    """Uniform random operating points over the controllable box."""
    evaluator = evaluator or OperatingPointEvaluator(case, contingency, sim or SimConfig())
    lower, upper = controllable_bounds(case)
    rng = np.random.default_rng(cfg.rng_seed)
    points = rng.uniform(lower, upper, size=(n, lower.shape[0]))
    loads = rng.uniform(cfg.load_band[0], cfg.load_band[1], size=(n, len(case.loads)))
    return _baseline(case, contingency, points, loads, Provenance.RANDOM, evaluator, workers, cfg)


def lhs_baseline(
    case: GridCase,
    contingency: Contingency,
    cfg: SamplerConfig,
    n: int,
    sim: Optional[SimConfig] = None,
    evaluator: Optional[Evaluator] = None,
    workers: int = 1,
) -> SampleSet:
    """Scrambled Latin Hypercube operating points over the controllable box."""
    evaluator = evaluator or OperatingPointEvaluator(case, contingency, sim or SimConfig())
    lower, upper = controllable_bounds(case)
    unit = qmc.LatinHypercube(d=lower.shape[0], seed=cfg.rng_seed).random(n)
    points = qmc.scale(unit, lower, upper) if np.all(upper > lower) else lower + unit * (upper - lower)
    rng = np.random.default_rng(cfg.rng_seed + 1)
    loads = rng.uniform(cfg.load_band[0], cfg.load_band[1], size=(n, len(case.loads)))
    return _baseline(case, contingency, points, loads, Provenance.LHS, evaluator, workers, cfg)


def sample_to_record(sample: Sample) -> SampleRecord:
    return SampleRecord(
        op=sample.u.tolist(),
        load_scale=sample.op.load_scale.tolist(),
        contingency_id=sample.contingency_id,
        phi=sample.phi,
        lambda_=sample.lam,
        label=sample.label,
        grad=None if sample.grad is None else np.asarray(sample.grad).tolist(),
        provenance=sample.provenance,
        critical=sample.critical,
        seed_index=sample.seed_index,
        step_index=sample.step_index,
    )


def sample_from_record(record: SampleRecord) -> Sample:
    return Sample(
        op=OperatingPoint(np.array(record.op, dtype=float), np.array(record.load_scale, dtype=float)),
        contingency_id=record.contingency_id,
        label=record.label,
        provenance=record.provenance,
        phi=record.phi,
        lam=record.lambda_,
        grad=None if record.grad is None else np.array(record.grad, dtype=float),
        critical=record.critical,
        seed_index=record.seed_index,
        step_index=record.step_index,
    )


def sidecar_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def save_sample_set(
    sample_set: SampleSet,
    path: Union[str, Path],
    sim: Optional[SimConfig] = None,
) -> None:
    """Write one JSON sample per line plus the config sidecar."""
    path = Path(path)
    lines = [sample_to_record(s).model_dump_json(by_alias=True) for s in sample_set.samples]
    path.write_text("\n".join(lines) + ("\n" if lines else ""))
    sampler_cfg = sample_set.config if isinstance(sample_set.config, SamplerConfig) else SamplerConfig()
    sidecar = SampleSetSidecar(
        case_ref=sample_set.case_ref,
        contingency_id=sample_set.contingency_id,
        sampler=sampler_cfg,
        sim=sim or SimConfig(),
        n_samples=len(sample_set),
    )
    sidecar_path(path).write_text(sidecar.model_dump_json(indent=2))


def load_sample_set(path: Union[str, Path]) -> SampleSet:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError as e:
        raise ContractError(f"Sample set not found: {path}") from e
    samples = [
        sample_from_record(SampleRecord.model_validate_json(line))
        for line in text.splitlines()
        if line.strip()
    ]
    meta = sidecar_path(path)
    if meta.is_file():
        sidecar = SampleSetSidecar.model_validate_json(meta.read_text())
        return SampleSet(samples, sidecar.case_ref, sidecar.contingency_id, sidecar.sampler)
    contingency_id = samples[0].contingency_id if samples else ""
    return SampleSet(samples, "", contingency_id, None)
