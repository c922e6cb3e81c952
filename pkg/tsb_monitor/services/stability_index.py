# Transient stability index and its sensitivity to the controllable dispatch

from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.integrate import trapezoid
from scipy.interpolate import CubicHermiteSpline
from scipy.special import logsumexp, softmax

from tsb_monitor.core.exceptions import InfeasibleOperatingPointError
from tsb_monitor.core.logger import get_logger
from tsb_monitor.models.domain import (
    Contingency,
    DynamicInit,
    GradientResult,
    GridCase,
    IndexResult,
    OperatingPoint,
    Sample,
    StabilityVerdict,
    Trajectory,
)
from tsb_monitor.models.models import GradientMethod, Label, Provenance
from tsb_monitor.schemas.schemas import SimConfig, StaticLimitsConfig
from tsb_monitor.services.grid_model import initialize_operating_point
from tsb_monitor.services.tds_engine import classify_stability, clearing_step, simulate, swing_rhs

logger = get_logger(__name__)

InitFn = Callable[[GridCase, OperatingPoint, Optional[Contingency]], DynamicInit]
IndexFn = Callable[[OperatingPoint], float]

PRE_FAULT, FAULT_ON, POST_FAULT = 0, 1, 2


def _excursion_squared(delta: np.ndarray, coi: np.ndarray) -> np.ndarray:
    return (delta - coi[..., None]) ** 2


def _smooth_max(values: np.ndarray, temperature: Optional[float]) -> np.ndarray:
    if temperature is None:
        return values.max(axis=-1)
    return temperature * logsumexp(values / temperature, axis=-1)


def transient_index(traj: Trajectory, verdict: StabilityVerdict, cfg: SimConfig) -> IndexResult:
    """
    Integrate the clipped angle margin over the simulation window.

    theta(t) = lam * (delta_max^2 - max_i (delta_i - coi)^2); the integrand is
    max(0, theta) and the quadrature is the composite trapezoid on the grid.

    Args:
        traj: Simulated trajectory
        verdict: Stability verdict of the same trajectory
        cfg: Simulation settings

    Returns:
        IndexResult with phi >= 0
    """
    exc2 = _excursion_squared(traj.delta, traj.coi)
    argmax_gen = np.argmax(exc2, axis=1)
    peak = _smooth_max(exc2, cfg.softmax_temperature)
    theta = verdict.lam * (cfg.delta_max**2 - peak)
    integrand = np.maximum(0.0, theta)
    phi = float(trapezoid(integrand, traj.times)) if traj.n_steps > 1 else 0.0
    return IndexResult(
        phi=phi,
        lam=verdict.lam,
        argmax_gen=argmax_gen,
        clip_mask=theta < 0,
        theta=theta,
    )


def _default_init_fn(limits: Optional[StaticLimitsConfig]) -> InitFn:
    def init_fn(case: GridCase, op: OperatingPoint, cont: Optional[Contingency]) -> DynamicInit:
        return initialize_operating_point(case, op, cont, limits)

    return init_fn


@dataclass(frozen=True)
class ForwardResult:
    init: DynamicInit
    traj: Trajectory
    verdict: StabilityVerdict
    index: IndexResult


def forward(
    case: GridCase,
    op: OperatingPoint,
    cont: Optional[Contingency],
    cfg: SimConfig,
    init_fn: InitFn,
) -> ForwardResult:
    """Initialize, simulate, classify and index one operating point."""
    init = init_fn(case, op, cont)
    traj = simulate(init, cont, cfg)
    verdict = classify_stability(traj, cfg)
    return ForwardResult(init, traj, verdict, transient_index(traj, verdict, cfg))


# Adjoint pass


def _pe_jacobian(emf: np.ndarray, delta: np.ndarray, y_red: np.ndarray) -> np.ndarray:
    """d Pe_i / d delta_k for the classical model."""
    g, b = y_red.real, y_red.imag
    d = delta[:, None] - delta[None, :]
    m = np.outer(emf, emf) * (g * np.sin(d) - b * np.cos(d))
    np.fill_diagonal(m, 0.0)
    m[np.diag_indices_from(m)] = -m.sum(axis=1)
    return m


def _index_state_gradient(
    delta: np.ndarray,
    inertia: np.ndarray,
    lam: int,
    cfg: SimConfig,
) -> np.ndarray:
    """d max(0, theta) / d delta at one instant (zero where the integrand is clipped)."""
    weights_coi = inertia / inertia.sum()
    coi = float(delta @ weights_coi)
    exc = delta - coi
    exc2 = exc**2
    peak = _smooth_max(exc2, cfg.softmax_temperature)
    theta = lam * (cfg.delta_max**2 - peak)
    if theta <= 0.0:
        return np.zeros_like(delta)
    if cfg.softmax_temperature is None:
        weights = np.zeros_like(delta)
        weights[int(np.argmax(exc2))] = 1.0
    else:
        weights = softmax(exc2 / cfg.softmax_temperature)
    # d exc_i / d delta_k = 1[i == k] - T_k / sum(T)
    d_peak = 2.0 * (weights * exc - weights_coi * np.sum(weights * exc))
    return -lam * d_peak


def _costate_rhs(
    lam_d: np.ndarray,
    lam_w: np.ndarray,
    delta: np.ndarray,
    y_red: np.ndarray,
    init: DynamicInit,
    lam: int,
    cfg: SimConfig,
) -> Tuple[np.ndarray, np.ndarray]:
    """d lambda / ds in reversed time s = T - t."""
    scaled = lam_w / init.inertia
    d_pe = _pe_jacobian(init.emf_mag, delta, y_red)
    rhs_d = _index_state_gradient(delta, init.inertia, lam, cfg) - d_pe.T @ scaled
    rhs_w = cfg.omega_s * lam_d - init.damping * scaled
    return rhs_d, rhs_w


def _interval_phases(cont: Optional[Contingency], n_intervals: int, n_clear: int) -> List[int]:
    """Position in DynamicInit.y_reduced of the matrix in force on each interval."""
    if cont is None:
        return [PRE_FAULT] * n_intervals
    return [FAULT_ON if k < n_clear else POST_FAULT for k in range(n_intervals)]


def _segments(phases: List[int]) -> List[Tuple[int, int, int]]:
    """Contiguous runs of intervals sharing one matrix: (start, stop, phase)."""
    runs = []
    start = 0
    for k in range(1, len(phases) + 1):
        if k == len(phases) or phases[k] != phases[start]:
            runs.append((start, k, phases[start]))
            start = k
    return runs


def _midpoint_states(traj: Trajectory, init: DynamicInit, phases: List[int], omega_s: float) -> np.ndarray:
    """Rotor angles at interval midpoints by cubic Hermite interpolation per phase."""
    dt = traj.dt
    n_intervals = traj.n_steps - 1
    mid = np.empty((n_intervals, init.n_gen))
    for start, stop, phase in _segments(phases):
        y_red = init.y_reduced[phase]
        knots = slice(start, stop + 1)
        states = np.hstack([traj.delta[knots], traj.omega[knots]])
        derivs = np.array(
            [
                np.concatenate(swing_rhs(d, w, init, y_red, omega_s))
                for d, w in zip(traj.delta[knots], traj.omega[knots])
            ]
        )
        spline = CubicHermiteSpline(traj.times[knots], states, derivs, axis=0)
        mid[start:stop] = spline(traj.times[start:stop] + 0.5 * dt)[:, : init.n_gen]
    return mid


def _integrate_costate(
    traj: Trajectory,
    init: DynamicInit,
    cont: Optional[Contingency],
    lam: int,
    cfg: SimConfig,
) -> Tuple[np.ndarray, np.ndarray, List[int]]:
    """Backward RK4 of the co-state from lambda(T) = 0 on the forward grid."""
    n_intervals = traj.n_steps - 1
    n_clear = clearing_step(cont, cfg) if cont is not None else 0
    phases = _interval_phases(cont, n_intervals, n_clear)
    mid = _midpoint_states(traj, init, phases, cfg.omega_s) if n_intervals else None

    n_gen = init.n_gen
    lam_d = np.zeros((traj.n_steps, n_gen))
    lam_w = np.zeros((traj.n_steps, n_gen))
    dt = traj.dt
    for k in range(n_intervals - 1, -1, -1):
        y_red = init.y_reduced[phases[k]]
        ld, lw = lam_d[k + 1], lam_w[k + 1]
        k1d, k1w = _costate_rhs(ld, lw, traj.delta[k + 1], y_red, init, lam, cfg)
        k2d, k2w = _costate_rhs(ld + 0.5 * dt * k1d, lw + 0.5 * dt * k1w, mid[k], y_red, init, lam, cfg)
        k3d, k3w = _costate_rhs(ld + 0.5 * dt * k2d, lw + 0.5 * dt * k2w, mid[k], y_red, init, lam, cfg)
        k4d, k4w = _costate_rhs(ld + dt * k3d, lw + dt * k3w, traj.delta[k], y_red, init, lam, cfg)
        lam_d[k] = ld + dt / 6.0 * (k1d + 2 * k2d + 2 * k3d + k4d)
        lam_w[k] = lw + dt / 6.0 * (k1w + 2 * k2w + 2 * k3w + k4w)
    return lam_d, lam_w, phases


def _electrical_power_series(emf: np.ndarray, delta: np.ndarray, y_red: np.ndarray) -> np.ndarray:
    e = emf[None, :] * np.exp(1j * delta)
    return np.real(e * np.conj(e @ y_red.T))


def _perturbed_inits(
    case: GridCase,
    op: OperatingPoint,
    cont: Optional[Contingency],
    j: int,
    step: float,
    init_fn: InitFn,
) -> Tuple[Optional[DynamicInit], Optional[DynamicInit]]:
    out = []
    for sign in (1.0, -1.0):
        gen_p = op.gen_p.copy()
        gen_p[j] += sign * step
        try:
            out.append(init_fn(case, op.with_gen_p(gen_p), cont))
        except InfeasibleOperatingPointError:
            out.append(None)
    return out[0], out[1]


def _parametric_term(
    traj: Trajectory,
    lam_w: np.ndarray,
    phases: List[int],
    base: DynamicInit,
    other: DynamicInit,
) -> float:
    """Trapezoid of lambda_w . (F_w(other) - F_w(base)) per interval phase."""
    n_intervals = traj.n_steps - 1
    if n_intervals <= 0:
        return 0.0
    pair = {}
    for which in set(phases):
        y_base = base.y_reduced[which]
        y_other = other.y_reduced[which]
        pe_base = _electrical_power_series(base.emf_mag, traj.delta, y_base)
        pe_other = _electrical_power_series(other.emf_mag, traj.delta, y_other)
        diff = ((other.pm - base.pm)[None, :] - (pe_other - pe_base)) / base.inertia[None, :]
        pair[which] = np.sum(lam_w * diff, axis=1)
    left = np.array([pair[m][k] for k, m in enumerate(phases)])
    right = np.array([pair[m][k + 1] for k, m in enumerate(phases)])
    return float(0.5 * traj.dt * np.sum(left + right))


def _gradient_from_forward(
    case: GridCase,
    op: OperatingPoint,
    cont: Optional[Contingency],
    cfg: SimConfig,
    fwd: ForwardResult,
    init_fn: InitFn,
) -> GradientResult:
    traj, init = fwd.traj, fwd.init
    lam_d, lam_w, phases = _integrate_costate(traj, init, cont, fwd.index.lam, cfg)

    step = cfg.sensitivity_step_mw
    grad = np.zeros(op.dim)
    one_sided = []
    for j in range(op.dim):
        plus, minus = _perturbed_inits(case, op, cont, j, step, init_fn)
        if plus is not None and minus is not None:
            hi, lo, width, flag = plus, minus, 2.0 * step, False
        elif plus is not None:
            hi, lo, width, flag = plus, init, step, True
        elif minus is not None:
            hi, lo, width, flag = init, minus, step, True
        else:
            raise InfeasibleOperatingPointError(
                "Both sensitivity perturbations are infeasible", details={"coordinate": j}
            )
        one_sided.append(flag)
        integral = _parametric_term(traj, lam_w, phases, lo, hi)
        initial = float(lam_d[0] @ (hi.delta0 - lo.delta0) + lam_w[0] @ (hi.omega0 - lo.omega0))
        grad[j] = (integral + initial) / width

    return GradientResult(
        grad=grad,
        method=GradientMethod.ADJOINT,
        costate_terminal_norm=float(np.linalg.norm(np.concatenate([lam_d[-1], lam_w[-1]]))),
        diverged=traj.diverged,
        one_sided=tuple(one_sided),
        phi=fwd.index.phi,
    )


def adjoint_gradient(
    case: GridCase,
    op: OperatingPoint,
    cont: Optional[Contingency],
    cfg: SimConfig,
    limits: Optional[StaticLimitsConfig] = None,
    init_fn: Optional[InitFn] = None,
) -> GradientResult:
    """
    Gradient of the index w.r.t. controllable dispatch by the adjoint method.

    The co-state runs backward from lambda(T) = 0 on the forward grid. The dependence
    of the initial state, mechanical power and reduced matrices on the dispatch comes
    from central differences of the initialization pipeline.

    Args:
        case: Grid case
        op: Feasible operating point
        cont: Contingency
        cfg: Simulation settings
        limits: Static screen used by the initialization pipeline
        init_fn: Replacement initialization pipeline (case, op, cont) -> DynamicInit

    Returns:
        GradientResult over the controllable generators
    """
    init_fn = init_fn or _default_init_fn(limits)
    fwd = forward(case, op, cont, cfg, init_fn)
    return _gradient_from_forward(case, op, cont, cfg, fwd, init_fn)


def index_value(
    case: GridCase,
    op: OperatingPoint,
    cont: Optional[Contingency],
    cfg: SimConfig,
    limits: Optional[StaticLimitsConfig] = None,
) -> float:
    """Index of one operating point; raises InfeasibleOperatingPointError when screened out."""
    return forward(case, op, cont, cfg, _default_init_fn(limits)).index.phi


def fd_gradient(
    case: GridCase,
    op: OperatingPoint,
    cont: Optional[Contingency],
    cfg: SimConfig,
    h: float = 0.5,
    limits: Optional[StaticLimitsConfig] = None,
    index_fn: Optional[IndexFn] = None,
) -> GradientResult:
    """
    Central-difference gradient of the index, one-sided where a perturbation is infeasible.

    Args:
        case: Grid case
        op: Operating point
        cont: Contingency
        cfg: Simulation settings
        h: Step in MW
        limits: Static screen
        index_fn: Replacement index evaluator op -> phi

    Returns:
        GradientResult with method finite_difference
    """
    if index_fn is None:

        def index_fn(point: OperatingPoint) -> float:
            return index_value(case, point, cont, cfg, limits)

    def safe(point: OperatingPoint) -> Optional[float]:
        try:
            return index_fn(point)
        except InfeasibleOperatingPointError:
            return None

    center = index_fn(op)
    grad = np.zeros(op.dim)
    one_sided = []
    for j in range(op.dim):
        up = op.gen_p.copy()
        down = op.gen_p.copy()
        up[j] += h
        down[j] -= h
        f_up, f_down = safe(op.with_gen_p(up)), safe(op.with_gen_p(down))
        if f_up is not None and f_down is not None:
            grad[j] = (f_up - f_down) / (2.0 * h)
            one_sided.append(False)
        elif f_up is not None:
            grad[j] = (f_up - center) / h
            one_sided.append(True)
        elif f_down is not None:
            grad[j] = (center - f_down) / h
            one_sided.append(True)
        else:
            raise InfeasibleOperatingPointError(
                "Both finite-difference perturbations are infeasible", details={"coordinate": j}
            )
    return GradientResult(
        grad=grad,
        method=GradientMethod.FINITE_DIFFERENCE,
        one_sided=tuple(one_sided),
        phi=center,
    )


def evaluate_op(
    case: GridCase,
    op: OperatingPoint,
    cont: Contingency,
    cfg: SimConfig,
    with_gradient: bool = True,
    provenance: Provenance = Provenance.SEED,
    limits: Optional[StaticLimitsConfig] = None,
) -> Sample:
    """
    Full evaluation of one operating point into a Sample.

    Power flow, static screen, initialization, simulation, verdict and index, plus the
    adjoint gradient when requested. Screened-out points become infeasible samples.
    """
    init_fn = _default_init_fn(limits)
    try:
        fwd = forward(case, op, cont, cfg, init_fn)
    except InfeasibleOperatingPointError as e:
        logger.debug("Operating point infeasible", reason=e.message, op=op.gen_p.tolist())
        return Sample(op=op, contingency_id=cont.id, label=Label.INFEASIBLE, provenance=provenance)

    grad = None
    if with_gradient:
        try:
            grad = _gradient_from_forward(case, op, cont, cfg, fwd, init_fn).grad
        except InfeasibleOperatingPointError as e:
            logger.warning("Gradient unavailable", reason=e.message, op=op.gen_p.tolist())
    return Sample(
        op=op,
        contingency_id=cont.id,
        label=Label.STABLE if fwd.verdict.stable else Label.UNSTABLE,
        provenance=provenance,
        phi=fwd.index.phi,
        lam=fwd.verdict.lam,
        grad=grad,
    )


@dataclass(frozen=True)
class OperatingPointEvaluator:
    """Picklable evaluator bound to one case and contingency."""

    case: GridCase
    contingency: Contingency
    sim: SimConfig
    limits: Optional[StaticLimitsConfig] = None

    def __call__(self, op: OperatingPoint, provenance: Provenance, with_gradient: bool = True) -> Sample:
        return evaluate_op(
            self.case, op, self.contingency, self.sim, with_gradient, provenance, self.limits
        )
