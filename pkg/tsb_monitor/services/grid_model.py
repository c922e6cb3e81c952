# Network model: case parsing, power flow, static screen, classical initialization

import json
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg
from pydantic import ValidationError
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from tsb_monitor.core.exceptions import (
    CaseParseError,
    CaseValidationError,
    ContractError,
    DegenerateInitError,
    InfeasibleOperatingPointError,
    ReductionError,
    TopologyError,
)
from tsb_monitor.core.logger import get_logger
from tsb_monitor.models.domain import (
    Branch,
    Bus,
    Contingency,
    DynamicInit,
    GeneratorParams,
    GridCase,
    Load,
    OperatingPoint,
    PowerFlowSolution,
    StaticLimitsReport,
    TopologyVariant,
    Violation,
)
from tsb_monitor.models.models import TopologyKind, ViolationKind
from tsb_monitor.schemas.schemas import CaseFile, StaticLimitsConfig

logger = get_logger(__name__)

BUNDLED_CASES = ("case9", "case6_synthetic")

PF_TOLERANCE = 1e-8
PF_MAX_ITER = 20
REDUCTION_COND_LIMIT = 1e14


def parse_case(text: str) -> GridCase:
    """
    Parse a case JSON document into a validated GridCase.

    Args:
        text: Case-file content

    Returns:
        GridCase satisfying the referential invariants
    """
    try:
        doc = CaseFile.model_validate(json.loads(text))
    except json.JSONDecodeError as e:
        raise CaseParseError(f"Case file is not valid JSON: {e.msg}", field="") from e
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(part) for part in first["loc"])
        raise CaseParseError(f"Invalid case field '{field}': {first['msg']}", field=field) from e

    bus_ids = [b.id for b in doc.buses]
    duplicates = sorted({i for i in bus_ids if bus_ids.count(i) > 1})
    if duplicates:
        raise CaseValidationError(f"Duplicate bus ids: {duplicates}")
    known = set(bus_ids)

    branches: List[Branch] = []
    seen_ids: Dict[str, int] = {}
    for i, br in enumerate(doc.branches):
        for end in (br.from_bus, br.to_bus):
            if end not in known:
                raise CaseValidationError(f"Branch {i} references unknown bus {end}")
        if br.from_bus == br.to_bus:
            raise CaseValidationError(f"Branch {i} connects bus {br.from_bus} to itself")
        branch_id = br.id or f"{br.from_bus}-{br.to_bus}"
        if branch_id in seen_ids:
            # Parallel circuits without explicit ids
            seen_ids[branch_id] += 1
            branch_id = f"{branch_id}#{seen_ids[branch_id]}"
        seen_ids.setdefault(branch_id, 1)
        branches.append(Branch(branch_id, br.from_bus, br.to_bus, br.r, br.x, br.b, br.rating))

    gen_buses = [g.bus for g in doc.generators]
    for bus in gen_buses:
        if bus not in known:
            raise CaseValidationError(f"Generator references unknown bus {bus}")
    if len(set(gen_buses)) != len(gen_buses):
        raise CaseValidationError("At most one generator per bus is supported")
    n_slack = sum(1 for g in doc.generators if g.slack)
    if n_slack != 1:
        raise CaseValidationError(f"Exactly one slack generator required, found {n_slack}")
    for load in doc.loads:
        if load.bus not in known:
            raise CaseValidationError(f"Load references unknown bus {load.bus}")

    case = GridCase(
        name=doc.name,
        base_mva=doc.base_mva,
        buses=tuple(Bus(b.id, b.v_setpoint, b.v_min, b.v_max) for b in doc.buses),
        branches=tuple(branches),
        generators=tuple(
            GeneratorParams(
                bus=g.bus,
                inertia_tj=g.tj,
                xd_prime=g.xd_prime,
                damping=g.damping,
                p_min=g.p_min,
                p_max=g.p_max,
                q_min=g.q_min,
                q_max=g.q_max,
                is_slack=g.slack,
                p_setpoint=g.p_setpoint,
            )
            for g in doc.generators
        ),
        loads=tuple(Load(l.bus, l.p_mw, l.q_mvar) for l in doc.loads),
    )
    logger.debug("Case parsed", name=case.name, buses=case.n_bus, generators=case.n_gen)
    return case


def load_case(source: Union[str, Path]) -> GridCase:
    """
    Read a case from disk, or a bundled case by name.

    Args:
        source: Path to a case JSON file, or one of the bundled case names

    Returns:
        Parsed GridCase
    """
    path = Path(source)
    if path.is_file():
        return parse_case(path.read_text())
    name = str(source)
    if name in BUNDLED_CASES:
        text = resources.files("tsb_monitor.data").joinpath(f"{name}.json").read_text()
        return parse_case(text)
    raise CaseParseError(f"Case not found: {source}", field="case")


def base_operating_point(case: GridCase) -> OperatingPoint:
    """Reference dispatch of the case with all loads at their reference level."""
    gen_p = []
    for i in case.controllable_gens:
        g = case.generators[i]
        gen_p.append(g.p_setpoint if g.p_setpoint is not None else 0.5 * (g.p_min + g.p_max))
    return OperatingPoint(np.array(gen_p, dtype=float), np.ones(len(case.loads)))


def controllable_bounds(case: GridCase) -> Tuple[np.ndarray, np.ndarray]:
    """Active-power box (MW) of the controllable generators."""
    gens = [case.generators[i] for i in case.controllable_gens]
    return (
        np.array([g.p_min for g in gens], dtype=float),
        np.array([g.p_max for g in gens], dtype=float),
    )


def _check_connected(case: GridCase, branches: Sequence[Branch], context: str) -> None:
    index = case.bus_index
    rows = [index[br.from_bus] for br in branches]
    cols = [index[br.to_bus] for br in branches]
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(case.n_bus, case.n_bus))
    n_components, _ = connected_components(graph, directed=False)
    if n_components > 1:
        raise TopologyError(f"{context} splits the network into {n_components} islands")


def _branches_in_service(case: GridCase, variant: TopologyVariant) -> List[Branch]:
    if variant.kind != TopologyKind.POST_FAULT or variant.tripped_branch is None:
        return list(case.branches)
    try:
        case.branch(variant.tripped_branch)
    except KeyError:
        raise ContractError(f"Unknown branch: {variant.tripped_branch}")
    remaining = [br for br in case.branches if br.id != variant.tripped_branch]
    _check_connected(case, remaining, f"Tripping branch {variant.tripped_branch}")
    return remaining


def _stamp_branches(n_bus: int, index: Dict[int, int], branches: Sequence[Branch]) -> np.ndarray:
    y = np.zeros((n_bus, n_bus), dtype=complex)
    for br in branches:
        f, t = index[br.from_bus], index[br.to_bus]
        ys = 1.0 / complex(br.r, br.x)
        ysh = 0.5j * br.b
        y[f, f] += ys + ysh
        y[t, t] += ys + ysh
        y[f, t] -= ys
        y[t, f] -= ys
    return y


def variant_bus_ids(case: GridCase, variant: TopologyVariant) -> List[int]:
    """Bus ids indexing the rows of build_admittance for the given variant."""
    ids = [b.id for b in case.buses]
    if variant.kind == TopologyKind.FAULT_ON:
        ids.remove(variant.fault_bus)
    return ids


def build_admittance(case: GridCase, variant: Optional[TopologyVariant] = None) -> np.ndarray:
    """
    Build the bus admittance matrix of one topology variant.

    The fault-on variant drops the faulted bus (bolted fault, voltage fixed at zero);
    rows then follow variant_bus_ids.

    Args:
        case: Grid case
        variant: Topology variant; pre-fault when omitted

    Returns:
        Dense complex bus matrix in pu
    """
    variant = variant or TopologyVariant.pre_fault()
    y = _stamp_branches(case.n_bus, case.bus_index, _branches_in_service(case, variant))
    if variant.kind == TopologyKind.FAULT_ON:
        if variant.fault_bus not in case.bus_index:
            raise ContractError(f"Unknown fault bus: {variant.fault_bus}")
        k = case.bus_index[variant.fault_bus]
        y = np.delete(np.delete(y, k, axis=0), k, axis=1)
    return y


def kron_reduce(y: np.ndarray, keep: Sequence[int]) -> np.ndarray:
    """
    Eliminate every node not in keep by Schur complement.

    Args:
        y: Square complex admittance matrix
        keep: Indices of retained nodes, in output order

    Returns:
        Y_kk - Y_ke Y_ee^-1 Y_ek
    """
    keep = list(keep)
    elim = [i for i in range(y.shape[0]) if i not in set(keep)]
    if not elim:
        return y[np.ix_(keep, keep)].copy()
    y_ee = y[np.ix_(elim, elim)]
    if np.linalg.cond(y_ee) > REDUCTION_COND_LIMIT:
        raise ReductionError("Eliminated block is singular", details={"eliminated": len(elim)})
    try:
        x = scipy.linalg.solve(y_ee, y[np.ix_(elim, keep)])
    except (np.linalg.LinAlgError, ValueError) as e:
        raise ReductionError(f"Kron reduction failed: {e}") from e
    return y[np.ix_(keep, keep)] - y[np.ix_(keep, elim)] @ x


def _injection_schedule(case: GridCase, op: OperatingPoint) -> Tuple[np.ndarray, np.ndarray]:
    """Scheduled generation and load per bus (pu); slack generation left at zero."""
    if op.gen_p.shape[0] != len(case.controllable_gens):
        raise ContractError(
            "Operating point dimension does not match case",
            details={"expected": len(case.controllable_gens), "got": int(op.gen_p.shape[0])},
        )
    if op.load_scale.shape[0] != len(case.loads):
        raise ContractError("load_scale length does not match the number of loads")
    index = case.bus_index
    gen = np.zeros(case.n_bus, dtype=complex)
    for p, i in zip(op.gen_p, case.controllable_gens):
        gen[index[case.generators[i].bus]] += p / case.base_mva
    load = np.zeros(case.n_bus, dtype=complex)
    for scale, ld in zip(op.load_scale, case.loads):
        load[index[ld.bus]] += scale * complex(ld.p_mw, ld.q_mvar) / case.base_mva
    return gen, load


def _bus_classes(case: GridCase) -> Tuple[int, np.ndarray, np.ndarray]:
    index = case.bus_index
    ref = index[case.generators[case.slack_gen].bus]
    pv = sorted(index[case.generators[i].bus] for i in case.controllable_gens)
    pq = sorted(set(range(case.n_bus)) - set(pv) - {ref})
    return ref, np.array(pv, dtype=int), np.array(pq, dtype=int)


def _ds_dv(y: np.ndarray, v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Partial derivatives of bus injections w.r.t. voltage magnitude and angle."""
    current = y @ v
    v_norm = v / np.abs(v)
    ds_dvm = np.diag(v) @ np.conj(y @ np.diag(v_norm)) + np.conj(np.diag(current)) @ np.diag(v_norm)
    ds_dva = 1j * np.diag(v) @ np.conj(np.diag(current) - y @ np.diag(v))
    return ds_dvm, ds_dva


def solve_power_flow(
    case: GridCase,
    op: OperatingPoint,
    tol: float = PF_TOLERANCE,
    max_iter: int = PF_MAX_ITER,
) -> PowerFlowSolution:
    """
    Solve the AC power flow by full Newton iterations in polar form.

    Args:
        case: Grid case
        op: Operating point (controllable dispatch and load multipliers)
        tol: Mismatch infinity-norm tolerance (pu)
        max_iter: Iteration cap

    Returns:
        PowerFlowSolution; non-convergence is reported through the converged flag
    """
    gen, load = _injection_schedule(case, op)
    s_spec = gen - load
    y = build_admittance(case)
    ref, pv, pq = _bus_classes(case)
    pvpq = np.concatenate([pv, pq]).astype(int)
    n_pvpq = len(pvpq)

    vm = np.array([b.v_setpoint for b in case.buses], dtype=float)
    va = np.zeros(case.n_bus)
    v = vm * np.exp(1j * va)

    def residual(v_now: np.ndarray) -> np.ndarray:
        mis = v_now * np.conj(y @ v_now) - s_spec
        return np.concatenate([mis[pvpq].real, mis[pq].imag])

    converged = False
    iterations = 0
    norm = np.inf
    with np.errstate(all="ignore"):
        f = residual(v)
        norm = float(np.max(np.abs(f))) if f.size else 0.0
        converged = norm <= tol
        while not converged and iterations < max_iter and np.isfinite(norm):
            iterations += 1
            ds_dvm, ds_dva = _ds_dv(y, v)
            jac = np.block(
                [
                    [ds_dva[np.ix_(pvpq, pvpq)].real, ds_dvm[np.ix_(pvpq, pq)].real],
                    [ds_dva[np.ix_(pq, pvpq)].imag, ds_dvm[np.ix_(pq, pq)].imag],
                ]
            )
            try:
                dx = -scipy.linalg.solve(jac, f)
            except (np.linalg.LinAlgError, ValueError):
                norm = np.inf
                break
            va[pvpq] += dx[:n_pvpq]
            vm[pq] += dx[n_pvpq:]
            v = vm * np.exp(1j * va)
            f = residual(v)
            norm = float(np.max(np.abs(f))) if f.size else 0.0
            converged = bool(np.isfinite(norm) and norm <= tol)

    s_inj = v * np.conj(y @ v)
    index = case.bus_index
    gen_p = np.zeros(case.n_gen)
    gen_q = np.zeros(case.n_gen)
    for i, g in enumerate(case.generators):
        k = index[g.bus]
        s_gen = (s_inj[k] + load[k]) * case.base_mva
        gen_p[i] = s_gen.real if g.is_slack else gen[k].real * case.base_mva
        gen_q[i] = s_gen.imag
    slack_p = float(gen_p[case.slack_gen])

    if converged:
        logger.debug("Power flow converged", iterations=iterations, slack_p=round(slack_p, 4))
    else:
        logger.debug("Power flow did not converge", iterations=iterations, mismatch=norm)
    return PowerFlowSolution(
        bus_voltages=v,
        slack_p=slack_p,
        gen_p=gen_p,
        gen_q=gen_q,
        converged=bool(converged),
        iterations=iterations,
        mismatch=norm,
        load_s=load,
    )


def power_mismatch(case: GridCase, op: OperatingPoint, voltages: np.ndarray) -> np.ndarray:
    """
    Per-bus complex mismatch of the scheduled injections.

    Components that the power flow leaves free (slack P and Q, PV-bus Q) are zero.
    """
    gen, load = _injection_schedule(case, op)
    y = build_admittance(case)
    ref, pv, pq = _bus_classes(case)
    mis = voltages * np.conj(y @ voltages) - (gen - load)
    out = np.zeros(case.n_bus, dtype=complex)
    pvpq = np.concatenate([pv, pq]).astype(int)
    out[pvpq] += mis[pvpq].real
    out[pq] += 1j * mis[pq].imag
    return out


def check_static_limits(
    case: GridCase,
    sol: PowerFlowSolution,
    limits: Optional[StaticLimitsConfig] = None,
) -> StaticLimitsReport:
    """
    Screen a converged solution against voltage, reactive and slack limits.

    Args:
        case: Grid case
        sol: Converged power-flow solution
        limits: Optional voltage overrides and tolerance

    Returns:
        StaticLimitsReport listing every violation
    """
    if not sol.converged:
        raise ContractError("Static limits require a converged power flow")
    limits = limits or StaticLimitsConfig()
    tol = limits.tolerance
    violations: List[Violation] = []

    vmag = np.abs(sol.bus_voltages)
    for bus, value in zip(case.buses, vmag):
        v_min = limits.v_min if limits.v_min is not None else bus.v_min
        v_max = limits.v_max if limits.v_max is not None else bus.v_max
        if value < v_min - tol:
            violations.append(Violation(ViolationKind.VOLTAGE, bus.id, float(value), v_min))
        elif value > v_max + tol:
            violations.append(Violation(ViolationKind.VOLTAGE, bus.id, float(value), v_max))

    for i, g in enumerate(case.generators):
        q = float(sol.gen_q[i])
        if q < g.q_min - tol:
            violations.append(Violation(ViolationKind.GEN_Q, i, q, g.q_min))
        elif q > g.q_max + tol:
            violations.append(Violation(ViolationKind.GEN_Q, i, q, g.q_max))

    slack = case.generators[case.slack_gen]
    if sol.slack_p < slack.p_min - tol:
        violations.append(Violation(ViolationKind.SLACK_P, case.slack_gen, sol.slack_p, slack.p_min))
    elif sol.slack_p > slack.p_max + tol:
        violations.append(Violation(ViolationKind.SLACK_P, case.slack_gen, sol.slack_p, slack.p_max))

    return StaticLimitsReport(feasible=not violations, violations=tuple(violations))


def _augmented_matrix(case: GridCase, y_bus: np.ndarray, load_y: np.ndarray) -> np.ndarray:
    """Bus matrix with load shunts plus generator internal nodes appended after the buses."""
    n_bus, n_gen = case.n_bus, case.n_gen
    y = np.zeros((n_bus + n_gen, n_bus + n_gen), dtype=complex)
    y[:n_bus, :n_bus] = y_bus + np.diag(load_y)
    index = case.bus_index
    for i, g in enumerate(case.generators):
        k = index[g.bus]
        yg = 1.0 / (1j * g.xd_prime)
        y[k, k] += yg
        y[n_bus + i, n_bus + i] += yg
        y[k, n_bus + i] -= yg
        y[n_bus + i, k] -= yg
    return y


def reduced_matrices(
    case: GridCase,
    load_y: np.ndarray,
    cont: Optional[Contingency] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Pre-fault, fault-on and post-fault matrices reduced onto generator internal nodes.

    Without a contingency the fault-on and post-fault matrices equal the pre-fault one.
    """
    internal = list(range(case.n_bus, case.n_bus + case.n_gen))
    y_pre_aug = _augmented_matrix(case, build_admittance(case), load_y)
    y_pre = kron_reduce(y_pre_aug, internal)
    if cont is None:
        return y_pre, y_pre.copy(), y_pre.copy()

    if cont.fault_bus is not None:
        if cont.fault_bus not in case.bus_index:
            raise ContractError(f"Unknown fault bus: {cont.fault_bus}")
        k = case.bus_index[cont.fault_bus]
        y_fault_aug = np.delete(np.delete(y_pre_aug, k, axis=0), k, axis=1)
        y_fault = kron_reduce(y_fault_aug, [i - 1 for i in internal])
    else:
        y_fault = y_pre.copy()

    if cont.tripped_branch is not None:
        y_post_bus = build_admittance(case, TopologyVariant.post_fault(cont.tripped_branch))
        y_post = kron_reduce(_augmented_matrix(case, y_post_bus, load_y), internal)
    else:
        y_post = y_pre.copy()
    return y_pre, y_fault, y_post


def init_dynamic_state(
    case: GridCase,
    sol: PowerFlowSolution,
    cont: Optional[Contingency] = None,
) -> DynamicInit:
    """
    Classical-machine initialization from a converged power flow.

    Loads become constant shunt admittances; each generator gets an internal EMF
    behind its transient reactance.

    Args:
        case: Grid case
        sol: Converged, statically feasible solution
        cont: Contingency whose fault-on and post-fault matrices are reduced

    Returns:
        DynamicInit at equilibrium
    """
    if not sol.converged:
        raise ContractError("Dynamic initialization requires a converged power flow")
    v = sol.bus_voltages
    index = case.bus_index

    vmag2 = np.abs(v) ** 2
    load_y = np.zeros(case.n_bus, dtype=complex)
    loaded = np.abs(sol.load_s) > 0
    if np.any(loaded & (vmag2 <= 0)):
        raise DegenerateInitError("Load bus with zero voltage")
    load_y[loaded] = np.conj(sol.load_s[loaded]) / vmag2[loaded]

    emf = np.zeros(case.n_gen, dtype=complex)
    pm = np.zeros(case.n_gen)
    for i, g in enumerate(case.generators):
        vt = v[index[g.bus]]
        s_gen = complex(sol.gen_p[i], sol.gen_q[i]) / case.base_mva
        if abs(vt) <= 1e-12:
            raise DegenerateInitError(f"Generator {i} terminal voltage is zero")
        current = np.conj(s_gen / vt)
        emf[i] = vt + 1j * g.xd_prime * current
        pm[i] = s_gen.real
    if np.any(np.abs(emf) <= 0) or not np.all(np.isfinite(emf)):
        raise DegenerateInitError("Degenerate internal EMF")

    y_pre, y_fault, y_post = reduced_matrices(case, load_y, cont)
    return DynamicInit(
        emf_mag=np.abs(emf),
        delta0=np.angle(emf),
        omega0=np.ones(case.n_gen),
        pm=pm,
        y_pre=y_pre,
        y_fault=y_fault,
        y_post=y_post,
        inertia=case.inertia,
        damping=np.array([g.damping for g in case.generators], dtype=float),
    )


def initialize_operating_point(
    case: GridCase,
    op: OperatingPoint,
    cont: Optional[Contingency] = None,
    limits: Optional[StaticLimitsConfig] = None,
) -> DynamicInit:
    """
    Power flow, static screen and classical initialization in one call.

    Raises InfeasibleOperatingPointError when the power flow fails or a limit is violated.
    """
    sol = solve_power_flow(case, op)
    if not sol.converged:
        raise InfeasibleOperatingPointError(
            "Power flow did not converge", details={"mismatch": sol.mismatch}
        )
    report = check_static_limits(case, sol, limits)
    if not report.feasible:
        raise InfeasibleOperatingPointError(
            "Static limits violated",
            details={"violations": [v.kind.value for v in report.violations]},
        )
    return init_dynamic_state(case, sol, cont)
