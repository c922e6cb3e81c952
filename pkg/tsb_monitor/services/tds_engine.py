# Time-domain simulation of the classical swing dynamics

from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from tsb_monitor.core.exceptions import ConfigError, ContractError, TopologyError
from tsb_monitor.core.logger import get_logger
from tsb_monitor.models.domain import (
    Contingency,
    DynamicInit,
    GeneratorParams,
    GridCase,
    StabilityVerdict,
    Trajectory,
    TopologyVariant,
)
from tsb_monitor.schemas.schemas import SimConfig
from tsb_monitor.services.grid_model import build_admittance

logger = get_logger(__name__)

GRID_TOLERANCE = 1e-9


def electrical_power(emf_mag: np.ndarray, delta: np.ndarray, y_red: np.ndarray) -> np.ndarray:
    """Pe_i = sum_j E_i E_j (G_ij cos d_ij + B_ij sin d_ij), in pu."""
    e = emf_mag * np.exp(1j * delta)
    return np.real(e * np.conj(y_red @ e))


def swing_rhs(
    delta: np.ndarray,
    omega: np.ndarray,
    init: DynamicInit,
    y_red: np.ndarray,
    omega_s: float,
):
    """Right-hand side of the swing equations for one network matrix."""
    pe = electrical_power(init.emf_mag, delta, y_red)
    d_delta = omega_s * (omega - 1.0)
    d_omega = (init.pm - pe - init.damping * (omega - 1.0)) / init.inertia
    return d_delta, d_omega


def clearing_step(cont: Optional[Contingency], cfg: SimConfig) -> int:
    """Grid index of the clearing time; the fault-on matrix applies to steps before it."""
    if cont is None:
        return 0
    if cont.t_clear <= 0:
        raise ConfigError("t_clear must be positive")
    if cfg.dt > cont.t_clear:
        raise ConfigError("dt must not exceed t_clear", details={"dt": cfg.dt, "t_clear": cont.t_clear})
    if cfg.t_end <= cont.t_clear:
        raise ConfigError("t_end must exceed t_clear")
    n_clear = int(round(cont.t_clear / cfg.dt))
    if abs(n_clear * cfg.dt - cont.t_clear) > GRID_TOLERANCE * max(1.0, cont.t_clear):
        raise ConfigError(
            "dt must divide t_clear", details={"dt": cfg.dt, "t_clear": cont.t_clear}
        )
    return n_clear


def phase_matrix(init: DynamicInit, step: int, n_clear: int) -> np.ndarray:
    """Network matrix in force over the interval starting at the given step."""
    return init.y_fault if step < n_clear else init.y_post


def coi_series(delta: Union[Trajectory, np.ndarray], gens: Union[Sequence[GeneratorParams], np.ndarray]) -> np.ndarray:
    """
    Inertia-weighted mean rotor angle per time step.

    Args:
        delta: Trajectory, or an N_steps x N_G angle matrix
        gens: Generator parameters, or their inertia constants T_J

    Returns:
        COI angle per step (rad)
    """
    angles = delta.delta if isinstance(delta, Trajectory) else np.asarray(delta, dtype=float)
    if len(gens) and isinstance(gens[0], GeneratorParams):
        tj = np.array([g.inertia_tj for g in gens], dtype=float)
    else:
        tj = np.asarray(gens, dtype=float)
    if angles.shape[-1] != tj.shape[0]:
        raise ContractError("Angle matrix and generator list dimensions differ")
    return angles @ tj / tj.sum()


def simulate(init: DynamicInit, cont: Optional[Contingency], cfg: SimConfig) -> Trajectory:
    """
    Fixed-step RK4 integration of the post-contingency swing dynamics.

    The fault-on matrix applies on [0, t_clear), the post-fault matrix afterwards;
    t_clear must fall on the grid. Without a contingency the pre-fault matrix is used
    throughout.

    Args:
        init: Dynamic initialization (reduced matrices must match cont)
        cont: Contingency, or None for an undisturbed run
        cfg: Simulation settings

    Returns:
        Trajectory; truncated and flagged divergent if the state becomes non-finite
    """
    n_clear = clearing_step(cont, cfg)
    n_steps = int(round(cfg.t_end / cfg.dt))
    dt = cfg.dt
    n_gen = init.n_gen

    delta = np.empty((n_steps + 1, n_gen))
    omega = np.empty((n_steps + 1, n_gen))
    delta[0] = init.delta0
    omega[0] = init.omega0
    diverged = False
    last = n_steps

    with np.errstate(all="ignore"):
        for k in range(n_steps):
            y_red = init.y_pre if cont is None else phase_matrix(init, k, n_clear)
            d0, w0 = delta[k], omega[k]
            k1d, k1w = swing_rhs(d0, w0, init, y_red, cfg.omega_s)
            k2d, k2w = swing_rhs(d0 + 0.5 * dt * k1d, w0 + 0.5 * dt * k1w, init, y_red, cfg.omega_s)
            k3d, k3w = swing_rhs(d0 + 0.5 * dt * k2d, w0 + 0.5 * dt * k2w, init, y_red, cfg.omega_s)
            k4d, k4w = swing_rhs(d0 + dt * k3d, w0 + dt * k3w, init, y_red, cfg.omega_s)
            delta[k + 1] = d0 + dt / 6.0 * (k1d + 2 * k2d + 2 * k3d + k4d)
            omega[k + 1] = w0 + dt / 6.0 * (k1w + 2 * k2w + 2 * k3w + k4w)
            if not (np.all(np.isfinite(delta[k + 1])) and np.all(np.isfinite(omega[k + 1]))):
                diverged = True
                last = k
                break

    times = np.arange(last + 1) * dt
    delta = delta[: last + 1]
    omega = omega[: last + 1]
    if diverged:
        logger.warning("Simulation diverged", t=float(times[-1]))
    return Trajectory(
        times=times,
        delta=delta,
        omega=omega,
        coi=coi_series(delta, init.inertia),
        diverged=diverged,
        t_clear=cont.t_clear if cont is not None else 0.0,
    )


def classify_stability(traj: Trajectory, cfg: SimConfig) -> StabilityVerdict:
    """
    Apply the rotor-angle bound around the COI over the whole window.

    Args:
        traj: Simulated trajectory
        cfg: Simulation settings (delta_max)

    Returns:
        StabilityVerdict; divergent trajectories are always unstable
    """
    excursion = np.abs(traj.delta - traj.coi[:, None]).max(axis=1)
    max_excursion = float(excursion.max()) if excursion.size else 0.0
    violating = np.flatnonzero(excursion > cfg.delta_max)
    if violating.size:
        return StabilityVerdict(False, -1, float(traj.times[violating[0]]), max_excursion)
    if traj.diverged:
        return StabilityVerdict(False, -1, float(traj.times[-1]), max_excursion)
    return StabilityVerdict(True, 1, None, max_excursion)


def write_trajectory_csv(traj: Trajectory, path: Union[str, Path]) -> None:
    """Export t, delta_1..N, omega_1..N, coi as CSV (seconds, rad, pu)."""
    n_gen = traj.delta.shape[1]
    header = ["t"]
    header += [f"delta_{i + 1}" for i in range(n_gen)]
    header += [f"omega_{i + 1}" for i in range(n_gen)]
    header.append("coi")
    data = np.column_stack([traj.times, traj.delta, traj.omega, traj.coi])
    np.savetxt(path, data, delimiter=",", header=",".join(header), comments="", fmt="%.10g")


def make_contingency(
    case: GridCase,
    fault_bus: Optional[int],
    tripped_branch: Optional[str],
    t_clear: float,
    require_adjacent: bool = True,
) -> Contingency:
    """
    Validated contingency: the fault bus must terminate the tripped branch unless relaxed.
    """
    if fault_bus is not None and fault_bus not in case.bus_index:
        raise ContractError(f"Unknown fault bus: {fault_bus}")
    if tripped_branch is not None:
        try:
            branch = case.branch(tripped_branch)
        except KeyError:
            raise ContractError(f"Unknown branch: {tripped_branch}")
        if require_adjacent and fault_bus is not None and fault_bus not in (branch.from_bus, branch.to_bus):
            raise ContractError(
                f"Fault bus {fault_bus} is not an endpoint of branch {tripped_branch}"
            )
    if t_clear <= 0:
        raise ConfigError("t_clear must be positive")
    return Contingency(
        id=f"f{fault_bus}-t{tripped_branch}",
        fault_bus=fault_bus,
        tripped_branch=tripped_branch,
        t_clear=t_clear,
    )


def contingencies_for_case(case: GridCase, t_clear: float) -> List[Contingency]:
    """
    N-1 list: a fault at each end of every branch whose removal keeps the grid connected.
    """
    result = []
    for br in case.branches:
        try:
            build_admittance(case, TopologyVariant.post_fault(br.id))
        except TopologyError:
            logger.debug("Skipping islanding branch", branch=br.id)
            continue
        for bus in (br.from_bus, br.to_bus):
            result.append(make_contingency(case, bus, br.id, t_clear))
    logger.info("Contingency list built", count=len(result))
    return result
