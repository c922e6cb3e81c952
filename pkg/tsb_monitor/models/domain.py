"""Numeric domain types shared by the services.

Arrays are numpy; powers are MW/MVAr unless a field says pu.
"""

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from tsb_monitor.models.models import (
    GradientMethod,
    Label,
    Provenance,
    TopologyKind,
    ViolationKind,
)


@dataclass(frozen=True)
class Bus:
    id: int
    v_setpoint: float = 1.0
    v_min: float = 0.9
    v_max: float = 1.1


@dataclass(frozen=True)
class Branch:
    id: str
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0
    rating: Optional[float] = None


@dataclass(frozen=True)
class GeneratorParams:
    bus: int
    inertia_tj: float
    xd_prime: float
    damping: float
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    is_slack: bool = False
    p_setpoint: Optional[float] = None


@dataclass(frozen=True)
class Load:
    bus: int
    p_mw: float
    q_mvar: float


@dataclass(frozen=True)
class GridCase:
    name: str
    base_mva: float
    buses: Tuple[Bus, ...]
    branches: Tuple[Branch, ...]
    generators: Tuple[GeneratorParams, ...]
    loads: Tuple[Load, ...]

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @property
    def bus_index(self) -> Dict[int, int]:
        return {bus.id: i for i, bus in enumerate(self.buses)}

    @property
    def slack_gen(self) -> int:
        return next(i for i, g in enumerate(self.generators) if g.is_slack)

    @property
    def controllable_gens(self) -> List[int]:
        """Generator indices of the controllable (non-slack) units, in case order."""
        return [i for i, g in enumerate(self.generators) if not g.is_slack]

    @property
    def inertia(self) -> np.ndarray:
        return np.array([g.inertia_tj for g in self.generators], dtype=float)

    def branch(self, branch_id: str) -> Branch:
        for br in self.branches:
            if br.id == branch_id:
                return br
        raise KeyError(branch_id)


@dataclass(frozen=True)
class OperatingPoint:
    """Controllable gen_p over non-slack generators (MW) plus per-load multipliers."""

    gen_p: np.ndarray
    load_scale: np.ndarray

    def with_gen_p(self, gen_p: np.ndarray) -> "OperatingPoint":
        return replace(self, gen_p=np.asarray(gen_p, dtype=float))

    @property
    def dim(self) -> int:
        return int(self.gen_p.shape[0])


@dataclass(frozen=True)
class PowerFlowSolution:
    bus_voltages: np.ndarray
    slack_p: float
    gen_p: np.ndarray
    gen_q: np.ndarray
    converged: bool
    iterations: int
    mismatch: float
    load_s: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=complex))


@dataclass(frozen=True)
class Violation:
    kind: ViolationKind
    element: int
    value: float
    bound: float


@dataclass(frozen=True)
class StaticLimitsReport:
    feasible: bool
    violations: Tuple[Violation, ...] = ()


@dataclass(frozen=True)
class TopologyVariant:
    kind: TopologyKind
    fault_bus: Optional[int] = None
    tripped_branch: Optional[str] = None

    @classmethod
    def pre_fault(cls) -> "TopologyVariant":
        return cls(TopologyKind.PRE_FAULT)

    @classmethod
    def fault_on(cls, bus: int) -> "TopologyVariant":
        return cls(TopologyKind.FAULT_ON, fault_bus=bus)

    @classmethod
    def post_fault(cls, branch_id: Optional[str]) -> "TopologyVariant":
        return cls(TopologyKind.POST_FAULT, tripped_branch=branch_id)


@dataclass(frozen=True)
class DynamicInit:
    """Classical-model initial state and the reduced matrices of the three phases (pu)."""

    emf_mag: np.ndarray
    delta0: np.ndarray
    omega0: np.ndarray
    pm: np.ndarray
    y_pre: np.ndarray
    y_fault: np.ndarray
    y_post: np.ndarray
    inertia: np.ndarray
    damping: np.ndarray

    @property
    def y_reduced(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.y_pre, self.y_fault, self.y_post

    @property
    def n_gen(self) -> int:
        return int(self.emf_mag.shape[0])


@dataclass(frozen=True)
class Contingency:
    id: str
    fault_bus: Optional[int]
    tripped_branch: Optional[str]
    t_clear: float


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    delta: np.ndarray
    omega: np.ndarray
    coi: np.ndarray
    diverged: bool = False
    t_clear: float = 0.0

    @property
    def n_steps(self) -> int:
        return int(self.times.shape[0])

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if self.n_steps > 1 else 0.0


@dataclass(frozen=True)
class StabilityVerdict:
    stable: bool
    lam: int
    first_violation_time: Optional[float]
    max_excursion: float


@dataclass(frozen=True)
class IndexResult:
    phi: float
    lam: int
    argmax_gen: np.ndarray
    clip_mask: np.ndarray
    theta: np.ndarray


@dataclass(frozen=True)
class GradientResult:
    grad: np.ndarray
    method: GradientMethod
    costate_terminal_norm: float = 0.0
    diverged: bool = False
    one_sided: Tuple[bool, ...] = ()
    phi: Optional[float] = None


@dataclass(frozen=True)
class Sample:
    op: OperatingPoint
    contingency_id: str
    label: Label
    provenance: Provenance
    phi: Optional[float] = None
    lam: Optional[int] = None
    grad: Optional[np.ndarray] = None
    critical: bool = False
    seed_index: int = 0
    step_index: int = 0

    @property
    def feasible(self) -> bool:
        return self.label != Label.INFEASIBLE

    @property
    def u(self) -> np.ndarray:
        return self.op.gen_p


@dataclass
class SampleSet:
    samples: List[Sample]
    case_ref: str
    contingency_id: str
    config: object = None

    def feasible(self) -> List[Sample]:
        return [s for s in self.samples if s.feasible]

    def critical(self) -> List[Sample]:
        return [s for s in self.samples if s.feasible and s.critical]

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class GridSpec:
    lower: np.ndarray
    upper: np.ndarray
    interval: float

    def axes(self) -> List[np.ndarray]:
        axes = []
        for lo, hi in zip(self.lower, self.upper):
            count = int(np.floor((hi - lo) / self.interval + 1e-9)) + 1
            axes.append(lo + self.interval * np.arange(count))
        return axes

    def lattice(self) -> np.ndarray:
        """All lattice points, last coordinate fastest."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass(frozen=True)
class LabeledGrid:
    points: np.ndarray
    stable: np.ndarray
    phi: np.ndarray
    grid_spec: GridSpec
    infeasible_points: np.ndarray
    contingency_id: str = ""


@dataclass(frozen=True)
class SensitivityMatrix:
    contingency_id: str
    rows: np.ndarray
    op_refs: Tuple[str, ...]
    phi: np.ndarray
    lambdas: np.ndarray
    excluded: Tuple[int, ...] = ()


@dataclass(frozen=True)
class Partition:
    assignments: np.ndarray
    k: int
    eigenvalues: Optional[np.ndarray] = None

    def members(self, cluster_id: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == cluster_id)


@dataclass(frozen=True)
class ClusterGaussian:
    mu: np.ndarray
    sigma: np.ndarray
    log_norm: float
    cluster_id: int = 0


@dataclass(frozen=True)
class McgRanking:
    cluster_id: int
    ranked_generators: Tuple[int, ...]
    top_k: int = 2

    @property
    def top(self) -> Tuple[int, ...]:
        return self.ranked_generators[: self.top_k]


@dataclass(frozen=True)
class BoundaryModel:
    """RBF-kernel decision function over standardized inputs; positive means stable."""

    contingency_id: str
    kernel_gamma: float
    C: float
    bias: float
    feature_mean: np.ndarray
    feature_spread: np.ndarray
    support_points: np.ndarray
    support_coeffs: np.ndarray
    training_accuracy: float = 0.0
    margin: Optional[float] = None

    @property
    def dim(self) -> int:
        return int(self.feature_mean.shape[0])

    def decision_values(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.support_points.shape[0] == 0:
            return np.full(points.shape[0], self.bias)
        z = (points - self.feature_mean) / self.feature_spread
        s = (self.support_points - self.feature_mean) / self.feature_spread
        sq = (z**2).sum(axis=1)[:, None] + (s**2).sum(axis=1)[None, :] - 2.0 * z @ s.T
        kernel = np.exp(-self.kernel_gamma * np.maximum(sq, 0.0))
        return kernel @ self.support_coeffs + self.bias
