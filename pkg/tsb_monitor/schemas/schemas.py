import math
from datetime import datetime
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from tsb_monitor.models.models import Label, Provenance, Verdict


# Case file schemas
class CaseBus(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: int
    v_setpoint: float = Field(1.0, gt=0)
    v_min: float = Field(0.9, gt=0)
    v_max: float = Field(1.1, gt=0)


class CaseBranch(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    id: Optional[str] = None
    from_bus: int = Field(..., alias="from")
    to_bus: int = Field(..., alias="to")
    r: float = Field(0.0, ge=0)
    x: float
    b: float = 0.0
    rating: Optional[float] = None

    @field_validator("x")
    @classmethod
    def nonzero_impedance(cls, value: float) -> float:
        if value == 0.0:
            raise ValueError("branch reactance must be nonzero")
        return value


class CaseGenerator(BaseModel):
    model_config = ConfigDict(extra="forbid")

    bus: int
    tj: float = Field(..., gt=0, description="Inertia time constant T_J (s)")
    xd_prime: float = Field(..., gt=0, description="Transient reactance (pu)")
    damping: float = Field(0.0, ge=0)
    p_min: float
    p_max: float
    q_min: float = -9999.0
    q_max: float = 9999.0
    slack: bool = False
    p_setpoint: Optional[float] = None

    @model_validator(mode="after")
    def check_limits(self) -> "CaseGenerator":
        if self.p_min > self.p_max:
            raise ValueError("p_min must not exceed p_max")
        if self.q_min > self.q_max:
            raise ValueError("q_min must not exceed q_max")
        return self


class CaseLoad(BaseModel):
    model_config = ConfigDict(extra="forbid")

    bus: int
    p_mw: float
    q_mvar: float = 0.0


class CaseFile(BaseModel):
    """Case JSON document; impedances in pu on base_mva."""

    model_config = ConfigDict(extra="forbid")

    name: str = "case"
    base_mva: float = Field(..., gt=0)
    buses: List[CaseBus] = Field(..., min_length=1)
    branches: List[CaseBranch] = []
    generators: List[CaseGenerator] = Field(..., min_length=1)
    loads: List[CaseLoad] = []


# Configuration schemas
class SimConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    t_end: float = Field(5.0, gt=0, description="Simulation window T (s)")
    dt: float = Field(0.005, gt=0, description="Fixed RK4 step (s)")
    delta_max: float = Field(math.pi, description="Rotor-angle bound around COI (rad)")
    omega_s: float = Field(2.0 * math.pi * 60.0, gt=0, description="Synchronous speed (rad/s)")
    softmax_temperature: Optional[float] = Field(
        None, gt=0, description="Smooth max over generators; None evaluates the exact max"
    )
    sensitivity_step_mw: float = Field(
        0.1, gt=0, description="Finite-difference step of the initialization Jacobians (MW)"
    )

    @field_validator("delta_max")
    @classmethod
    def check_delta_max(cls, value: float) -> float:
        if not 0.0 < value <= math.pi:
            raise ValueError("delta_max must lie in (0, pi]")
        return value

    @model_validator(mode="after")
    def check_window(self) -> "SimConfig":
        if self.dt >= self.t_end:
            raise ValueError("dt must be smaller than t_end")
        return self


class SamplerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_seeds: int = Field(20, ge=1)
    nu_min: float = Field(0.01, gt=0, le=1)
    nu_max: float = Field(0.2, gt=0, le=1)
    phi_ref: Optional[float] = Field(None, gt=0, description="Index scale; None uses the first seed")
    phi_cri: float = Field(0.5, gt=0)
    gamma_cri: Optional[float] = Field(
        None, gt=0, description="Termination threshold (MW^2); None uses (0.01 * max u_max)^2"
    )
    max_route_steps: int = Field(6, ge=0, description="Route-3 traversal points per critical sample")
    max_descent_steps: int = Field(25, ge=1, description="Route-1 steps per seed")
    traverse_step: float = Field(0.03, gt=0, le=1, description="Traversal step as a fraction of u_max")
    bisect_width_mw: float = Field(0.1, gt=0)
    resample_rounds: int = Field(4, ge=0)
    resample_n_new: int = Field(8, ge=1)
    resample_chords: int = Field(256, ge=1)
    max_samples: int = Field(300, ge=1, description="Budget of TDS-evaluated samples")
    load_band: Tuple[float, float] = (0.9, 1.1)
    rng_seed: int = 0

    @model_validator(mode="after")
    def check_steps(self) -> "SamplerConfig":
        if self.nu_min > self.nu_max:
            raise ValueError("nu_min must not exceed nu_max")
        low, high = self.load_band
        if not 0 < low <= high:
            raise ValueError("load_band must satisfy 0 < low <= high")
        return self


class StaticLimitsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    v_min: Optional[float] = Field(None, gt=0, description="Overrides every bus v_min")
    v_max: Optional[float] = Field(None, gt=0, description="Overrides every bus v_max")
    tolerance: float = Field(1e-6, ge=0)


class Thresholds(BaseModel):
    model_config = ConfigDict(extra="forbid")

    margin: Optional[float] = Field(
        None, ge=0, description="Decision-value margin; None calibrates it on the training samples"
    )
    forecast_band: float = Field(0.03, ge=0, description="Relative band of uncontrollable loads")
    search_half_width_mw: float = Field(40.0, gt=0)
    top_k_mcg: int = Field(2, ge=1)
    max_clusters: int = Field(8, ge=2)


# Sample persistence
class SampleRecord(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    op: List[float]
    load_scale: List[float]
    contingency_id: str
    phi: Optional[float] = None
    lambda_: Optional[int] = Field(None, alias="lambda")
    label: Label
    grad: Optional[List[float]] = None
    provenance: Provenance
    critical: bool = False
    seed_index: int = 0
    step_index: int = 0


class SampleSetSidecar(BaseModel):
    case_ref: str
    contingency_id: str
    sampler: SamplerConfig
    sim: SimConfig
    n_samples: int


# Boundary model persistence
class FeatureScale(BaseModel):
    mean: List[float]
    spread: List[float]


class SupportVector(BaseModel):
    point: List[float]
    coeff: float


class BoundaryModelRecord(BaseModel):
    contingency_id: str
    kernel_gamma: float
    C: float
    bias: float
    feature_scale: FeatureScale
    supports: List[SupportVector]
    training_accuracy: float
    margin: Optional[float] = None


class GridSpecRecord(BaseModel):
    lower: List[float]
    upper: List[float]
    interval: float = Field(..., gt=0)


class LabeledGridRecord(BaseModel):
    contingency_id: str
    grid_spec: GridSpecRecord
    points: List[List[float]]
    stable: List[bool]
    phi: List[float]
    infeasible_points: List[List[float]] = []


# Scenario artifacts
class GaussianRecord(BaseModel):
    cluster_id: int
    mu: List[float]
    sigma: List[List[float]]
    log_norm: float


class McgRecord(BaseModel):
    cluster_id: int
    ranked_generators: List[int]
    top_k: int


class ContingencyArtifacts(BaseModel):
    contingency_id: str
    fault_bus: Optional[int]
    tripped_branch: Optional[str]
    t_clear: float
    assignments: List[int]
    eigenvalues: List[float] = []
    representatives: List[int]
    gaussians: List[GaussianRecord]
    mcg: List[McgRecord]
    psi: List[List[float]]
    phi: List[float]
    lambdas: List[int]


class OfflineArtifacts(BaseModel):
    case_ref: str
    seed: int
    ops: List[List[float]]
    load_scales: List[List[float]]
    excluded_ops: List[int] = []
    contingencies: List[ContingencyArtifacts]
    contingency_assignments: List[int]
    representative_contingencies: List[str]


# Monitoring
class RefreshSchedule(BaseModel):
    period: float = Field(..., gt=0, description="Refresh period in simulated seconds")
    times: List[float]
    load_scale: List[float] = Field(..., description="System-wide load multiplier per time")
    search_box: Optional[List[float]] = Field(
        None, description="Per-MCG gen_p half-widths (MW); None uses the configured default"
    )

    @model_validator(mode="after")
    def check_profile(self) -> "RefreshSchedule":
        if len(self.times) != len(self.load_scale) or not self.times:
            raise ValueError("times and load_scale must be nonempty and of equal length")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("times must be strictly increasing")
        return self

    def load_at(self, t: float) -> float:
        """Piecewise-linear load level at simulated time t."""
        if t <= self.times[0]:
            return self.load_scale[0]
        for (t0, l0), (t1, l1) in zip(
            zip(self.times, self.load_scale), zip(self.times[1:], self.load_scale[1:])
        ):
            if t0 <= t <= t1:
                return l0 + (l1 - l0) * (t - t0) / (t1 - t0)
        return self.load_scale[-1]


class AssessmentReport(BaseModel):
    timestamp: datetime
    simulated_time: Optional[float] = None
    load_level: Optional[float] = None
    matched_cluster: Dict[str, int] = {}
    mcgs: Dict[str, List[int]] = {}
    boundary_model_ref: List[str] = []
    current_op: List[float] = []
    current_op_decision_value: float
    margin_threshold: float
    verdict: Verdict
    samples_used: int = 0
    unstable_fraction: Optional[float] = None
    wall_time: float = 0.0


class OperatingPointRecord(BaseModel):
    gen_p: List[float]
    load_scale: Optional[List[float]] = None


class GapResampleRecord(BaseModel):
    ops: List[List[float]]
    gammas: List[float]
    gamma_cri: float
    terminate: bool


class PartitionRecord(BaseModel):
    element_ids: List[str]
    assignments: List[int]
    k: int
    eigenvalues: List[float] = []
    representatives: List[int] = []


class ClusterHeatmapRecord(BaseModel):
    contingency_id: str
    order: List[int]
    assignments: List[int]
    spearman: List[List[float]]
