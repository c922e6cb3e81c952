import enum

from sqlalchemy import Boolean, Column, DateTime, Float, Integer, String, Text, UniqueConstraint
from sqlalchemy.sql import func

from tsb_monitor.db.base import Base


class Label(str, enum.Enum):
    STABLE = "stable"
    UNSTABLE = "unstable"
    INFEASIBLE = "infeasible"


class Provenance(str, enum.Enum):
    SEED = "seed"
    ROUTE1 = "route1"
    ROUTE2_BISECT = "route2_bisect"
    ROUTE3_TRAVERSE = "route3_traverse"
    GAP_RESAMPLE = "gap_resample"
    RANDOM = "random"
    LHS = "lhs"
    ORACLE = "oracle"


# Collector ordering of a finished sample set
PROVENANCE_ORDER = {p: i for i, p in enumerate(Provenance)}


class Verdict(str, enum.Enum):
    SECURE = "secure"
    MARGINAL = "marginal"
    INSECURE = "insecure"


class TopologyKind(str, enum.Enum):
    PRE_FAULT = "pre_fault"
    FAULT_ON = "fault_on"
    POST_FAULT = "post_fault"


class GradientMethod(str, enum.Enum):
    ADJOINT = "adjoint"
    FINITE_DIFFERENCE = "finite_difference"


class ViolationKind(str, enum.Enum):
    VOLTAGE = "voltage"
    GEN_Q = "gen_q"
    SLACK_P = "slack_p"


class PlotKind(str, enum.Enum):
    SEARCH_PATHS = "search_paths"
    BOUNDARY_CURVE = "boundary_curve"
    GRADIENT_FIELD = "gradient_field"
    CLUSTER_HEATMAP = "cluster_heatmap"
    REFRESH_SERIES = "refresh_series"


class OraclePointRecord(Base):
    """One evaluated lattice point of a brute-force oracle run."""

    __tablename__ = "oracle_points"
    __table_args__ = (UniqueConstraint("run_key", "point_index", name="uq_run_point"),)

    id = Column(Integer, primary_key=True, index=True)
    run_key = Column(String(64), nullable=False, index=True)
    point_index = Column(Integer, nullable=False)
    coords = Column(Text, nullable=False)
    feasible = Column(Boolean, nullable=False)
    stable = Column(Boolean, nullable=True)
    phi = Column(Float, nullable=True)
    created_at = Column(DateTime(timezone=True), server_default=func.now())
