# Scenario reduction: operating-point and contingency clustering, Gaussian matching, MCGs

from functools import partial
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, eigh
from scipy.sparse.csgraph import connected_components
from scipy.stats import rankdata
from sklearn.cluster import KMeans
from sklearn.metrics import adjusted_rand_score

from tsb_monitor.core.exceptions import ContractError, FitError
from tsb_monitor.core.logger import get_logger
from tsb_monitor.models.domain import (
    ClusterGaussian,
    Contingency,
    GridCase,
    McgRanking,
    OperatingPoint,
    Partition,
    Sample,
    SensitivityMatrix,
)
from tsb_monitor.models.models import Provenance
from tsb_monitor.schemas.schemas import SimConfig, StaticLimitsConfig
from tsb_monitor.services.stability_index import OperatingPointEvaluator
from tsb_monitor.utils.hashing import op_ref
from tsb_monitor.utils.parallel import ordered_map

logger = get_logger(__name__)

EIGENGAP_WINDOW = 10
MIN_CLUSTERS = 2
MAX_CLUSTERS = 8
KMEANS_N_INIT = 10
REGULARIZATION = 1e-6
AFFINITY_ZERO = 1e-12

Evaluator = Callable[[OperatingPoint, Provenance, bool], Sample]


def _evaluate_row(evaluator: Evaluator, op: OperatingPoint) -> Sample:
    return evaluator(op, Provenance.SEED, True)


def build_sensitivity_matrix(
    case: GridCase,
    ops: Sequence[OperatingPoint],
    contingency: Contingency,
    cfg: SimConfig,
    limits: Optional[StaticLimitsConfig] = None,
    workers: int = 1,
    evaluator: Optional[Evaluator] = None,
) -> SensitivityMatrix:
    """
    Index gradient of every operating point under one contingency.

    Infeasible points, and points whose gradient is not finite, are excluded and
    reported by position in ops.

    Args:
        case: Grid case
        ops: Operating-point pool
        contingency: Contingency
        cfg: Simulation settings
        limits: Static screen
        workers: Worker processes
        evaluator: Replacement (op, provenance, with_gradient) -> Sample

    Returns:
        SensitivityMatrix with one row per retained operating point
    """
    evaluator = evaluator or OperatingPointEvaluator(case, contingency, cfg, limits)
    samples = ordered_map(partial(_evaluate_row, evaluator), list(ops), workers)

    rows, refs, phi, lambdas, excluded = [], [], [], [], []
    for i, sample in enumerate(samples):
        grad = None if sample.grad is None else np.asarray(sample.grad, dtype=float)
        if not sample.feasible or grad is None or not np.all(np.isfinite(grad)):
            excluded.append(i)
            continue
        rows.append(grad)
        refs.append(op_ref(sample.op.gen_p, sample.op.load_scale))
        phi.append(float(sample.phi))
        lambdas.append(int(sample.lam))
    if excluded:
        logger.warning(
            "Operating points excluded from sensitivity matrix",
            contingency=contingency.id,
            excluded=len(excluded),
        )
    if len(rows) < 2:
        raise FitError(
            "Sensitivity matrix needs at least two feasible operating points",
            details={"contingency": contingency.id, "usable": len(rows)},
        )
    return SensitivityMatrix(
        contingency_id=contingency.id,
        rows=np.vstack(rows),
        op_refs=tuple(refs),
        phi=np.array(phi),
        lambdas=np.array(lambdas, dtype=int),
        excluded=tuple(excluded),
    )


def spearman_matrix(psi: Union[SensitivityMatrix, np.ndarray]) -> np.ndarray:
    """
    Rank correlation between every pair of gradient rows (average ranks on ties).

    A constant row has no rank variance; its correlations are set to 0 off the diagonal.

    Args:
        psi: Sensitivity matrix or raw N_u x N_gen array

    Returns:
        Symmetric N_u x N_u matrix with unit diagonal
    """
    rows = psi.rows if isinstance(psi, SensitivityMatrix) else np.asarray(psi, dtype=float)
    if rows.ndim != 2 or rows.shape[1] < 2:
        raise ContractError("Rank correlation needs at least two gradient components")
    ranks = rankdata(rows, method="average", axis=1)
    centered = ranks - ranks.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centered, axis=1)
    constant = norms == 0.0
    if constant.any():
        logger.warning("Constant gradient rows in rank correlation", rows=int(constant.sum()))
    safe = np.where(constant, 1.0, norms)
    unit = centered / safe[:, None]
    sc = np.clip(unit @ unit.T, -1.0, 1.0)
    sc[constant, :] = 0.0
    sc[:, constant] = 0.0
    np.fill_diagonal(sc, 1.0)
    return sc


def normalized_laplacian(affinity: np.ndarray) -> np.ndarray:
    """L_sym = I - D^-1/2 W D^-1/2; isolated nodes keep a unit diagonal."""
    degree = affinity.sum(axis=1)
    inv_sqrt = np.zeros_like(degree)
    positive = degree > 0
    inv_sqrt[positive] = 1.0 / np.sqrt(degree[positive])
    return np.eye(affinity.shape[0]) - inv_sqrt[:, None] * affinity * inv_sqrt[None, :]


def eigengap_k(eigenvalues: np.ndarray, max_clusters: int = MAX_CLUSTERS) -> int:
    """Cluster count at the largest gap among the smallest Laplacian eigenvalues."""
    window = eigenvalues[: min(EIGENGAP_WINDOW, eigenvalues.shape[0])]
    upper = min(max_clusters, window.shape[0] - 1)
    if upper < MIN_CLUSTERS:
        return min(MIN_CLUSTERS, eigenvalues.shape[0])
    gaps = [window[k] - window[k - 1] for k in range(MIN_CLUSTERS, upper + 1)]
    return MIN_CLUSTERS + int(np.argmax(gaps))


def canonical_labels(labels: np.ndarray) -> np.ndarray:
    """Relabel clusters 0..k-1 in order of first appearance."""
    mapping = {}
    out = np.empty(len(labels), dtype=int)
    for i, label in enumerate(labels):
        out[i] = mapping.setdefault(int(label), len(mapping))
    return out


def spectral_cluster(
    affinity: np.ndarray,
    k: Optional[int] = None,
    seed: int = 0,
    max_clusters: int = MAX_CLUSTERS,
) -> Partition:
    """
    Normalized spectral clustering of a nonnegative affinity matrix.

    Args:
        affinity: Symmetric nonnegative matrix
        k: Cluster count; None picks it by the eigengap heuristic
        seed: k-means random state
        max_clusters: Upper bound of the eigengap search

    Returns:
        Partition with labels in order of first appearance
    """
    w = np.asarray(affinity, dtype=float)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ContractError("Affinity must be a square matrix")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ContractError("Affinity entries must be finite and nonnegative")
    n = w.shape[0]
    if k is not None and not 1 <= k <= n:
        raise ContractError(f"Cluster count {k} outside [1, {n}]")
    w = 0.5 * (w + w.T)

    eigenvalues, eigenvectors = eigh(normalized_laplacian(w))
    if k == 1 or n == 1:
        return Partition(np.zeros(n, dtype=int), 1, eigenvalues)
    if k is None:
        k = eigengap_k(eigenvalues, max_clusters)

    n_components, _ = connected_components(w > AFFINITY_ZERO, directed=False)
    if k < n_components:
        logger.warning("Cluster count raised to component count", requested=k, components=n_components)
        k = n_components

    embedding = eigenvectors[:, :k]
    norms = np.linalg.norm(embedding, axis=1, keepdims=True)
    embedding = embedding / np.where(norms == 0.0, 1.0, norms)
    labels = KMeans(n_clusters=k, init="k-means++", n_init=KMEANS_N_INIT, random_state=seed).fit_predict(
        embedding
    )
    labels = canonical_labels(labels)
    return Partition(labels, int(labels.max()) + 1, eigenvalues)


def _assignments(p: Union[Partition, Sequence[int]]) -> np.ndarray:
    return p.assignments if isinstance(p, Partition) else np.asarray(p, dtype=int)


def ari(p: Union[Partition, Sequence[int]], q: Union[Partition, Sequence[int]]) -> float:
    """Adjusted Rand index of two partitions of the same elements."""
    a, b = _assignments(p), _assignments(q)
    if a.shape != b.shape:
        raise ContractError("Partitions cover different element counts", details={"p": len(a), "q": len(b)})
    return float(adjusted_rand_score(a, b))


def cluster_ops(
    psi: Union[SensitivityMatrix, np.ndarray],
    k: Optional[int] = None,
    seed: int = 0,
    max_clusters: int = MAX_CLUSTERS,
) -> Partition:
    """Operating-point partition of one contingency: rank correlation, shifted, clustered."""
    sc = spearman_matrix(psi)
    return spectral_cluster((1.0 + sc) / 2.0, k, seed, max_clusters)


def cluster_contingencies(
    partitions: Sequence[Partition],
    k: Optional[int] = None,
    seed: int = 0,
    max_clusters: int = MAX_CLUSTERS,
) -> Partition:
    """
    Group contingencies whose operating-point partitions agree.

    Args:
        partitions: One OP partition per contingency, all over the same OP set
        k: Cluster count; None picks it by the eigengap heuristic
        seed: k-means random state
        max_clusters: Upper bound of the eigengap search

    Returns:
        Partition over the contingencies
    """
    n = len(partitions)
    if n == 0:
        raise ContractError("No contingency partitions given")
    if n == 1:
        return Partition(np.zeros(1, dtype=int), 1)
    affinity = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            affinity[i, j] = affinity[j, i] = (1.0 + ari(partitions[i], partitions[j])) / 2.0
    if np.allclose(affinity, 1.0):
        logger.info("All contingencies share one partition", contingencies=n)
        return Partition(np.zeros(n, dtype=int), 1)
    return spectral_cluster(affinity, k, seed, max_clusters)


def select_representatives(
    partition: Partition,
    phi: Sequence[float],
    lambdas: Optional[Sequence[int]] = None,
) -> List[int]:
    """
    Most severe element per cluster, in cluster order.

    Unstable members outrank stable ones: the unstable member with the largest phi,
    otherwise the stable member with the smallest phi. Ties go to the lowest index.

    Args:
        partition: Element partition
        phi: Severity index per element
        lambdas: Stability label per element (+1 stable, -1 unstable); None means all stable

    Returns:
        One element index per cluster
    """
    phi = np.asarray(phi, dtype=float)
    lam = np.ones(phi.shape[0], dtype=int) if lambdas is None else np.asarray(lambdas, dtype=int)
    if phi.shape[0] != partition.assignments.shape[0] or lam.shape != phi.shape:
        raise ContractError("Severity arrays do not match the partition")
    representatives = []
    for cluster_id in range(partition.k):
        members = partition.members(cluster_id)
        unstable = members[lam[members] < 0]
        if unstable.size:
            representatives.append(int(unstable[np.argmax(phi[unstable])]))
        else:
            representatives.append(int(members[np.argmin(phi[members])]))
    return representatives


def gaussian_from_moments(mu: np.ndarray, covariance: np.ndarray, cluster_id: int = 0) -> ClusterGaussian:
    """Regularize a covariance by eps * I, eps = 1e-6 * trace / d, and cache the log normalizer."""
    mu = np.asarray(mu, dtype=float)
    d = mu.shape[0]
    trace = float(np.trace(covariance))
    eps = REGULARIZATION * trace / d if trace > 0 else REGULARIZATION
    sigma = 0.5 * (covariance + covariance.T) + eps * np.eye(d)
    try:
        chol, _ = cho_factor(sigma, lower=True)
    except LinAlgError as e:
        raise FitError("Cluster covariance is not positive definite", details={"cluster": cluster_id}) from e
    log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
    log_norm = -0.5 * (d * np.log(2.0 * np.pi) + log_det)
    return ClusterGaussian(mu=mu, sigma=sigma, log_norm=log_norm, cluster_id=cluster_id)


def fit_cluster_gaussian(ops: Union[np.ndarray, Sequence[np.ndarray]], cluster_id: int = 0) -> ClusterGaussian:
    """
    Sample mean and population covariance of a cluster's operating points.

    Args:
        ops: N x d operating-point vectors (controllable gen_p, MW)
        cluster_id: Cluster the Gaussian describes

    Returns:
        Regularized ClusterGaussian
    """
    x = np.atleast_2d(np.asarray(ops, dtype=float))
    if x.shape[0] < 2:
        raise FitError("Gaussian fit needs at least two operating points", details={"cluster": cluster_id})
    mu = x.mean(axis=0)
    centered = x - mu
    return gaussian_from_moments(mu, centered.T @ centered / x.shape[0], cluster_id)


def log_density(gaussian: ClusterGaussian, u: np.ndarray) -> float:
    """Multivariate normal log density at u."""
    diff = np.asarray(u, dtype=float) - gaussian.mu
    quad = float(diff @ cho_solve(cho_factor(gaussian.sigma, lower=True), diff))
    return gaussian.log_norm - 0.5 * quad


def match_op(
    u_new: np.ndarray,
    gaussians: Sequence[ClusterGaussian],
    mcg: Sequence[McgRanking] = (),
) -> Tuple[int, Tuple[int, ...]]:
    """
    Most likely cluster of an operating point and that cluster's MCGs.

    Ties go to the lowest cluster id. When no density is finite the nearest mean wins.

    Args:
        u_new: Operating-point vector
        gaussians: One Gaussian per cluster
        mcg: MCG rankings, looked up by cluster id

    Returns:
        Tuple of (cluster id, top MCG indices)
    """
    u = np.asarray(u_new, dtype=float)
    if not np.all(np.isfinite(u)):
        raise ContractError("Operating point has non-finite entries")
    if not gaussians:
        raise ContractError("No cluster Gaussians to match against")
    ordered = sorted(gaussians, key=lambda g: g.cluster_id)
    if any(g.mu.shape != u.shape for g in ordered):
        raise ContractError("Operating point and Gaussian dimensions differ")

    with np.errstate(all="ignore"):
        scores = np.array([log_density(g, u) for g in ordered])
    if np.all(np.isfinite(scores)):
        best = ordered[int(np.argmax(scores))]
    else:
        logger.warning("Density match failed, using nearest mean")
        distances = [float(np.sum((g.mu - u) ** 2)) for g in ordered]
        best = ordered[int(np.argmin(distances))]

    ranking = next((r for r in mcg if r.cluster_id == best.cluster_id), None)
    return best.cluster_id, (ranking.top if ranking is not None else ())


def rank_mcg(rows: np.ndarray, cluster_id: int = 0, top_k: int = 2) -> McgRanking:
    """Controllable generators by descending mean |gradient|, lowest index first on ties."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if rows.shape[0] == 0:
        raise ContractError("MCG ranking needs at least one gradient row")
    means = np.abs(rows).mean(axis=0)
    order = np.argsort(-means, kind="stable")
    return McgRanking(cluster_id, tuple(int(i) for i in order), min(top_k, rows.shape[1]))
