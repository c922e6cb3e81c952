# Continuous boundary function: RBF-kernel SVM trained by SMO

from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist

from tsb_monitor.core.exceptions import ContractError, NoBoundaryError, NumericalError
from tsb_monitor.core.logger import get_logger
from tsb_monitor.models.domain import BoundaryModel, LabeledGrid, Sample, SampleSet
from tsb_monitor.models.models import Label
from tsb_monitor.schemas.schemas import BoundaryModelRecord, FeatureScale, SupportVector

logger = get_logger(__name__)

DEFAULT_C = 10.0
SMO_EPS = 1e-3
SMO_TAU = 1e-12
CV_FOLDS = 5
CV_MIN_SAMPLES = 50
GAMMA_MULTIPLIERS = (1.0, 0.5, 2.0, 4.0, 8.0, 16.0, 32.0)
C_GRID = (10.0, 100.0)
PROJECTION_TOL = 1e-6
PROJECTION_MAX_ITER = 60


def _rbf(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    return np.exp(-gamma * cdist(a, b, "sqeuclidean"))


def smo_solve(kernel: np.ndarray, y: np.ndarray, C: float, max_iter: Optional[int] = None) -> Tuple[np.ndarray, float]:
    """
    Solve the soft-margin dual by SMO with maximal-violating-pair selection.

    Ties in the working-set choice go to the lowest index, so results are deterministic.

    Args:
        kernel: Gram matrix
        y: Labels in {-1, +1}
        C: Box constraint
        max_iter: Iteration cap

    Returns:
        Tuple of (alpha, rho); the decision function is sum(alpha y K) - rho
    """
    n = y.shape[0]
    q = (y[:, None] * y[None, :]) * kernel
    alpha = np.zeros(n)
    grad = -np.ones(n)
    max_iter = max_iter or max(10_000, 100 * n)

    for _ in range(max_iter):
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        score = -y * grad
        if not up.any() or not low.any():
            break
        i = int(np.flatnonzero(up)[np.argmax(score[up])])
        j = int(np.flatnonzero(low)[np.argmin(score[low])])
        if score[i] - score[j] < SMO_EPS:
            break

        old_i, old_j = alpha[i], alpha[j]
        if y[i] != y[j]:
            quad = max(q[i, i] + q[j, j] + 2.0 * q[i, j], SMO_TAU)
            delta = (-grad[i] - grad[j]) / quad
            diff = alpha[i] - alpha[j]
            alpha[i] += delta
            alpha[j] += delta
            if diff > 0:
                if alpha[j] < 0:
                    alpha[j] = 0.0
                    alpha[i] = diff
            elif alpha[i] < 0:
                alpha[i] = 0.0
                alpha[j] = -diff
            if diff > 0:
                if alpha[i] > C:
                    alpha[i] = C
                    alpha[j] = C - diff
            elif alpha[j] > C:
                alpha[j] = C
                alpha[i] = C + diff
        else:
            quad = max(q[i, i] + q[j, j] - 2.0 * q[i, j], SMO_TAU)
            delta = (grad[i] - grad[j]) / quad
            total = alpha[i] + alpha[j]
            alpha[i] -= delta
            alpha[j] += delta
            if total > C:
                if alpha[i] > C:
                    alpha[i] = C
                    alpha[j] = total - C
            elif alpha[j] < 0:
                alpha[j] = 0.0
                alpha[i] = total
            if total > C:
                if alpha[j] > C:
                    alpha[j] = C
                    alpha[i] = total - C
            elif alpha[i] < 0:
                alpha[i] = 0.0
                alpha[j] = total

        grad += q[:, i] * (alpha[i] - old_i) + q[:, j] * (alpha[j] - old_j)
    else:
        logger.warning("SMO reached its iteration cap", n=n)

    yg = y * grad
    free = (alpha > 0) & (alpha < C)
    if free.any():
        rho = float(yg[free].mean())
    else:
        at_upper = alpha >= C
        ub_mask = (at_upper & (y < 0)) | (~at_upper & (y > 0))
        lb_mask = ~ub_mask
        ub = yg[ub_mask].min() if ub_mask.any() else np.inf
        lb = yg[lb_mask].max() if lb_mask.any() else -np.inf
        rho = float(0.5 * (ub + lb)) if np.isfinite(ub) and np.isfinite(lb) else 0.0
    return alpha, rho


def _standardize(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    spread = x.std(axis=0)
    spread[spread <= 0] = 1.0
    return mean, spread


def _fit_standardized(z: np.ndarray, y: np.ndarray, gamma: float, C: float) -> Tuple[np.ndarray, float]:
    return smo_solve(_rbf(z, z, gamma), y, C)


def _cv_accuracy(z: np.ndarray, y: np.ndarray, gamma: float, C: float) -> float:
    folds = np.arange(z.shape[0]) % CV_FOLDS
    correct = 0
    for f in range(CV_FOLDS):
        test = folds == f
        train = ~test
        if len(np.unique(y[train])) < 2:
            continue
        alpha, rho = _fit_standardized(z[train], y[train], gamma, C)
        values = _rbf(z[test], z[train], gamma) @ (alpha * y[train]) - rho
        correct += int(np.sum(np.where(values > 0, 1.0, -1.0) == y[test]))
    return correct / z.shape[0]


def _training_arrays(samples: Sequence[Sample]) -> Tuple[np.ndarray, np.ndarray, str]:
    feasible = [s for s in samples if s.feasible]
    if not feasible:
        raise NoBoundaryError("No feasible samples to train on")
    x = np.array([s.u for s in feasible], dtype=float)
    y = np.array([1.0 if s.label == Label.STABLE else -1.0 for s in feasible])
    n_stable, n_unstable = int(np.sum(y > 0)), int(np.sum(y < 0))
    if n_stable == 0 or n_unstable == 0:
        raise NoBoundaryError(
            "Training set holds a single class", details={"stable": n_stable, "unstable": n_unstable}
        )
    if n_stable < 2 or n_unstable < 2:
        raise NoBoundaryError(
            "At least two samples of each class are required",
            details={"stable": n_stable, "unstable": n_unstable},
        )
    return x, y, feasible[0].contingency_id


def train(
    samples: Union[SampleSet, Sequence[Sample]],
    C: Optional[float] = None,
    kernel_gamma: Optional[float] = None,
    cross_validate: bool = True,
) -> BoundaryModel:
    """
    Fit the boundary function on the feasible samples.

    Args:
        samples: SampleSet or list of samples; infeasible samples are ignored
        C: Box constraint; default 10, cross-validated with the width on large sets
        kernel_gamma: RBF width on standardized inputs; default 1/d
        cross_validate: Refine (C, gamma) by 5-fold CV when the set exceeds 50 samples

    Returns:
        Trained BoundaryModel
    """
    items = samples.samples if isinstance(samples, SampleSet) else list(samples)
    x, y, contingency_id = _training_arrays(items)
    mean, spread = _standardize(x)
    z = (x - mean) / spread
    base_gamma = 1.0 / x.shape[1]

    best_gamma = kernel_gamma if kernel_gamma is not None else base_gamma
    best_c = C if C is not None else DEFAULT_C
    if cross_validate and x.shape[0] > CV_MIN_SAMPLES and (C is None or kernel_gamma is None):
        best_score = -1.0
        c_grid = (C,) if C is not None else C_GRID
        g_grid = (kernel_gamma,) if kernel_gamma is not None else tuple(m * base_gamma for m in GAMMA_MULTIPLIERS)
        for c in c_grid:
            for g in g_grid:
                score = _cv_accuracy(z, y, g, c)
                if score > best_score:
                    best_score, best_gamma, best_c = score, g, c
        logger.info("Cross-validated hyperparameters", C=best_c, kernel_gamma=best_gamma, cv_accuracy=best_score)

    alpha, rho = _fit_standardized(z, y, best_gamma, best_c)
    support = alpha > 0
    model = BoundaryModel(
        contingency_id=contingency_id,
        kernel_gamma=float(best_gamma),
        C=float(best_c),
        bias=-rho,
        feature_mean=mean,
        feature_spread=spread,
        support_points=x[support],
        support_coeffs=(alpha * y)[support],
    )
    predicted = np.where(model.decision_values(x) > 0, 1.0, -1.0)
    accuracy = float(np.mean(predicted == y))
    logger.info(
        "Boundary model trained",
        contingency=contingency_id,
        samples=int(x.shape[0]),
        supports=int(support.sum()),
        training_accuracy=accuracy,
    )
    return replace(model, training_accuracy=accuracy)


def constant_model(contingency_id: str, stable: bool, dim: int) -> BoundaryModel:
    """Model predicting one class everywhere (search boxes with a single label)."""
    return BoundaryModel(
        contingency_id=contingency_id,
        kernel_gamma=1.0,
        C=DEFAULT_C,
        bias=1.0 if stable else -1.0,
        feature_mean=np.zeros(dim),
        feature_spread=np.ones(dim),
        support_points=np.zeros((0, dim)),
        support_coeffs=np.zeros(0),
        training_accuracy=1.0,
    )


def decision(model: BoundaryModel, u: np.ndarray) -> float:
    """Signed boundary value at one point; positive on the stable side."""
    u = np.asarray(u, dtype=float)
    if u.shape != (model.dim,):
        raise ContractError("Point dimension does not match the model", details={"expected": model.dim})
    return float(model.decision_values(u[None, :])[0])


def predict_labels(model: BoundaryModel, points: np.ndarray) -> List[Label]:
    values = model.decision_values(points)
    return [Label.STABLE if v > 0 else Label.UNSTABLE for v in values]


def project_to_boundary(
    model,
    u_from: np.ndarray,
    u_to: np.ndarray,
    tol: float = PROJECTION_TOL,
    max_iter: int = PROJECTION_MAX_ITER,
    strict: bool = False,
) -> np.ndarray:
    """
    Bisect the chord between two points of opposite predicted sign onto the zero set.

    Args:
        model: Anything exposing decision_values(points)
        u_from: Chord start
        u_to: Chord end
        tol: Target |decision|
        max_iter: Bisection cap
        strict: Raise instead of warn when the cap is reached

    Returns:
        Point on the chord with |decision| < tol, or the last midpoint at the cap
    """
    lo = np.asarray(u_from, dtype=float)
    hi = np.asarray(u_to, dtype=float)
    d_lo, d_hi = model.decision_values(np.vstack([lo, hi]))
    if abs(d_lo) < tol:
        return lo.copy()
    if abs(d_hi) < tol:
        return hi.copy()
    if np.sign(d_lo) == np.sign(d_hi):
        raise ContractError("Chord endpoints lie on the same side of the boundary")

    mid = 0.5 * (lo + hi)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        d_mid = float(model.decision_values(mid[None, :])[0])
        if abs(d_mid) < tol:
            return mid
        if np.sign(d_mid) == np.sign(d_lo):
            lo, d_lo = mid, d_mid
        else:
            hi = mid
    if strict:
        raise NumericalError("Boundary projection did not reach tolerance", details={"max_iter": max_iter})
    logger.warning("Boundary projection stopped at iteration cap", max_iter=max_iter)
    return mid


def evaluate_accuracy(model, grid: LabeledGrid, phi_cri: float) -> float:
    """
    Fraction of feasible grid points labeled correctly; points with |phi| < phi_cri always count.
    """
    if grid.points.shape[0] == 0:
        raise ContractError("Labeled grid is empty")
    predicted_stable = model.decision_values(grid.points) > 0
    correct = (predicted_stable == grid.stable) | (np.abs(grid.phi) < phi_cri)
    return float(np.mean(correct))


def calibrate_margin(model: BoundaryModel, samples: Sequence[Sample], phi_cri: float) -> float:
    """
    Decision-value threshold of the marginal band.

    Median |decision| over the near-boundary training samples, or a tenth of the median
    over all feasible samples when none are near the boundary.
    """
    feasible = [s for s in samples if s.feasible]
    if not feasible:
        raise ContractError("No feasible samples to calibrate on")
    values = np.abs(model.decision_values(np.array([s.u for s in feasible])))
    near = np.array([s.critical or (s.phi is not None and abs(s.phi) < phi_cri) for s in feasible])
    if near.any():
        return float(np.median(values[near]))
    return float(0.1 * np.median(values))


def model_to_record(model: BoundaryModel) -> BoundaryModelRecord:
    return BoundaryModelRecord(
        contingency_id=model.contingency_id,
        kernel_gamma=model.kernel_gamma,
        C=model.C,
        bias=model.bias,
        feature_scale=FeatureScale(mean=model.feature_mean.tolist(), spread=model.feature_spread.tolist()),
        supports=[
            SupportVector(point=p.tolist(), coeff=float(c))
            for p, c in zip(model.support_points, model.support_coeffs)
        ],
        training_accuracy=model.training_accuracy,
        margin=model.margin,
    )


def model_from_record(record: BoundaryModelRecord) -> BoundaryModel:
    dim = len(record.feature_scale.mean)
    points = np.array([s.point for s in record.supports], dtype=float).reshape(-1, dim)
    return BoundaryModel(
        contingency_id=record.contingency_id,
        kernel_gamma=record.kernel_gamma,
        C=record.C,
        bias=record.bias,
        feature_mean=np.array(record.feature_scale.mean, dtype=float),
        feature_spread=np.array(record.feature_scale.spread, dtype=float),
        support_points=points,
        support_coeffs=np.array([s.coeff for s in record.supports], dtype=float),
        training_accuracy=record.training_accuracy,
        margin=record.margin,
    )


def save_model(model: BoundaryModel, path: Union[str, Path]) -> None:
    Path(path).write_text(model_to_record(model).model_dump_json(indent=2))


def load_model(path: Union[str, Path]) -> BoundaryModel:
    try:
        text = Path(path).read_text()
    except FileNotFoundError as e:
        raise ContractError(f"Boundary model not found: {path}") from e
    return model_from_record(BoundaryModelRecord.model_validate_json(text))
