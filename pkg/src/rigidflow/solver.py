"""Relative pose from 3D-3D correspondences.

Three estimators share one :class:`SolverConfig`:

* :func:`procrustes_align` - closed-form least-squares rigid fit (SVD);
* :func:`ransac_pose` - three-point RANSAC around it;
* :func:`gauss_newton_refine` - iteratively reweighted Gauss-Newton on the
  Huber-robustified point-to-point cost, with a halving line search.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .correspondence import CorrespondenceSet
from .errors import DataError, DegenerateGeometryError, EstimationError, InsufficientDataError, UsageError
from .geometry import RigidTransform, rotvec_to_matrix, skew

MAD_TO_SIGMA = 1.4826


@dataclass(frozen=True)
class SolverConfig:
    huber_delta: float = 0.05
    max_iterations: int = 50
    step_tolerance: float = 1e-10
    ransac_iterations: int = 1000
    ransac_inlier_threshold: float = 0.05
    seed: int = 0
    robust: bool = True
    # "fixed" uses huber_delta; "mad" rescales it to 1.4826·MAD of the initial residuals
    delta_mode: str = "fixed"
    max_backtracks: int = 10

    def __post_init__(self):
        if not self.huber_delta > 0:
            raise UsageError("huber_delta must be positive")
        if self.max_iterations < 1:
            raise UsageError("max_iterations must be >= 1")
        if not (self.step_tolerance > 0 and self.ransac_inlier_threshold > 0):
            raise UsageError("tolerances and thresholds must be positive")
        if self.ransac_iterations < 1:
            raise UsageError("ransac_iterations must be >= 1")
        if self.delta_mode not in ("fixed", "mad"):
            raise UsageError(f"unknown delta_mode {self.delta_mode!r}")


@dataclass(eq=False)
class PoseEstimate:
    transform: RigidTransform
    final_cost: float
    iterations_used: int
    inlier_count: int
    converged: bool
    inliers: np.ndarray = None
    cost_history: list = field(default_factory=list)


def robust_scale(residual_norms):
    """``1.4826 · median(||r||)``: the MAD of residual norms about their ideal value 0."""
    s = np.asarray(residual_norms, dtype=np.float64)
    s = s[np.isfinite(s)]
    if len(s) == 0:
        return 0.0
    return MAD_TO_SIGMA * float(np.median(s))


def _points(corr):
    if isinstance(corr, CorrespondenceSet):
        return corr.x0, corr.x1
    x0, x1 = corr
    return np.asarray(x0, dtype=np.float64).reshape(-1, 3), np.asarray(x1, dtype=np.float64).reshape(-1, 3)


def _is_collinear(x, rel_tol=1e-9):
    c = x - x.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    return s[0] == 0.0 or s[1] <= rel_tol * s[0]


def procrustes_align(corr, weights=None):
    """Rigid transform minimising ``sum w_i ||T x0_i - x1_i||^2``.

    Accepts a :class:`CorrespondenceSet` or a ``(x0, x1)`` pair.
    """
    x0, x1 = _points(corr)
    if len(x0) < 3:
        raise InsufficientDataError(f"need at least 3 pairs, got {len(x0)}")
    if _is_collinear(x0) or _is_collinear(x1):
        raise DegenerateGeometryError("points are collinear; rotation is not determined")
    w = np.ones(len(x0)) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    m0 = w @ x0
    m1 = w @ x1
    cov = ((x1 - m1) * w[:, None]).T @ (x0 - m0)
    U, _, Vt = np.linalg.svd(cov)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    R = U @ D @ Vt
    return RigidTransform(R, m1 - R @ m0)


def _canonical_order(x0, x1):
    keys = tuple(x1[:, k] for k in (2, 1, 0)) + tuple(x0[:, k] for k in (2, 1, 0))
    return np.lexsort(keys)


def ransac_pose(corr, cfg=None):
    """Three-point RANSAC; the winning model is refit on its inliers.

    Samples index a canonical (sorted) ordering of the pairs, so the result
    depends on the seed and the set of pairs but not on their input order.
    """
    cfg = cfg or SolverConfig()
    x0, x1 = _points(corr)
    n = len(x0)
    if n < 3:
        raise InsufficientDataError(f"need at least 3 pairs, got {n}")
    order = _canonical_order(x0, x1)
    c0, c1 = x0[order], x1[order]
    rng = np.random.default_rng(cfg.seed)
    thr2 = cfg.ransac_inlier_threshold ** 2
    best_count, best_mask = 0, None
    for _ in range(cfg.ransac_iterations):
        idx = rng.choice(n, 3, replace=False)
        try:
            T = procrustes_align((c0[idx], c1[idx]))
        except DegenerateGeometryError:
            continue
        d = T.apply(c0) - c1
        mask = np.einsum("ij,ij->i", d, d) <= thr2
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask
    if best_count < 3:
        raise EstimationError("RANSAC found no model with at least 3 inliers")
    try:
        T = procrustes_align((c0[best_mask], c1[best_mask]))
    except DegenerateGeometryError as exc:
        raise EstimationError("RANSAC inlier set is degenerate") from exc
    inliers = np.zeros(n, dtype=bool)
    inliers[order[best_mask]] = True
    r = T.apply(x0[inliers]) - x1[inliers]
    cost = 0.5 * float(np.einsum("ij,ij->", r, r))
    return PoseEstimate(T, cost, cfg.ransac_iterations, best_count, True, inliers, [cost])


def residuals(T, x0, x1):
    return T.apply(x0) - x1


def residual_jacobian(T, x0):
    """Analytic ``d r_i / d(w, v)`` at zero for ``r_i(w, v) = Exp(w, v)·T·x0_i - x1_i``.

    Shape ``(N, 3, 6)``; columns 0-2 are the rotation-vector part.
    """
    y = T.apply(np.asarray(x0, dtype=np.float64).reshape(-1, 3))
    J = np.zeros((len(y), 3, 6))
    for i, yi in enumerate(y):
        J[i, :, :3] = -skew(yi)
        J[i, :, 3:] = np.eye(3)
    return J


def apply_increment(xi, T):
    """Left-multiply ``T`` by the increment ``(rotation vector, translation)``."""
    xi = np.asarray(xi, dtype=np.float64)
    return RigidTransform(rotvec_to_matrix(xi[:3]), xi[3:]).compose(T)


def _robust_cost(T, x0, x1, delta, prior):
    _, _, cost = kernels.huber_normal_equations(T.apply(x0), T.apply(x0) - x1, delta, prior)
    return cost


def gauss_newton_refine(corr, init=None, cfg=None):
    """Minimise ``sum_i rho(T x0_i - x1_i)`` over SE(3) starting from ``init``.

    Only pairs flagged as inliers take part. Each iteration solves the
    reweighted normal equations for a left increment and halves it (at most
    ``cfg.max_backtracks`` times) until the robust cost does not increase.
    """
    cfg = cfg or SolverConfig()
    T = init or RigidTransform.identity()
    if isinstance(corr, CorrespondenceSet):
        use = corr.inlier
        x0, x1 = corr.x0[use], corr.x1[use]
        prior = corr.weights[use]
        if np.all(prior == 1.0):
            prior = None
    else:
        x0, x1 = _points(corr)
        prior = None
    if len(x0) < 3:
        raise InsufficientDataError(f"need at least 3 pairs, got {len(x0)}")
    if not (np.all(np.isfinite(x0)) and np.all(np.isfinite(x1))):
        raise DataError("non-finite correspondence coordinates")

    if not cfg.robust:
        delta = np.inf
    elif cfg.delta_mode == "mad":
        r0 = np.linalg.norm(T.apply(x0) - x1, axis=1)
        delta = max(robust_scale(r0), 1e-9)
    else:
        delta = cfg.huber_delta

    y = T.apply(x0)
    H, g, cost = kernels.huber_normal_equations(y, y - x1, delta, prior)
    history = [cost]
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        if not (np.all(np.isfinite(H)) and np.all(np.isfinite(g))):
            raise DataError("non-finite residuals during refinement")
        ev = np.linalg.eigvalsh(H)
        if ev[0] <= 1e-12 * max(ev[-1], 1e-300):
            raise DegenerateGeometryError("normal equations are singular")
        xi = np.linalg.solve(H, -g)
        step = 1.0
        accepted = None
        for _ in range(cfg.max_backtracks + 1):
            T_try = apply_increment(step * xi, T)
            y_try = T_try.apply(x0)
            H_try, g_try, c_try = kernels.huber_normal_equations(y_try, y_try - x1, delta, prior)
            if c_try <= cost:
                accepted = (T_try, H_try, g_try, c_try)
                break
            step *= 0.5
        if accepted is None:
            # no descent along the GN direction: at a minimum to machine precision
            converged = bool(np.linalg.norm(xi) <= max(cfg.step_tolerance, 1e-6))
            break
        T, H, g, cost = accepted
        history.append(cost)
        if np.linalg.norm(step * xi) <= cfg.step_tolerance:
            converged = True
            break

    r = np.linalg.norm(T.apply(x0) - x1, axis=1)
    within = r <= delta
    inliers = np.zeros(len(corr), dtype=bool) if isinstance(corr, CorrespondenceSet) else within
    if isinstance(corr, CorrespondenceSet):
        inliers[np.flatnonzero(corr.inlier)[within]] = True
    return PoseEstimate(T, float(cost), it, int(within.sum()), converged, inliers, history)
