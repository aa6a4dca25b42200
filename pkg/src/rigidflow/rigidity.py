"""Rigidity masks: from ground-truth projected scene flow, from alignment
residuals (a non-learned segmenter), or loaded from an external file."""
from __future__ import annotations

import os

import numpy as np

from .correspondence import CorrespondenceConfig, forward_backward_mask, sample_correspondences
from .errors import DataError, EstimationError, InsufficientDataError, UsageError
from .geometry import RigidTransform, _backproject, backproject_grid, sample_target_depth, valid_depth
from .solver import SolverConfig, gauss_newton_refine, ransac_pose, robust_scale

DEFAULT_PSF_EPS = 1e-3
DEFAULT_RESIDUAL_K = 2.5
# residual threshold floor in metres; below ~1 mm the MAD of a near-noiseless
# residual measures depth interpolation error, not motion
DEFAULT_RESIDUAL_FLOOR = 1e-3


def rigidity_from_gt_psf(psf, eps=DEFAULT_PSF_EPS, valid=None):
    """Rigid where the projected scene flow vanishes (``||psf|| <= eps``)."""
    if eps < 0:
        raise UsageError("eps must be non-negative")
    psf = np.asarray(psf, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        rigid = np.linalg.norm(psf, axis=-1) <= eps
    if valid is not None:
        rigid &= np.asarray(valid, dtype=bool)
    return rigid


def _tap_range(depth1, u1, v1):
    """Min and max of the four frame-1 depths around each sub-pixel target (NaN if any is invalid)."""
    H, W = depth1.shape
    with np.errstate(invalid="ignore"):
        inside = (u1 >= 0) & (u1 <= W - 1) & (v1 >= 0) & (v1 <= H - 1)
    uu = np.where(inside, u1, 0.0)
    vv = np.where(inside, v1, 0.0)
    u0 = np.clip(np.floor(uu).astype(np.intp), 0, max(W - 2, 0))
    v0 = np.clip(np.floor(vv).astype(np.intp), 0, max(H - 2, 0))
    u1i = np.minimum(u0 + 1, W - 1)
    v1i = np.minimum(v0 + 1, H - 1)
    g = np.where(valid_depth(depth1), depth1, np.nan)
    taps = np.stack([g[v0, u0], g[v0, u1i], g[v1i, u0], g[v1i, u1i]])
    lo, hi = taps.min(axis=0), taps.max(axis=0)
    lo = np.where(inside, lo, np.nan)
    return lo, np.where(inside, hi, np.nan)


def dense_alignment_residual(intr, depth0, depth1, fwd, T, sampling="nearest", unreliable=None):
    """Distance between ``T·x0(u)`` and its observed match, for every frame-0 pixel.

    The distance splits into a part across the camera-1 ray through
    ``u0 + fwd(u0)``, which depends only on the flow, and a part along it,
    which depends on ``z1``. With ``registered`` depth ``z1`` is exact and
    the result is ``||T·x0 - x1||``. With ``nearest`` / ``bilinear`` the
    target falls between pixels, so ``z1`` is only known to lie between the
    four surrounding depths and the along-ray part counts only the distance
    outside that interval. Where no depth is available, or ``unreliable``
    flags the pixel (e.g. it failed the forward-backward check, so ``z1``
    likely belongs to an occluder), only the across-ray part is used.
    NaN where ``z0`` is invalid.
    """
    x0 = backproject_grid(intr, depth0)
    u, v = intr.pixel_grid()
    fwd = np.asarray(fwd, dtype=np.float64)
    depth1 = np.asarray(depth1, dtype=np.float64)
    u1 = u + fwd[..., 0]
    v1 = v + fwd[..., 1]
    if sampling == "registered":
        lo, _ = sample_target_depth(depth1, u, v, u1, v1, sampling)
        hi = lo
    elif sampling in ("nearest", "bilinear"):
        lo, hi = _tap_range(depth1, u1, v1)
    else:
        raise UsageError(f"unknown depth sampling {sampling!r}")
    y = T.apply(x0)
    ray = np.stack([(u1 - intr.cx) / intr.fx, (v1 - intr.cy) / intr.fy, np.ones_like(u1)], axis=-1)
    scale = np.linalg.norm(ray, axis=-1)  # range along the ray per metre of depth
    ray /= scale[..., None]
    along = np.einsum("...i,...i->...", y, ray)
    perp = np.linalg.norm(y - np.maximum(along, 0.0)[..., None] * ray, axis=-1)
    with np.errstate(invalid="ignore"):
        excess = np.maximum(np.maximum(lo * scale - along, along - hi * scale), 0.0)
    fallback = ~np.isfinite(excess)
    if unreliable is not None:
        fallback |= np.asarray(unreliable, dtype=bool)
    return np.where(fallback, perp, np.hypot(perp, np.where(fallback, 0.0, excess)))


def rigidity_from_residuals(intr, depth0, depth1, fwd, bwd, cfg=None, rounds=3,
                            corr_cfg=None, k=DEFAULT_RESIDUAL_K, init=None, min_scale=DEFAULT_RESIDUAL_FLOOR):
    """Alternate pose refinement and residual thresholding.

    Starts from every valid pixel marked rigid. Each round samples
    correspondences on the current mask, refines the pose (warm-started
    from the previous round), and relabels pixels rigid where the dense
    alignment residual is at most ``max(k · 1.4826 · median(residual), min_scale)``.
    Forward-backward rejected pixels use the point-to-ray residual (see
    :func:`dense_alignment_residual`). Pixels without a residual keep their
    label.

    ``init`` is a starting pose, or ``"ransac"`` to seed round one with
    three-point RANSAC on the all-rigid correspondences (refinement then
    uses only its inliers). Returns ``(mask, PoseEstimate)``. With
    ``rounds=1`` and the default init the pose equals refinement on the
    all-rigid mask.
    """
    if rounds < 1:
        raise UsageError("rounds must be >= 1")
    cfg = cfg or SolverConfig()
    corr_cfg = corr_cfg or CorrespondenceConfig()
    valid = valid_depth(depth0)
    rigid = valid.copy()
    rejected = forward_backward_mask(fwd, bwd, corr_cfg.fb_threshold)
    use_ransac = isinstance(init, str)
    if use_ransac and init != "ransac":
        raise UsageError(f"unknown init {init!r}")
    T = RigidTransform.identity() if (use_ransac or init is None) else init
    est = None
    for r in range(rounds):
        try:
            corr = sample_correspondences(intr, depth0, depth1, fwd, rigid, rejected,
                                          stride=corr_cfg.stride, max_points=corr_cfg.max_points,
                                          dilation=corr_cfg.dilation, sampling=corr_cfg.depth_sampling,
                                          bwd=bwd, bidirectional=corr_cfg.bidirectional)
        except InsufficientDataError as exc:
            raise EstimationError(f"residual segmentation ran out of correspondences: {exc}") from exc
        if use_ransac and r == 0:
            ran = ransac_pose(corr, cfg)
            T = ran.transform
            corr.inlier = ran.inliers
        est = gauss_newton_refine(corr, T, cfg)
        T = est.transform
        res = dense_alignment_residual(intr, depth0, depth1, fwd, T, corr_cfg.depth_sampling, rejected)
        known = np.isfinite(res)
        thr = max(k * robust_scale(res[known]), min_scale)
        rigid = np.where(known, res <= thr, rigid) & valid
    return rigid, est


def load_external_mask(source, shape):
    """Rigidity mask from an image path or array; nonzero means rigid."""
    from .io import read_mask

    if isinstance(source, (str, os.PathLike)):
        mask = read_mask(source)
    else:
        mask = np.asarray(source) != 0
        if mask.ndim == 3:
            mask = mask.any(axis=-1)
    if tuple(mask.shape) != tuple(shape):
        raise DataError(f"mask is {mask.shape}, frame is {tuple(shape)}")
    return mask
