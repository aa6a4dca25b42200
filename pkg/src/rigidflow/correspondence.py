"""Filtered 3D-3D correspondences from flow, rigidity and depth."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import InsufficientDataError, UsageError
from .geometry import _backproject, sample_nearest, sample_target_depth, valid_depth

DEFAULT_FB_THRESHOLD = 0.75
DEFAULT_DILATION = 10
DEFAULT_STRIDE = 4
DEFAULT_MAX_POINTS = 10000


@dataclass(frozen=True)
class CorrespondenceConfig:
    fb_threshold: float = DEFAULT_FB_THRESHOLD
    dilation: int = DEFAULT_DILATION
    stride: int = DEFAULT_STRIDE
    max_points: int = DEFAULT_MAX_POINTS
    bidirectional: bool = False
    depth_sampling: str = "nearest"


@dataclass(eq=False)
class CorrespondenceSet:
    """Pairs ``x1 ≈ C1·x0`` with the frame-0 pixel each pair came from."""

    x0: np.ndarray
    x1: np.ndarray
    pixels: np.ndarray = None
    weights: np.ndarray = None
    inlier: np.ndarray = None
    backward: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=np.float64).reshape(-1, 3)
        self.x1 = np.asarray(self.x1, dtype=np.float64).reshape(-1, 3)
        n = len(self.x0)
        if len(self.x1) != n:
            raise UsageError("x0 and x1 must have the same length")
        if self.pixels is None:
            self.pixels = np.full((n, 2), np.nan)
        if self.weights is None:
            self.weights = np.ones(n)
        if self.inlier is None:
            self.inlier = np.ones(n, dtype=bool)
        if self.backward is None:
            self.backward = np.zeros(n, dtype=bool)
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(n, 2)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(n)
        self.inlier = np.asarray(self.inlier, dtype=bool).reshape(n)
        self.backward = np.asarray(self.backward, dtype=bool).reshape(n)
        if np.any(self.weights <= 0):
            raise UsageError("correspondence weights must be positive")

    def __len__(self):
        return len(self.x0)

    def subset(self, index):
        return CorrespondenceSet(self.x0[index], self.x1[index], self.pixels[index],
                                 self.weights[index], self.inlier[index], self.backward[index])


def forward_backward_mask(fwd, bwd, threshold=DEFAULT_FB_THRESHOLD):
    """Pixels failing the round-trip test ``||fwd(u) + bwd(u + fwd(u))|| <= threshold``.

    ``bwd`` is read at the nearest pixel. Returns True for rejected pixels,
    including those whose forward target leaves the image or is undefined.
    """
    fwd = np.asarray(fwd, dtype=np.float64)
    bwd = np.asarray(bwd, dtype=np.float64)
    if fwd.shape != bwd.shape or fwd.ndim != 3 or fwd.shape[2] != 2:
        raise UsageError(f"flow shapes differ or are not (H, W, 2): {fwd.shape} vs {bwd.shape}")
    res = kernels.fb_residual(fwd, bwd)
    with np.errstate(invalid="ignore"):
        return ~(res <= threshold)


def dilate(mask, patch=DEFAULT_DILATION):
    if patch < 1:
        raise UsageError(f"dilation patch must be >= 1, got {patch}")
    mask = np.asarray(mask, dtype=bool)
    if patch == 1:
        return mask.copy()
    return kernels.dilate(mask, int(patch))


def _keep_closest(z, max_points):
    # indices (ascending) of the max_points smallest z; ties broken by scan order
    if len(z) <= max_points:
        return np.arange(len(z))
    order = np.argsort(z, kind="stable")[:max_points]
    return np.sort(order)


def sample_correspondences(intr, depth0, depth1, fwd, rigid, rejected,
                           stride=DEFAULT_STRIDE, max_points=DEFAULT_MAX_POINTS,
                           dilation=DEFAULT_DILATION, sampling="nearest",
                           bwd=None, bidirectional=False, rejected_bwd=None):
    """Build the inlier correspondence set used by the pose solver.

    Candidates lie on the ``stride`` grid, are rigid, stay clear of the
    exclusion set ``dilate(~rigid | rejected, dilation)``, and have valid
    depths at both ends. If more than ``max_points`` survive, the ones closest
    to the camera (smallest ``z0``) are kept. Ordering is row-major.

    With ``bidirectional=True`` the backward flow also contributes pairs
    started from the frame-1 stride grid; ``max_points`` then caps the total.
    """
    for name, g in (("depth0", depth0), ("depth1", depth1), ("fwd", fwd),
                    ("rigid", rigid), ("rejected", rejected)):
        intr.check_grid(g, name)
    if stride < 1:
        raise UsageError(f"stride must be >= 1, got {stride}")
    if max_points < 3:
        raise UsageError(f"max_points must be >= 3, got {max_points}")
    depth0 = np.asarray(depth0, dtype=np.float64)
    depth1 = np.asarray(depth1, dtype=np.float64)
    fwd = np.asarray(fwd, dtype=np.float64)
    rigid = np.asarray(rigid, dtype=bool)
    exclude = dilate(~rigid | np.asarray(rejected, dtype=bool), dilation)

    vs, us = np.mgrid[0:intr.height:stride, 0:intr.width:stride]
    vs = vs.ravel()
    us = us.ravel()
    keep = ~exclude[vs, us] & valid_depth(depth0[vs, us])
    us, vs = us[keep], vs[keep]
    z0 = depth0[vs, us]
    f = fwd[vs, us]
    u1 = us + f[:, 0]
    v1 = vs + f[:, 1]
    z1, _ = sample_target_depth(depth1, us, vs, u1, v1, sampling)
    ok = np.isfinite(z1)
    us, vs, z0, u1, v1, z1 = us[ok], vs[ok], z0[ok], u1[ok], v1[ok], z1[ok]
    x0 = _backproject(intr, us.astype(np.float64), vs.astype(np.float64), z0)
    x1 = _backproject(intr, u1, v1, z1)
    pix = np.stack([us, vs], axis=1).astype(np.float64)
    is_bwd = np.zeros(len(x0), dtype=bool)

    if bidirectional:
        if bwd is None:
            raise UsageError("bidirectional sampling needs the backward flow")
        intr.check_grid(bwd, "bwd")
        bwd = np.asarray(bwd, dtype=np.float64)
        if rejected_bwd is None:
            rejected_bwd = forward_backward_mask(bwd, fwd)
        vb, ub = np.mgrid[0:intr.height:stride, 0:intr.width:stride]
        vb = vb.ravel()
        ub = ub.ravel()
        b = bwd[vb, ub]
        us0 = ub + b[:, 0]
        vs0 = vb + b[:, 1]
        # the frame-0 exclusion set is read at the source pixel
        ex_src, inside = sample_nearest(exclude.astype(np.float64), us0, vs0)
        zb1 = depth1[vb, ub]
        zb0, _ = sample_nearest(depth0, us0, vs0)
        ok = (inside & (ex_src == 0) & ~np.asarray(rejected_bwd, dtype=bool)[vb, ub]
              & valid_depth(zb1) & valid_depth(zb0))
        xb0 = _backproject(intr, us0[ok], vs0[ok], zb0[ok])
        xb1 = _backproject(intr, ub[ok].astype(np.float64), vb[ok].astype(np.float64), zb1[ok])
        x0 = np.concatenate([x0, xb0])
        x1 = np.concatenate([x1, xb1])
        pix = np.concatenate([pix, np.stack([us0[ok], vs0[ok]], axis=1)])
        z0 = np.concatenate([z0, zb0[ok]])
        is_bwd = np.concatenate([is_bwd, np.ones(int(ok.sum()), dtype=bool)])

    sel = _keep_closest(z0, max_points)
    if len(sel) < 3:
        raise InsufficientDataError(f"only {len(sel)} correspondences survived filtering")
    return CorrespondenceSet(x0[sel], x1[sel], pix[sel], backward=is_bwd[sel])


def build_correspondences(intr, depth0, depth1, fwd, bwd, rigid, cfg=None):
    """Forward-backward check, dilation and sampling in one call.

    Returns ``(correspondences, rejected)`` where ``rejected`` is the
    undilated occlusion / inconsistency mask.
    """
    cfg = cfg or CorrespondenceConfig()
    rejected = forward_backward_mask(fwd, bwd, cfg.fb_threshold)
    corr = sample_correspondences(intr, depth0, depth1, fwd, rigid, rejected,
                                  stride=cfg.stride, max_points=cfg.max_points,
                                  dilation=cfg.dilation, sampling=cfg.depth_sampling,
                                  bwd=bwd, bidirectional=cfg.bidirectional)
    return corr, rejected
