"""Two-view pipeline: rigidity -> correspondences -> pose -> flow decomposition."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .correspondence import CorrespondenceConfig, build_correspondences
from .errors import UsageError
from .geometry import RigidTransform, egomotion_flow, projected_scene_flow, scene_flow_from_flow, valid_depth
from .metrics import FramePairMetrics, epe, mean_iou, nonrigid_ratio, rpe, rpe_geodesic
from .rigidity import load_external_mask, rigidity_from_gt_psf, rigidity_from_residuals
from .solver import SolverConfig, gauss_newton_refine, ransac_pose

RIGIDITY_SOURCES = ("external", "gt", "gt-psf", "residual", "all")
INIT_MODES = ("identity", "external", "ransac")


@dataclass(eq=False)
class FrameInputs:
    intrinsics: object
    depth0: np.ndarray
    depth1: np.ndarray
    flow_fwd: np.ndarray
    flow_bwd: np.ndarray
    depth1_registered: np.ndarray = None

    @classmethod
    def from_bundle(cls, bundle):
        return cls(bundle.intrinsics, bundle.depth0, bundle.depth1, bundle.flow_fwd, bundle.flow_bwd,
                   bundle.depth1_registered)


@dataclass(frozen=True)
class PipelineConfig:
    rigidity: str = "gt-psf"
    init: str = "identity"
    external_mask: object = None
    external_pose: RigidTransform = None
    psf_eps: float = 1e-3
    residual_rounds: int = 3
    residual_k: float = 2.5
    depth_range: tuple = None
    correspondence: CorrespondenceConfig = field(default_factory=CorrespondenceConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.rigidity not in RIGIDITY_SOURCES:
            raise UsageError(f"rigidity must be one of {RIGIDITY_SOURCES}, got {self.rigidity!r}")
        if self.init not in INIT_MODES:
            raise UsageError(f"init must be one of {INIT_MODES}, got {self.init!r}")
        if self.rigidity == "external" and self.external_mask is None:
            raise UsageError("rigidity 'external' needs a mask")
        if self.init == "external" and self.external_pose is None:
            raise UsageError("init 'external' needs a pose")
        if self.depth_range is not None:
            lo, hi = self.depth_range
            if not (0 <= lo < hi):
                raise UsageError(f"bad depth range {self.depth_range}")


@dataclass(eq=False)
class PipelineResult:
    pose: object  # PoseEstimate
    rigidity: np.ndarray
    rejected: np.ndarray
    correspondences: object
    egomotion_flow: np.ndarray
    scene_flow: np.ndarray
    projected_scene_flow: np.ndarray
    init_pose: RigidTransform
    metrics: FramePairMetrics = None


def clip_depth(depth, depth_range):
    if depth is None or depth_range is None:
        return depth
    d = np.asarray(depth, dtype=np.float64)
    lo, hi = depth_range
    with np.errstate(invalid="ignore"):
        return np.where((d >= lo) & (d <= hi), d, np.nan)


def gt_projected_scene_flow(bundle):
    ef = egomotion_flow(bundle.intrinsics, bundle.depth0, bundle.pose01)
    return projected_scene_flow(bundle.clean_flow_fwd, ef)


def evaluate_pair(result, bundle, name=""):
    """Score a pipeline result against a ground-truth bundle."""
    intr = bundle.intrinsics
    valid = bundle.valid & valid_depth(bundle.depth0)
    ef_gt = egomotion_flow(intr, bundle.depth0, bundle.pose01)
    psf_gt = projected_scene_flow(bundle.clean_flow_fwd, ef_gt)
    rt, rr = rpe(result.pose.transform, bundle.pose01)
    return FramePairMetrics(
        epe_ef=epe(result.egomotion_flow, ef_gt, valid),
        epe_psf=epe(result.projected_scene_flow, psf_gt, valid),
        rpe_t=rt,
        rpe_r=rr,
        rigidity_miou=mean_iou(result.rigidity, bundle.rigidity, valid),
        nonrigid_ratio=nonrigid_ratio(bundle.rigidity, valid),
        rpe_geodesic=rpe_geodesic(result.pose.transform, bundle.pose01),
        name=name,
    )


def run_pipeline(inputs, cfg=None, gt=None, name=""):
    """Estimate the relative pose and split the observed flow.

    ``inputs`` is a :class:`FrameInputs` or a bundle. ``gt`` (a bundle) is
    needed for the ``gt`` / ``gt-psf`` rigidity sources and for metrics.
    """
    cfg = cfg or PipelineConfig()
    if not isinstance(inputs, FrameInputs):
        if gt is None:
            gt = inputs
        inputs = FrameInputs.from_bundle(inputs)
    intr = inputs.intrinsics
    corr_cfg = cfg.correspondence
    depth0 = clip_depth(inputs.depth0, cfg.depth_range)
    if corr_cfg.depth_sampling == "registered":
        if inputs.depth1_registered is None:
            raise UsageError("registered depth sampling needs depth1_registered")
        depth1 = clip_depth(inputs.depth1_registered, cfg.depth_range)
    else:
        depth1 = clip_depth(inputs.depth1, cfg.depth_range)
    for nm, g in (("depth0", depth0), ("depth1", depth1), ("flow_fwd", inputs.flow_fwd),
                  ("flow_bwd", inputs.flow_bwd)):
        intr.check_grid(g, nm)
    fwd, bwd = inputs.flow_fwd, inputs.flow_bwd
    valid0 = valid_depth(depth0)

    if cfg.rigidity in ("gt", "gt-psf") and gt is None:
        raise UsageError(f"rigidity '{cfg.rigidity}' needs ground truth")
    init = RigidTransform.identity()
    if cfg.init == "external":
        init = cfg.external_pose

    est = None
    if cfg.rigidity == "external":
        rigid = load_external_mask(cfg.external_mask, intr.shape) & valid0
    elif cfg.rigidity == "gt":
        rigid = np.asarray(gt.rigidity, dtype=bool) & valid0
    elif cfg.rigidity == "gt-psf":
        rigid = rigidity_from_gt_psf(gt_projected_scene_flow(gt), cfg.psf_eps, gt.valid) & valid0
    elif cfg.rigidity == "all":
        rigid = valid0.copy()
    else:
        rigid, est = rigidity_from_residuals(intr, depth0, depth1, fwd, bwd, cfg.solver,
                                             rounds=cfg.residual_rounds, corr_cfg=corr_cfg,
                                             k=cfg.residual_k,
                                             init="ransac" if cfg.init == "ransac" else init)

    corr, rejected = build_correspondences(intr, depth0, depth1, fwd, bwd, rigid, corr_cfg)
    if cfg.init == "ransac":
        ran = ransac_pose(corr, cfg.solver)
        init = ran.transform
        corr.inlier = ran.inliers
    elif est is not None:
        # residual segmentation already has a pose; refine it on the final mask
        init = est.transform
    est = gauss_newton_refine(corr, init, cfg.solver)

    T = est.transform
    ef = egomotion_flow(intr, depth0, T)
    sf = scene_flow_from_flow(intr, depth0, depth1, fwd, T, corr_cfg.depth_sampling)
    psf = projected_scene_flow(fwd, ef)
    result = PipelineResult(est, rigid, rejected, corr, ef, sf, psf, init)
    if gt is not None:
        result.metrics = evaluate_pair(result, gt, name)
    return result
