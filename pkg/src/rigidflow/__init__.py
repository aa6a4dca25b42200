"""Two-view RGB-D scene flow: robust relative pose from flow and a rigidity mask,
flow decomposition, an analytic synthetic generator, and evaluation tools."""
from .correspondence import CorrespondenceConfig, CorrespondenceSet, build_correspondences, forward_backward_mask
from .errors import (DataError, DegenerateGeometryError, DomainError, EstimationError, FormatError,
                     InsufficientDataError, RigidFlowError, UsageError)
from .geometry import (EulerAngles, Intrinsics, RigidTransform, backproject, default_intrinsics, egomotion_flow,
                       flow_from_scene_flow, project, projected_scene_flow, scene_flow_from_flow)
from .kernels import BACKEND
from .metrics import FramePairMetrics, aggregate, epe, mean_iou, nonrigid_ratio, rpe
from .pipeline import FrameInputs, PipelineConfig, PipelineResult, run_pipeline
from .rigidity import rigidity_from_gt_psf, rigidity_from_residuals
from .solver import PoseEstimate, SolverConfig, gauss_newton_refine, procrustes_align, ransac_pose
from .synth import GroundTruthBundle, NoiseSpec, SceneSpec, make_scene, perturb, render_pair

__version__ = "0.1.0"
