"""Command-line entry point: generate, estimate, evaluate, visualize.

Exit codes: 0 success, 2 usage, 3 unreadable or malformed input,
4 insufficient data, 5 estimation failure.

Every flag may also be set in a config file (``--config PATH``): a plain
``key = value`` document whose keys are the long flag names with or without
the leading dashes. Flags on the command line win over the file, and the
file wins over the built-in defaults.
"""
from __future__ import annotations

import argparse
import configparser
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import io as rio
from .correspondence import CorrespondenceConfig, DEFAULT_DILATION, DEFAULT_FB_THRESHOLD, DEFAULT_MAX_POINTS, \
    DEFAULT_STRIDE
from .errors import FormatError, RigidFlowError, UsageError
from .geometry import Intrinsics, default_intrinsics
from .metrics import DEFAULT_FAILURE_THRESHOLD, aggregate, format_report, report_to_text
from .pipeline import INIT_MODES, RIGIDITY_SOURCES, FrameInputs, PipelineConfig, run_pipeline
from .solver import SolverConfig
from .synth import KEYFRAME_INTERVALS, BUSY_OBJECT_COUNT, NoiseSpec, make_scene, perturb, pick_interval, \
    render_pair, scene_to_text
from .viz import error_heatmap, flow_to_color, save_image

DEFAULT_DEPTH_RANGE = "0.1 8"
CONFIG_SECTION = "rigidflow"


# --- argument parsing --------------------------------------------------------------

def _pair(text):
    parts = text.replace(",", " ").split()
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected two numbers, got {text!r}")
    lo, hi = (float(p) for p in parts)
    return lo, hi


def _ints(text):
    try:
        vals = tuple(int(p) for p in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("intervals must be positive integers")
    return vals


def _depth_range(text):
    if text.strip().lower() in ("none", "off", ""):
        return None
    return _pair(text)


def _bool(text):
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_pipeline_flags(p):
    g = p.add_argument_group("pipeline")
    g.add_argument("--rigidity", choices=RIGIDITY_SOURCES, default="gt-psf",
                   help="rigidity mask source (default: %(default)s; 'all' is the refine-only baseline)")
    g.add_argument("--mask", help="rigidity mask PNG for --rigidity external (nonzero = rigid)")
    g.add_argument("--init", choices=INIT_MODES, default="identity",
                   help="pose initialisation (default: %(default)s)")
    g.add_argument("--pose", help="trajectory file with the initial pose for --init external")
    g.add_argument("--fb-threshold", type=float, default=DEFAULT_FB_THRESHOLD,
                   help="forward-backward consistency threshold in px (default: %(default)s)")
    g.add_argument("--dilation", type=int, default=DEFAULT_DILATION,
                   help="side of the square dilating rejected pixels (default: %(default)s)")
    g.add_argument("--stride", type=int, default=DEFAULT_STRIDE,
                   help="pixel sampling stride (default: %(default)s)")
    g.add_argument("--max-points", type=int, default=DEFAULT_MAX_POINTS,
                   help="cap on correspondences, closest kept (default: %(default)s)")
    g.add_argument("--bidirectional", type=_bool, nargs="?", const=True, default=False,
                   help="also sample pairs from the backward flow (default: %(default)s)")
    g.add_argument("--depth-sampling", choices=("nearest", "bilinear", "registered"), default="nearest",
                   help="how frame-1 depth is read at the flow target (default: %(default)s)")
    g.add_argument("--depth-range", type=_depth_range, default=DEFAULT_DEPTH_RANGE,
                   help="valid depth interval in m, 'none' to disable (default: %(default)s)")
    g.add_argument("--depth-scale", type=float, default=rio.DEFAULT_DEPTH_SCALE,
                   help="depth PNG units per metre (default: %(default)s)")
    g.add_argument("--huber-delta", type=float, default=SolverConfig.huber_delta,
                   help="Huber scale in m (default: %(default)s)")
    g.add_argument("--delta-mode", choices=("fixed", "mad"), default="fixed",
                   help="'mad' rescales the Huber delta from the initial residuals (default: %(default)s)")
    g.add_argument("--no-huber", type=_bool, nargs="?", const=True, default=False,
                   help="plain least squares instead of the Huber loss")
    g.add_argument("--max-iterations", type=int, default=SolverConfig.max_iterations,
                   help="Gauss-Newton iteration cap (default: %(default)s)")
    g.add_argument("--ransac-iterations", type=int, default=SolverConfig.ransac_iterations,
                   help="RANSAC hypotheses (default: %(default)s)")
    g.add_argument("--ransac-threshold", type=float, default=SolverConfig.ransac_inlier_threshold,
                   help="RANSAC inlier distance in m (default: %(default)s)")
    g.add_argument("--residual-rounds", type=int, default=3,
                   help="rounds of residual segmentation (default: %(default)s)")
    g.add_argument("--seed", type=int, default=0, help="random seed (default: %(default)s)")


def build_parser():
    parser = argparse.ArgumentParser(prog="rigidflow", description=__doc__.split("\n")[0],
                                     formatter_class=argparse.RawDescriptionHelpFormatter,
                                     epilog="exit codes: 2 usage, 3 bad input file, 4 insufficient data, "
                                            "5 estimation failure")
    parser.add_argument("--config", help="key = value file supplying defaults for any flag")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render synthetic frame pairs with ground truth")
    g.add_argument("--out", required=True, help="output directory; one bundle per pair")
    g.add_argument("--count", type=int, default=1, help="number of pairs (default: %(default)s)")
    g.add_argument("--seed", type=int, default=0, help="seed of the first pair (default: %(default)s)")
    g.add_argument("--objects-mean", type=float, default=BUSY_OBJECT_COUNT[0],
                   help="mean moving-object count (default: %(default)s)")
    g.add_argument("--objects-sigma", type=float, default=BUSY_OBJECT_COUNT[1],
                   help="std of the object count (default: %(default)s)")
    g.add_argument("--intervals", type=_ints, default=" ".join(map(str, KEYFRAME_INTERVALS)),
                   help="keyframe intervals to draw from (default: %(default)s)")
    g.add_argument("--frames", type=int, default=21, help="camera path length (default: %(default)s)")
    g.add_argument("--extent", type=float, default=2.0, help="room scale in m (default: %(default)s)")
    g.add_argument("--width", type=int, default=160, help="image width (default: %(default)s)")
    g.add_argument("--height", type=int, default=120, help="image height (default: %(default)s)")
    g.add_argument("--focal", type=float, default=120.0, help="focal length in px (default: %(default)s)")
    g.add_argument("--flow-sigma", type=float, default=0.0, help="flow noise std in px (default: %(default)s)")
    g.add_argument("--noise-correlation", type=float, default=0.0,
                   help="smoothing std of the flow noise in px (default: %(default)s)")
    g.add_argument("--depth-noise", type=float, default=0.0,
                   help="relative depth noise std (default: %(default)s)")
    g.add_argument("--outlier-fraction", type=float, default=0.0,
                   help="fraction of flow replaced by outliers (default: %(default)s)")
    g.add_argument("--outlier-magnitude", type=float, default=0.0,
                   help="outlier vector length bound in px (default: %(default)s)")
    g.add_argument("--outlier-patch", type=int, default=1,
                   help="side of the outlier cells in px (default: %(default)s)")
    g.add_argument("--holes", type=float, default=0.0, help="fraction of depth set invalid (default: %(default)s)")
    g.add_argument("--depth-scale", type=float, default=rio.DEFAULT_DEPTH_SCALE,
                   help="depth PNG units per metre (default: %(default)s)")

    e = sub.add_parser("estimate", help="run the pipeline on one frame pair")
    e.add_argument("bundle", nargs="?", help="bundle directory (alternative to the per-file flags)")
    e.add_argument("--intrinsics", help="intrinsics file 'fx fy cx cy width height'")
    e.add_argument("--depth0", help="frame-0 depth PNG")
    e.add_argument("--depth1", help="frame-1 depth PNG")
    e.add_argument("--flow-fwd", help="forward flow .flo")
    e.add_argument("--flow-bwd", help="backward flow .flo")
    e.add_argument("--out", help="directory for pose, flow fields and images")
    e.add_argument("--images", type=_bool, nargs="?", const=True, default=False,
                   help="also write colour-coded flow PNGs to --out")
    _add_pipeline_flags(e)

    v = sub.add_parser("evaluate", help="run the pipeline over many bundles and report metrics")
    v.add_argument("bundles", nargs="+", help="bundle directories, or parents containing them")
    v.add_argument("--jobs", type=int, default=1, help="pairs processed concurrently (default: %(default)s)")
    v.add_argument("--failure-threshold", type=float, default=DEFAULT_FAILURE_THRESHOLD,
                   help="EPE in px above which a pair counts as failed (default: %(default)s)")
    v.add_argument("--report", help="write the machine-readable report here")
    _add_pipeline_flags(v)

    z = sub.add_parser("visualize", help="colour-code a flow field or an error map")
    z.add_argument("flow", help=".flo file to render")
    z.add_argument("--out", required=True, help="output PNG")
    z.add_argument("--gt", help="ground-truth .flo; renders an end-point error heatmap instead")
    z.add_argument("--max-magnitude", type=float, default=None,
                   help="flow magnitude at full saturation (default: 99th percentile)")
    z.add_argument("--cap", type=float, default=1.0, help="error mapped to full intensity in px (default: %(default)s)")
    return parser


def read_config(path):
    """``{dest: value}`` from a ``key = value`` file (an optional section header is allowed)."""
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read config {path}: {exc}") from exc
    if not text.lstrip().startswith("["):
        text = f"[{CONFIG_SECTION}]\n" + text
    try:
        cp.read_string(text, source=path)
    except configparser.Error as exc:
        raise FormatError(f"bad config {path}: {exc}") from exc
    out = {}
    for section in cp.sections():
        for key, val in cp.items(section):
            out[key.lstrip("-").replace("-", "_")] = val
    return out


def _subparsers(parser):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices
    return {}


def parse_args(argv=None):
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        values = read_config(known.config)
        for sp in _subparsers(parser).values():
            dests = {a.dest for a in sp._actions}
            sp.set_defaults(**{k: v for k, v in values.items() if k in dests})
        unknown = set(values) - {a.dest for sp in _subparsers(parser).values() for a in sp._actions}
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    args = parser.parse_args(argv)
    # config-file values arrive as strings; run them through the flag's type
    sp = _subparsers(parser)[args.command]
    for action in sp._actions:
        val = getattr(args, action.dest, None)
        if isinstance(val, str) and action.type is not None and action.type is not str:
            try:
                setattr(args, action.dest, action.type(val))
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"bad value for {action.dest}: {exc}") from None
        if action.choices is not None and getattr(args, action.dest, None) is not None \
                and not isinstance(action, argparse._SubParsersAction) \
                and getattr(args, action.dest) not in action.choices:
            raise UsageError(f"{action.dest} must be one of {list(action.choices)}")
    return args


# --- commands ------------------------------------------------------------------------

def pipeline_config(args):
    mask = args.mask
    pose = None
    if args.rigidity == "external" and not mask:
        raise UsageError("--rigidity external needs --mask")
    if args.init == "external":
        if not args.pose:
            raise UsageError("--init external needs --pose")
        poses = rio.read_trajectory(args.pose)
        if not poses:
            raise FormatError(f"{args.pose} holds no pose")
        pose = poses[0][1]
    corr = CorrespondenceConfig(fb_threshold=args.fb_threshold, dilation=args.dilation, stride=args.stride,
                                max_points=args.max_points, bidirectional=args.bidirectional,
                                depth_sampling=args.depth_sampling)
    solver = SolverConfig(huber_delta=args.huber_delta, max_iterations=args.max_iterations,
                          ransac_iterations=args.ransac_iterations,
                          ransac_inlier_threshold=args.ransac_threshold, seed=args.seed,
                          robust=not args.no_huber, delta_mode=args.delta_mode)
    return PipelineConfig(rigidity=args.rigidity, init=args.init, external_mask=mask, external_pose=pose,
                          residual_rounds=args.residual_rounds, depth_range=args.depth_range,
                          correspondence=corr, solver=solver)


def cmd_generate(args):
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    intr = Intrinsics(args.focal, args.focal, (args.width - 1) / 2, (args.height - 1) / 2,
                      args.width, args.height)
    if (args.width, args.height, args.focal) == (160, 120, 120.0):
        intr = default_intrinsics()
    os.makedirs(args.out, exist_ok=True)
    for n in range(args.count):
        seed = args.seed + n
        spec = make_scene(seed, object_count_mean=args.objects_mean, object_count_sigma=args.objects_sigma,
                          extent=args.extent, num_frames=args.frames, intrinsics=intr)
        frames = pick_interval(np.random.default_rng([seed, 1]), spec.num_frames, args.intervals)
        bundle = render_pair(spec, frames)
        noise = NoiseSpec(flow_sigma=args.flow_sigma, depth_sigma_rel=args.depth_noise,
                          outlier_fraction=args.outlier_fraction, outlier_magnitude=args.outlier_magnitude,
                          invalid_hole_fraction=args.holes, seed=seed,
                          noise_correlation=args.noise_correlation, outlier_patch=args.outlier_patch)
        if not noise.is_null():
            bundle = perturb(bundle, noise)
        d = os.path.join(args.out, f"pair_{n:04d}")
        rio.write_bundle(d, bundle, args.depth_scale)
        with open(os.path.join(d, "scene.txt"), "w", encoding="utf-8") as fh:
            fh.write(scene_to_text(spec))
            fh.write(f"frames = {frames[0]} {frames[1]}\n")
        print(f"{d}: frames {frames[0]}->{frames[1]}, {len(spec.objects)} objects")
    return 0


def _load_inputs(args):
    if args.bundle:
        return rio.read_bundle(args.bundle, args.depth_scale)
    need = ("intrinsics", "depth0", "depth1", "flow_fwd", "flow_bwd")
    missing = [n for n in need if not getattr(args, n)]
    if missing:
        raise UsageError("give a bundle directory or all of --" + ", --".join(m.replace("_", "-") for m in missing))
    return FrameInputs(rio.read_intrinsics(args.intrinsics), rio.read_depth(args.depth0, args.depth_scale),
                       rio.read_depth(args.depth1, args.depth_scale), rio.read_flo(args.flow_fwd),
                       rio.read_flo(args.flow_bwd))


def _print_pose(result):
    T = result.pose.transform
    print("pose01 " + rio.format_pose_line(0.0, T))
    print(f"iterations {result.pose.iterations_used}  converged {result.pose.converged}  "
          f"correspondences {len(result.correspondences)}")


def cmd_estimate(args):
    cfg = pipeline_config(args)
    inputs = _load_inputs(args)
    if cfg.rigidity in ("gt", "gt-psf") and not args.bundle:
        raise UsageError(f"--rigidity {cfg.rigidity} needs a ground-truth bundle")
    result = run_pipeline(inputs, cfg, name=args.bundle or "")
    _print_pose(result)
    if result.metrics is not None:
        m = result.metrics
        print(f"epe_ef {m.epe_ef:.6g}  epe_psf {m.epe_psf:.6g}  rpe_t {m.rpe_t:.6g} m  rpe_r {m.rpe_r:.6g} deg  "
              f"miou {m.rigidity_miou:.4f}  nonrigid {m.nonrigid_ratio:.4f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        p = lambda name: os.path.join(args.out, name)  # noqa: E731
        rio.write_trajectory(p("pose01.txt"), [(0.0, result.pose.transform)])
        rio.write_flo(p("egomotion_flow.flo"), result.egomotion_flow)
        rio.write_flo(p("projected_scene_flow.flo"), result.projected_scene_flow)
        rio.write_sfl(p("scene_flow.sfl"), result.scene_flow)
        rio.write_mask(p("rigidity.png"), result.rigidity)
        if args.images:
            scale = max(np.nanpercentile(np.linalg.norm(inputs.flow_fwd, axis=-1), 99), 1e-6)
            save_image(p("flow_fwd.png"), flow_to_color(inputs.flow_fwd, scale))
            save_image(p("egomotion_flow.png"), flow_to_color(result.egomotion_flow, scale))
            save_image(p("projected_scene_flow.png"), flow_to_color(result.projected_scene_flow, scale))
    return 0


def expand_bundles(paths):
    """Bundle directories in the given order; a parent expands to its sorted children."""
    found = []
    for path in paths:
        if os.path.isfile(os.path.join(path, rio.BUNDLE_FILES["intrinsics"])):
            found.append(path)
            continue
        if not os.path.isdir(path):
            raise FormatError(f"{path} is not a bundle directory")
        kids = sorted(os.path.join(path, k) for k in os.listdir(path)
                      if os.path.isfile(os.path.join(path, k, rio.BUNDLE_FILES["intrinsics"])))
        if not kids:
            raise FormatError(f"no bundles under {path}")
        found.extend(kids)
    return found


def _evaluate_one(job):
    path, cfg, depth_scale = job
    bundle = rio.read_bundle(path, depth_scale)
    return run_pipeline(bundle, cfg, name=os.path.basename(os.path.normpath(path))).metrics


def cmd_evaluate(args):
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    cfg = pipeline_config(args)
    jobs = [(p, cfg, args.depth_scale) for p in expand_bundles(args.bundles)]
    if args.jobs == 1 or len(jobs) == 1:
        metrics = [_evaluate_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            metrics = list(pool.map(_evaluate_one, jobs))
    report = aggregate(metrics, args.failure_threshold)
    print(format_report(report))
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(report_to_text(report))
    return 0


def cmd_visualize(args):
    flow = rio.read_flo(args.flow)
    if args.gt:
        img = error_heatmap(flow, rio.read_flo(args.gt), cap=args.cap)
    else:
        img = flow_to_color(flow, args.max_magnitude)
    save_image(args.out, img)
    return 0


COMMANDS = {"generate": cmd_generate, "estimate": cmd_estimate, "evaluate": cmd_evaluate,
            "visualize": cmd_visualize}


def main(argv=None):
    try:
        args = parse_args(argv)
        return COMMANDS[args.command](args)
    except RigidFlowError as exc:
        print(f"rigidflow: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"rigidflow: {exc}", file=sys.stderr)
        return FormatError.exit_code


if __name__ == "__main__":
    sys.exit(main())
