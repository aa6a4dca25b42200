"""End-point error, relative pose error, rigidity IoU and report aggregation."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import InsufficientDataError, UsageError
from .geometry import rotation_angle, rotation_to_euler

DEFAULT_FAILURE_THRESHOLD = 100.0
RATIO_BINS = ("<10%", "10-40%", ">40%")
AVERAGED = ("epe_ef", "epe_psf", "rpe_t", "rpe_r", "rigidity_miou")


@dataclass
class FramePairMetrics:
    epe_ef: float
    epe_psf: float
    rpe_t: float
    rpe_r: float
    rigidity_miou: float
    nonrigid_ratio: float
    failed: bool = False
    rpe_geodesic: float = 0.0
    name: str = ""


@dataclass
class EvalReport:
    pairs: list
    bins: dict
    overall: dict
    failure_count: int
    failure_threshold: float = DEFAULT_FAILURE_THRESHOLD
    empty: bool = False
    bin_counts: dict = field(default_factory=dict)


def _valid_mask(shape, valid):
    if valid is None:
        return np.ones(shape, dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != shape:
        raise UsageError(f"valid mask is {valid.shape}, fields are {shape}")
    return valid


def epe(est, gt, valid=None):
    """Mean ``||est - gt||`` over valid pixels (pixels with NaN are skipped too)."""
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if est.shape != gt.shape:
        raise UsageError(f"shape mismatch {est.shape} vs {gt.shape}")
    err = np.linalg.norm(est - gt, axis=-1)
    m = _valid_mask(err.shape, valid) & np.isfinite(err)
    if not m.any():
        raise InsufficientDataError("no valid pixels for EPE")
    return float(err[m].mean())


def rpe(est, gt):
    """``(translation error in m, rotation error in degrees)`` of ``gt⁻¹ ∘ est``.

    The rotation error is the 2-norm of the error rotation's Euler angles.
    """
    E = gt.inverse().compose(est)
    e = rotation_to_euler(E.rotation)
    return float(np.linalg.norm(E.translation)), math.degrees(float(np.linalg.norm(e.as_array())))


def rpe_geodesic(est, gt):
    E = gt.inverse().compose(est)
    return math.degrees(rotation_angle(E.rotation))


def _iou(a, b):
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def mean_iou(est, gt, valid=None):
    """Average of the rigid-class and non-rigid-class IoU."""
    est = np.asarray(est, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if est.shape != gt.shape:
        raise UsageError(f"shape mismatch {est.shape} vs {gt.shape}")
    m = _valid_mask(gt.shape, valid)
    e, g = est[m], gt[m]
    return 0.5 * (_iou(e, g) + _iou(~e, ~g))


def nonrigid_ratio(gt_rigidity, valid=None):
    r = np.asarray(gt_rigidity, dtype=bool)
    m = _valid_mask(r.shape, valid)
    n = np.count_nonzero(m)
    if n == 0:
        raise InsufficientDataError("no valid pixels")
    return np.count_nonzero(~r & m) / n


def ratio_bin(ratio):
    """``<10%`` below 0.1, ``>40%`` strictly above 0.4, ``10-40%`` in between."""
    if ratio < 0.1:
        return "<10%"
    if ratio <= 0.4:
        return "10-40%"
    return ">40%"


def is_failure(m, threshold=DEFAULT_FAILURE_THRESHOLD):
    return bool(m.epe_ef > threshold or m.epe_psf > threshold)


def _means(items):
    if not items:
        return {k: math.nan for k in AVERAGED}
    return {k: float(np.mean([getattr(m, k) for m in items])) for k in AVERAGED}


def aggregate(metrics, failure_threshold=DEFAULT_FAILURE_THRESHOLD):
    """Flag failures (either EPE above the threshold) and average the rest.

    Failed pairs are counted and left out of every average; the non-rigid
    ratio bins partition all pairs, failed or not.
    """
    metrics = list(metrics)
    if not metrics:
        raise InsufficientDataError("aggregate needs at least one pair")
    pairs = []
    for m in metrics:
        m = FramePairMetrics(**{f.name: getattr(m, f.name) for f in fields(FramePairMetrics)})
        m.failed = is_failure(m, failure_threshold)
        pairs.append(m)
    kept = [m for m in pairs if not m.failed]
    bins, counts = {}, {}
    for name in RATIO_BINS:
        members = [m for m in pairs if ratio_bin(m.nonrigid_ratio) == name]
        counts[name] = len(members)
        bins[name] = _means([m for m in members if not m.failed])
    return EvalReport(pairs, bins, _means(kept), len(pairs) - len(kept), failure_threshold,
                      empty=not kept, bin_counts=counts)


def format_report(report):
    """Plain-text table: one row per pair, then the bin and overall averages."""
    cols = ("epe_ef", "epe_psf", "rpe_t", "rpe_r", "rigidity_miou", "nonrigid_ratio")
    head = f"{'pair':<24}" + "".join(f"{c:>15}" for c in cols) + f"{'failed':>8}"
    lines = [head, "-" * len(head)]
    for m in report.pairs:
        lines.append(f"{m.name[:24]:<24}" + "".join(f"{getattr(m, c):>15.6g}" for c in cols)
                     + f"{'yes' if m.failed else 'no':>8}")
    lines.append("-" * len(head))
    for name, avg in list(report.bins.items()) + [("overall", report.overall)]:
        label = f"{name} (n={report.bin_counts.get(name, len(report.pairs) - report.failure_count)})"
        lines.append(f"{label:<24}" + "".join(f"{avg.get(c, math.nan):>15.6g}" for c in cols[:5]))
    lines.append(f"failures (EPE > {report.failure_threshold:g}): {report.failure_count} of {len(report.pairs)}")
    if report.empty:
        lines.append("every pair failed; averages are empty")
    return "\n".join(lines)


def report_to_text(report):
    """Machine-readable ``key = value`` document: one record per pair plus the summary."""
    lines = []
    for k, m in enumerate(report.pairs):
        for key, val in asdict(m).items():
            lines.append(f"pair.{k}.{key} = {_fmt(val)}")
    for name, avg in report.bins.items():
        lines.append(f"bin.{name}.count = {report.bin_counts.get(name, 0)}")
        for key, val in avg.items():
            lines.append(f"bin.{name}.{key} = {_fmt(val)}")
    for key, val in report.overall.items():
        lines.append(f"overall.{key} = {_fmt(val)}")
    lines.append(f"failure_count = {report.failure_count}")
    lines.append(f"failure_threshold = {_fmt(report.failure_threshold)}")
    lines.append(f"empty = {_fmt(report.empty)}")
    return "\n".join(lines) + "\n"


def _fmt(val):
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, float):
        return repr(val)
    return str(val)
