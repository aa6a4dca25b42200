import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rigidflow.errors import InsufficientDataError, UsageError
from rigidflow.geometry import RigidTransform
from rigidflow.metrics import (DEFAULT_FAILURE_THRESHOLD, FramePairMetrics, aggregate, epe, format_report, mean_iou,
                               nonrigid_ratio, ratio_bin, report_to_text, rpe, rpe_geodesic)

from conftest import random_transform


def test_epe_examples():
    gt = np.zeros((4, 4, 2))
    assert epe(gt, gt) == 0
    est = gt + [3, 4]
    assert epe(est, gt) == 5.0
    est[:2] = 0
    assert epe(est, gt) == 2.5
    with pytest.raises(InsufficientDataError):
        epe(est, gt, np.zeros((4, 4), bool))
    with pytest.raises(UsageError):
        epe(est, gt[:2])


@given(st.integers(0, 2**32 - 1), st.floats(-10, 10))
def test_epe_properties(seed, s):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3, 5, 2)), rng.normal(size=(3, 5, 2))
    assert epe(a, a) == 0
    assert epe(a, b) == pytest.approx(epe(b, a), rel=1e-12)
    assert epe(s * a, s * b) == pytest.approx(abs(s) * epe(a, b), rel=1e-9, abs=1e-12)


def test_rpe_examples():
    rng = np.random.default_rng(0)
    gt = random_transform(rng)
    assert rpe(gt, gt) == pytest.approx((0.0, 0.0), abs=1e-12)
    assert rpe(RigidTransform.identity(), RigidTransform.identity()) == (0.0, 0.0)
    t, r = rpe(gt.compose(RigidTransform.from_translation([0.01, 0, 0])), gt)
    assert t == pytest.approx(0.01, abs=1e-15) and r == pytest.approx(0, abs=1e-12)
    t, r = rpe(gt.compose(RigidTransform.from_rotvec([0, 0, math.radians(1)])), gt)
    assert t == pytest.approx(0, abs=1e-15)
    assert abs(r - 1.0) <= 1e-9
    assert rpe_geodesic(gt.compose(RigidTransform.from_rotvec([0, 0, math.radians(1)])), gt) \
        == pytest.approx(1.0, abs=1e-6)


@given(st.integers(0, 2**32 - 1))
def test_rpe_left_invariance(seed):
    rng = np.random.default_rng(seed)
    A, B, L = (random_transform(rng, 2.0, 3.0) for _ in range(3))
    assert rpe(L.compose(A), L.compose(B))[0] == pytest.approx(rpe(A, B)[0], abs=1e-9)


def test_mean_iou_examples():
    gt = np.zeros((4, 4), bool)
    gt[:2] = True
    assert mean_iou(gt, gt) == 1.0
    assert mean_iou(np.ones((4, 4), bool), gt) == 0.25
    assert mean_iou(~gt, gt) == 0.0
    # a class absent from both counts as a perfect match
    assert mean_iou(np.ones((2, 2), bool), np.ones((2, 2), bool)) == 1.0


@given(st.integers(0, 2**32 - 1))
def test_mean_iou_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((5, 6)) < 0.5, rng.random((5, 6)) < 0.5
    assert mean_iou(a, b) == mean_iou(b, a)
    assert mean_iou(a, a) == 1.0


def test_nonrigid_ratio_and_bins():
    assert nonrigid_ratio(np.ones((3, 3), bool)) == 0.0
    m = np.ones((2, 4), bool)
    m[0] = False
    assert nonrigid_ratio(m) == 0.5
    assert [ratio_bin(r) for r in (0.0, 0.0999, 0.1, 0.4, 0.4001, 1.0)] == \
        ["<10%", "<10%", "10-40%", "10-40%", ">40%", ">40%"]


def _pair(epe_psf, ratio=0.05, epe_ef=1.0):
    return FramePairMetrics(epe_ef, epe_psf, 0.01, 0.1, 0.9, ratio)


def test_aggregate_examples():
    assert DEFAULT_FAILURE_THRESHOLD == 100
    rep = aggregate([_pair(1), _pair(2), _pair(150)])
    assert rep.failure_count == 1
    assert rep.overall["epe_psf"] == 1.5
    assert [p.failed for p in rep.pairs] == [False, False, True]
    # either EPE can trigger a failure
    assert aggregate([_pair(1, epe_ef=101)]).failure_count == 1
    everything = aggregate([_pair(200), _pair(300)])
    assert everything.empty and everything.failure_count == 2
    assert math.isnan(everything.overall["epe_psf"])
    with pytest.raises(InsufficientDataError):
        aggregate([])


def test_aggregate_infinite_threshold_is_plain_mean():
    rng = np.random.default_rng(1)
    pairs = [_pair(float(v), float(r)) for v, r in zip(rng.uniform(0, 500, 9), rng.random(9))]
    rep = aggregate(pairs, math.inf)
    assert rep.failure_count == 0
    assert rep.overall["epe_psf"] == pytest.approx(np.mean([p.epe_psf for p in pairs]), rel=1e-15)
    assert sum(rep.bin_counts.values()) == 9


def test_report_text():
    rep = aggregate([_pair(1, 0.05), _pair(150, 0.5)])
    table = format_report(rep)
    assert "failures (EPE > 100): 1 of 2" in table
    text = report_to_text(rep)
    assert "failure_count = 1\n" in text
    assert "pair.1.failed = true" in text
    assert "bin.>40%.count = 1" in text
