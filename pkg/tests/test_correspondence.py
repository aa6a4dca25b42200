import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rigidflow.correspondence import (DEFAULT_DILATION, DEFAULT_FB_THRESHOLD, DEFAULT_MAX_POINTS, DEFAULT_STRIDE,
                                      dilate, forward_backward_mask, sample_correspondences)
from rigidflow.errors import InsufficientDataError, UsageError
from rigidflow.synth import make_scene, render_pair


def test_default_config():
    assert DEFAULT_FB_THRESHOLD == 0.75
    assert DEFAULT_DILATION == 10
    assert (DEFAULT_STRIDE, DEFAULT_MAX_POINTS) == (4, 10000)


def _fb_pair(back):
    fwd = np.zeros((3, 8, 2))
    bwd = np.zeros((3, 8, 2))
    fwd[1, 1] = (5, 0)
    bwd[1, 6] = back
    return forward_backward_mask(fwd, bwd)


def test_fb_examples():
    assert not _fb_pair((-5, 0))[1, 1]
    assert _fb_pair((-3, 0))[1, 1]
    # exactly at the threshold is kept; just above is rejected
    assert not _fb_pair((-4.25, 0))[1, 1]
    assert _fb_pair((-4.2499, 0))[1, 1]


def test_fb_out_of_bounds_and_nan():
    fwd = np.zeros((2, 4, 2))
    fwd[0, 3] = (1, 0)
    fwd[1, 0] = (np.nan, 0)
    m = forward_backward_mask(fwd, np.zeros_like(fwd))
    assert m[0, 3] and m[1, 0]
    assert m.sum() == 2
    with pytest.raises(UsageError):
        forward_backward_mask(fwd, np.zeros((2, 5, 2)))


def _dilate_oracle(mask, patch):
    H, W = mask.shape
    lo = (patch - 1) // 2
    out = np.zeros_like(mask)
    for y, x in zip(*np.nonzero(mask)):
        out[max(0, y - lo):y - lo + patch, max(0, x - lo):x - lo + patch] = True
    return out


def test_dilate_examples():
    assert not dilate(np.zeros((5, 5), bool), 3).any()
    m = np.zeros((5, 5), bool)
    m[2, 2] = True
    np.testing.assert_array_equal(dilate(m, 3), np.pad(np.ones((3, 3), bool), 1))
    m = np.zeros((5, 5), bool)
    m[0, 0] = True
    np.testing.assert_array_equal(dilate(m, 3), _dilate_oracle(m, 3))
    assert dilate(m, 3).sum() == 4
    with pytest.raises(UsageError):
        dilate(m, 0)


@given(st.integers(0, 2**32 - 1), st.integers(1, 12))
def test_dilate_matches_oracle(seed, patch):
    rng = np.random.default_rng(seed)
    m = rng.random((rng.integers(1, 20), rng.integers(1, 20))) < 0.05
    d = dilate(m, patch)
    np.testing.assert_array_equal(d, _dilate_oracle(m, patch))
    assert np.all(d >= m)


@pytest.fixture(scope="module")
def static_bundle():
    spec = make_scene(4, object_count_mean=0, object_count_sigma=0)
    return render_pair(spec, (0, 5))


def _sample(b, rigid=None, **kw):
    rej = forward_backward_mask(b.flow_fwd, b.flow_bwd)
    rigid = b.rigidity if rigid is None else rigid
    return sample_correspondences(b.intrinsics, b.depth0, b.depth1_registered, b.flow_fwd, rigid, rej,
                                  sampling="registered", **kw)


def test_static_pairs_match_gt_pose(static_bundle):
    corr = _sample(static_bundle)
    assert len(corr) > 100
    assert np.abs(static_bundle.pose01.apply(corr.x0) - corr.x1).max() <= 1e-9
    assert np.all(corr.x0[:, 2] > 0) and np.all(corr.x1[:, 2] > 0)
    # on the stride grid
    assert np.all(corr.pixels % 4 == 0)


def test_all_nonrigid_is_insufficient(static_bundle):
    with pytest.raises(InsufficientDataError):
        _sample(static_bundle, rigid=np.zeros(static_bundle.intrinsics.shape, bool))


def test_cap_keeps_closest(static_bundle):
    full = _sample(static_bundle)
    capped = _sample(static_bundle, max_points=50)
    assert len(capped) == 50
    kept = set(map(tuple, capped.pixels))
    dropped = np.array([z for p, z in zip(map(tuple, full.pixels), full.x0[:, 2]) if p not in kept])
    assert capped.x0[:, 2].max() <= dropped.min()


def test_deterministic_and_monotone(static_bundle):
    a = _sample(static_bundle)
    b = _sample(static_bundle)
    np.testing.assert_array_equal(a.x0, b.x0)
    smaller = static_bundle.rigidity.copy()
    smaller[:, 60:] = False
    c = _sample(static_bundle, rigid=smaller)
    assert set(map(tuple, c.pixels)) <= set(map(tuple, a.pixels))


def test_bidirectional_cap_is_total(static_bundle):
    b = static_bundle
    rej = forward_backward_mask(b.flow_fwd, b.flow_bwd)
    corr = sample_correspondences(b.intrinsics, b.depth0, b.depth1, b.flow_fwd, b.rigidity, rej,
                                  bwd=b.flow_bwd, bidirectional=True, max_points=300)
    assert len(corr) == 300
    assert corr.backward.any() and (~corr.backward).any()
