import numpy as np
import pytest

from rigidflow.correspondence import forward_backward_mask
from rigidflow.errors import UsageError
from rigidflow.geometry import RigidTransform, default_intrinsics, egomotion_flow, scene_flow_from_flow
from rigidflow.pipeline import gt_projected_scene_flow
from rigidflow.rigidity import rigidity_from_gt_psf
from rigidflow.synth import (KEYFRAME_INTERVALS, BUSY_OBJECT_COUNT, MovingObject, NoiseSpec, Primitive, SceneSpec,
                             make_scene, perturb, pick_interval, render_pair, scene_from_text, scene_to_text)


def _plane_sphere(motion):
    wall = Primitive("plane", (), RigidTransform.from_translation([0, 0, 3.0]))
    ball = Primitive("sphere", (0.4,), RigidTransform.from_translation([0, 0, 2.0]))
    cams = [RigidTransform.identity(), RigidTransform.identity()]
    return SceneSpec(default_intrinsics(), [wall], [MovingObject(ball, motion)], cams)


def test_defaults():
    assert KEYFRAME_INTERVALS == (1, 2, 5, 10, 20)
    assert BUSY_OBJECT_COUNT == (15.0, 5.0)
    import inspect
    sig = inspect.signature(make_scene).parameters
    assert (sig["object_count_mean"].default, sig["object_count_sigma"].default) == (15.0, 5.0)


def test_make_scene_count_and_determinism():
    for seed in range(5):
        assert len(make_scene(seed, object_count_mean=3, object_count_sigma=0).objects) == 3
    a, b = make_scene(11), make_scene(11)
    assert scene_to_text(a) == scene_to_text(b)
    assert scene_to_text(make_scene(12)) != scene_to_text(a)


def test_objects_in_free_space():
    from rigidflow.synth import render_depth
    spec = make_scene(3, object_count_mean=8, object_count_sigma=0)
    intr = spec.intrinsics
    bg_only = np.array([p.packed() for p in spec.background])
    for obj in spec.objects:
        c = obj.shape.pose.translation
        u = intr.fx * c[0] / c[2] + intr.cx
        v = intr.fy * c[1] / c[2] + intr.cy
        wall, _ = render_depth(spec, 0, np.array([u]), np.array([v]), prims=bg_only)
        assert c[2] < wall[0]


def test_pick_interval():
    rng = np.random.default_rng(0)
    for _ in range(200):
        i, j = pick_interval(rng, 21)
        assert j - i in KEYFRAME_INTERVALS and 0 <= i < j <= 20


def test_static_identity_camera():
    spec = SceneSpec(default_intrinsics(), [Primitive("plane", (), RigidTransform.from_translation([0, 0, 2]))],
                     [], [RigidTransform.identity()] * 2)
    b = render_pair(spec, (0, 1))
    # zero up to the pi(pi^-1(u)) round trip
    assert np.abs(b.flow_fwd).max() <= 1e-12 and np.abs(b.flow_bwd).max() <= 1e-12
    assert np.abs(gt_projected_scene_flow(b)).max() <= 1e-12
    assert b.rigidity.all() and b.valid.all()


def test_translated_sphere_scene_flow():
    b = render_pair(_plane_sphere(RigidTransform.from_translation([0.1, 0, 0])), (0, 1))
    obj = ~b.rigidity
    assert obj.sum() > 500
    # exact up to (x + 0.1) - x rounding
    np.testing.assert_allclose(b.scene_flow[obj], np.tile([0.1, 0, 0], (obj.sum(), 1)), rtol=0, atol=1e-15)
    assert np.all(b.scene_flow[b.rigidity] == 0)
    # independent check through the flow relation with the rendered depths
    sf = scene_flow_from_flow(b.intrinsics, b.depth0, b.depth1_registered, b.flow_fwd, b.pose01, "registered")
    np.testing.assert_allclose(sf[obj], b.scene_flow[obj], atol=1e-12)


def test_bad_pairs():
    spec = make_scene(0, object_count_mean=1, object_count_sigma=0, num_frames=3)
    for pair in ((1, 1), (0, 3), (-1, 0)):
        with pytest.raises(UsageError):
            render_pair(spec, pair)


@pytest.fixture(scope="module")
def bundles():
    out = []
    for seed in range(6):
        spec = make_scene(seed, object_count_mean=3, object_count_sigma=1)
        out.append(render_pair(spec, pick_interval(np.random.default_rng([seed, 1]), spec.num_frames)))
    return out


def test_composition_identity(bundles):
    for b in bundles:
        ok = b.valid & ~b.occlusion_fwd
        ef = egomotion_flow(b.intrinsics, b.depth0, b.pose01)
        psf = gt_projected_scene_flow(b)
        np.testing.assert_allclose((ef + psf)[ok], b.flow_fwd[ok], rtol=0, atol=1e-9)
        assert np.abs(psf[b.rigidity & ok]).max() <= 1e-9
        sf = scene_flow_from_flow(b.intrinsics, b.depth0, b.depth1_registered, b.flow_fwd, b.pose01, "registered")
        assert np.nanmax(np.abs(sf[ok] - b.scene_flow[ok])) <= 1e-6


def test_rigidity_matches_psf(bundles):
    for b in bundles:
        psf = np.linalg.norm(gt_projected_scene_flow(b), axis=-1)
        moving = ~b.rigidity & b.valid
        if moving.any() and psf[moving].min() <= 0.1:
            continue  # statement covers objects whose image motion exceeds 0.1 px
        np.testing.assert_array_equal(rigidity_from_gt_psf(gt_projected_scene_flow(b), 1e-3, b.valid),
                                      b.rigidity & b.valid)


def test_fb_closure_piecewise_constant():
    # translating camera and object in front of fronto-parallel planes: flow is piecewise constant
    wall = Primitive("plane", (), RigidTransform.from_translation([0, 0, 3.0]))
    box = Primitive("box", (0.3, 0.3, 0.05), RigidTransform.from_translation([0, 0, 1.5]))
    cams = [RigidTransform.identity(), RigidTransform.from_translation([0.05, 0, 0])]
    spec = SceneSpec(default_intrinsics(), [wall],
                     [MovingObject(box, RigidTransform.from_translation([0.0, 0.05, 0]))], cams)
    b = render_pair(spec, (0, 1))
    ok = b.valid & ~b.occlusion_fwd
    rej = forward_backward_mask(b.flow_fwd, b.flow_bwd, 1e-3)
    assert not rej[ok].any()


def test_depth_positive_and_occlusion_consistent(bundles):
    from rigidflow.geometry import sample_nearest
    for b in bundles:
        assert np.all(b.depth0[b.valid] > 0)
        u, v = b.intrinsics.pixel_grid()
        z1, inside = sample_nearest(b.depth1, u + b.flow_fwd[..., 0], v + b.flow_fwd[..., 1])
        disagree = ~inside | ~(np.abs(z1 - b.depth1_registered) <= 1e-9)
        # occluded pixels lie where the rendered frame-j depth does not match the moved point
        # (nearest sampling can also disagree at non-occluded pixels, so only the subset holds)
        occ = b.occlusion_fwd & b.valid
        near = ~inside | (z1 < b.depth1_registered - 1e-6) | ~np.isfinite(z1)
        assert np.all(near[occ] | disagree[occ])


def test_perturb_null_is_identity(bundles):
    b = bundles[0]
    c = perturb(b, NoiseSpec())
    for key in ("flow_fwd", "flow_bwd", "depth0", "depth1", "scene_flow"):
        assert getattr(c, key).tobytes() == getattr(b, key).tobytes()


def test_perturb_gaussian_sigma():
    spec = make_scene(0, object_count_mean=2, object_count_sigma=0)
    b = render_pair(spec, (0, 1))
    vals = []
    for seed in range(8):
        c = perturb(b, NoiseSpec(flow_sigma=0.5, seed=seed))
        d = (c.flow_fwd - b.flow_fwd)[np.isfinite(b.flow_fwd[..., 0])]
        vals.append(d.ravel())
    d = np.concatenate(vals)
    assert d.size >= 1e5
    assert abs(d.std() - 0.5) <= 0.05
    # correlated noise keeps the per-component std
    c = perturb(b, NoiseSpec(flow_sigma=0.5, noise_correlation=2.0, seed=3))
    assert abs((c.flow_fwd - b.flow_fwd)[b.valid].std() - 0.5) <= 0.1


def test_perturb_outlier_fraction():
    spec = make_scene(0, object_count_mean=2, object_count_sigma=0)
    b = render_pair(spec, (0, 1))
    noise = NoiseSpec(flow_sigma=0.5, outlier_fraction=0.3, outlier_magnitude=20, seed=5)
    c = perturb(b, noise)
    fin = np.all(np.isfinite(b.flow_fwd), axis=-1)
    big = np.linalg.norm(c.flow_fwd - b.flow_fwd, axis=-1) > 3 * 0.5 * np.sqrt(2)
    assert abs(big[fin].mean() - 0.3) <= 0.02


def test_perturb_deterministic_and_gt_untouched(bundles):
    b = bundles[1]
    n = NoiseSpec(flow_sigma=0.5, depth_sigma_rel=0.01, outlier_fraction=0.1, outlier_magnitude=20,
                  invalid_hole_fraction=0.05, seed=9, noise_correlation=1.5, outlier_patch=4)
    c, d = perturb(b, n), perturb(b, n)
    for key in ("flow_fwd", "flow_bwd", "depth0", "depth1"):
        assert getattr(c, key).tobytes() == getattr(d, key).tobytes()
    assert c.pose01.allclose(b.pose01, 0)
    np.testing.assert_array_equal(c.rigidity, b.rigidity)
    assert c.scene_flow.tobytes() == b.scene_flow.tobytes()
    assert c.flow_fwd_gt.tobytes() == b.flow_fwd.tobytes()
    assert abs(np.isnan(c.depth0[b.valid]).mean() - 0.05) <= 0.01


def test_noise_spec_validation():
    with pytest.raises(UsageError):
        NoiseSpec(flow_sigma=-1)
    with pytest.raises(UsageError):
        NoiseSpec(outlier_fraction=1.5)


def test_scene_text_round_trip():
    spec = make_scene(7, object_count_mean=4, object_count_sigma=1)
    back = scene_from_text(scene_to_text(spec))
    assert scene_to_text(back) == scene_to_text(spec)
    a, b = render_pair(spec, (0, 3)), render_pair(back, (0, 3))
    assert a.flow_fwd.tobytes() == b.flow_fwd.tobytes()
