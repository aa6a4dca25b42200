"""Analytic synthetic dynamic scenes with exact two-frame ground truth.

A scene is a static background (an enclosing room box plus clutter) and a
handful of rigidly moving foreground primitives, observed by a camera that
follows a smooth trajectory. Every pixel is ray-cast against the analytic
primitives, so depth, flow, rigidity, occlusion and scene flow are exact to
floating-point precision.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from . import kernels
from .errors import FormatError, UsageError
from .geometry import (Intrinsics, RigidTransform, _backproject, _project, default_intrinsics,
                       rotvec_to_matrix, valid_depth)

KEYFRAME_INTERVALS = (1, 2, 5, 10, 20)
BUSY_OBJECT_COUNT = (15.0, 5.0)
DESK_OBJECT_COUNT = (3.0, 1.0)
OCCLUSION_MARGIN = 1e-6

_KIND_CODE = {"plane": kernels.PLANE, "sphere": kernels.SPHERE, "box": kernels.BOX}
_KIND_SIZE = {"plane": 0, "sphere": 1, "box": 3}


@dataclass(frozen=True, eq=False)
class Primitive:
    """Plane (local z = 0), sphere or box (axis-aligned in its local frame).

    ``pose`` maps local to world coordinates. ``size`` is ``()`` for a
    plane, ``(radius,)`` for a sphere and half extents for a box.
    """

    kind: str
    size: tuple
    pose: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        if self.kind not in _KIND_CODE:
            raise UsageError(f"unknown primitive kind {self.kind!r}")
        size = tuple(float(s) for s in self.size)
        if len(size) != _KIND_SIZE[self.kind] or any(not s > 0 for s in size):
            raise UsageError(f"bad size {self.size} for {self.kind}")
        object.__setattr__(self, "size", size)

    def packed(self, pose=None):
        pose = pose or self.pose
        row = np.zeros(16)
        row[0] = _KIND_CODE[self.kind]
        row[1:4] = pose.translation
        if self.kind == "plane":
            row[4:7] = pose.rotation[:, 2]
        elif self.kind == "sphere":
            row[4] = self.size[0]
        else:
            row[4:7] = self.size
            row[7:16] = pose.rotation.ravel()
        return row


def _power(T, k):
    if k < 0:
        T, k = T.inverse(), -k
    out = RigidTransform.identity()
    for _ in range(k):
        out = T.compose(out)
    return out


@dataclass(frozen=True, eq=False)
class MovingObject:
    """A primitive (posed at frame 0) with a constant per-frame world motion."""

    shape: Primitive
    motion: RigidTransform

    def displacement(self, i, j):
        """World-frame transform taking the object from frame ``i`` to ``j``."""
        return _power(self.motion, j - i)

    def pose_at(self, k):
        return self.displacement(0, k).compose(self.shape.pose)


@dataclass(eq=False)
class SceneSpec:
    intrinsics: Intrinsics
    background: list
    objects: list
    camera_path: list  # camera-to-world pose per frame; frame 0 is the world frame

    def __post_init__(self):
        if not self.background:
            raise UsageError("a scene needs at least one background primitive")
        if not self.camera_path:
            raise UsageError("a scene needs at least one camera pose")

    @property
    def num_frames(self):
        return len(self.camera_path)

    def primitives_at(self, k):
        rows = [p.packed() for p in self.background]
        rows += [o.shape.packed(o.pose_at(k)) for o in self.objects]
        return np.array(rows).reshape(-1, 16)


@dataclass(frozen=True)
class NoiseSpec:
    flow_sigma: float = 0.0
    depth_sigma_rel: float = 0.0
    outlier_fraction: float = 0.0
    outlier_magnitude: float = 0.0
    invalid_hole_fraction: float = 0.0
    seed: int = 0
    # std (px) of the Gaussian smoothing applied to the flow noise; 0 = white
    noise_correlation: float = 0.0
    # side (px) of the square cells that are perturbed together as outliers
    outlier_patch: int = 1

    def __post_init__(self):
        for f in ("flow_sigma", "depth_sigma_rel", "outlier_fraction", "outlier_magnitude",
                  "invalid_hole_fraction", "noise_correlation"):
            if not getattr(self, f) >= 0:
                raise UsageError(f"{f} must be non-negative")
        if self.outlier_fraction > 1 or self.invalid_hole_fraction > 1:
            raise UsageError("fractions must be <= 1")
        if self.outlier_patch < 1:
            raise UsageError("outlier_patch must be >= 1")

    def is_null(self):
        return (self.flow_sigma == 0 and self.depth_sigma_rel == 0 and self.invalid_hole_fraction == 0
                and (self.outlier_fraction == 0 or self.outlier_magnitude == 0))


@dataclass(eq=False)
class GroundTruthBundle:
    """One frame pair with exact ground truth; all grids on their frame's pixels.

    ``depth1_registered`` is the camera-1 depth of each frame-0 pixel's
    correspondence (frame-0 grid). ``flow_fwd_gt`` keeps the clean forward
    flow once :func:`perturb` has corrupted ``flow_fwd``. ``labels`` holds
    the owner of each frame-0 pixel: -1 no hit, 0 background, k >= 1 object k-1.
    """

    intrinsics: Intrinsics
    depth0: np.ndarray
    depth1: np.ndarray
    flow_fwd: np.ndarray
    flow_bwd: np.ndarray
    rigidity: np.ndarray
    occlusion_fwd: np.ndarray
    pose01: RigidTransform
    scene_flow: np.ndarray
    valid: np.ndarray
    depth1_registered: np.ndarray = None
    flow_fwd_gt: np.ndarray = None
    occlusion_bwd: np.ndarray = None
    labels: np.ndarray = None
    frames: tuple = None

    @property
    def clean_flow_fwd(self):
        return self.flow_fwd if self.flow_fwd_gt is None else self.flow_fwd_gt

    def copy(self):
        return copy.deepcopy(self)


# --- rendering ------------------------------------------------------------------

def _camera_rays(intr, u, v):
    return np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)


def render_depth(spec, k, u=None, v=None, prims=None):
    """Ray-cast frame ``k``. Returns ``(depth, owner)``; depth is the camera z.

    ``owner`` is -1 for a miss, 0 for background and ``m + 1`` for object ``m``.
    ``u, v`` default to every pixel centre; ``prims`` defaults to the frame's
    geometry.
    """
    intr = spec.intrinsics
    if u is None:
        u, v = intr.pixel_grid()
    P = spec.camera_path[k]
    d_cam = _camera_rays(intr, np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64))
    shape = d_cam.shape[:-1]
    d_world = d_cam.reshape(-1, 3) @ P.rotation.T
    if prims is None:
        prims = spec.primitives_at(k)
    t, idx = kernels.raycast(P.translation, d_world, prims)
    nb = len(spec.background)
    owner = np.where(idx < 0, -1, np.where(idx < nb, 0, idx - nb + 1))
    depth = np.where(np.isfinite(t), t, np.nan)
    return depth.reshape(shape), owner.reshape(shape).astype(np.int64)


def _render_direction(spec, i, j):
    """Flow, registered depth, scene flow and occlusion for frame i -> frame j."""
    intr = spec.intrinsics
    u, v = intr.pixel_grid()
    depth, owner = render_depth(spec, i)
    x0 = _backproject(intr, u, v, depth)
    Pi, Pj = spec.camera_path[i], spec.camera_path[j]
    rel_cam = Pj.inverse().compose(Pi)
    x1 = rel_cam.apply(x0)  # background: camera-j coordinates
    sflow = np.zeros_like(x0)
    for m, obj in enumerate(spec.objects):
        sel = owner == m + 1
        if not sel.any():
            continue
        # object motion expressed in camera-i coordinates
        M_cam = Pi.inverse().compose(obj.displacement(i, j)).compose(Pi)
        moved = M_cam.apply(x0[sel])
        sflow[sel] = moved - x0[sel]
        x1[sel] = rel_cam.apply(moved)
    valid = (owner >= 0) & (x1[..., 2] > 0)
    sflow[~valid] = np.nan
    target = _project(intr, np.where(valid[..., None], x1, np.nan))
    flow = target - np.stack([u, v], axis=-1)
    z1 = np.where(valid, x1[..., 2], np.nan)

    # visibility of each target from camera j along the exact sub-pixel ray
    tu, tv = target[..., 0], target[..., 1]
    with np.errstate(invalid="ignore"):
        inside = (np.floor(tu + 0.5) >= 0) & (np.floor(tu + 0.5) <= intr.width - 1) \
            & (np.floor(tv + 0.5) >= 0) & (np.floor(tv + 0.5) <= intr.height - 1)
    occluded = valid & ~inside
    probe = valid & inside
    if probe.any():
        hit, _ = render_depth(spec, j, tu[probe], tv[probe])
        blocked = np.zeros_like(valid)
        with np.errstate(invalid="ignore"):
            blocked[probe] = hit < z1[probe] - OCCLUSION_MARGIN
        occluded |= blocked
    return dict(depth=np.where(valid_depth(depth), depth, np.nan), owner=owner, flow=flow,
                z1=z1, scene_flow=sflow, occluded=occluded, valid=valid, rel=rel_cam)


def render_pair(spec, frame_indices):
    """Render frames ``(i, j)`` and all forward/backward ground truth."""
    i, j = (int(f) for f in frame_indices)
    n = spec.num_frames
    if i == j or not (0 <= i < n and 0 <= j < n):
        raise UsageError(f"bad frame pair {(i, j)} for a {n}-frame path")
    fw = _render_direction(spec, i, j)
    bw = _render_direction(spec, j, i)
    return GroundTruthBundle(
        intrinsics=spec.intrinsics,
        depth0=fw["depth"],
        depth1=bw["depth"],
        flow_fwd=fw["flow"],
        flow_bwd=bw["flow"],
        rigidity=fw["owner"] == 0,
        occlusion_fwd=fw["occluded"],
        pose01=fw["rel"],
        scene_flow=fw["scene_flow"],
        valid=fw["valid"],
        depth1_registered=fw["z1"],
        occlusion_bwd=bw["occluded"],
        labels=fw["owner"],
        frames=(i, j),
    )


# --- scene sampling -------------------------------------------------------------

def _unit(rng):
    x = rng.normal(size=3)
    return x / np.linalg.norm(x)


def _random_rotation(rng):
    return rotvec_to_matrix(_unit(rng) * rng.uniform(0, math.pi))


def _room(extent):
    # camera 0 sits inside, looking down +z (y points to the floor)
    half = (0.7 * extent, 0.4 * extent, 0.75 * extent)
    center = (0.0, 0.1 * extent, 0.55 * extent)
    return Primitive("box", half, RigidTransform(np.eye(3), center))


def _place(rng, intr, background, size_range, depth_frac, margin=0.1):
    """Centre for a primitive in camera-0 free space, in front of the background."""
    prims = np.array([p.packed() for p in background])
    for _ in range(100):
        u = rng.uniform(margin * intr.width, (1 - margin) * intr.width - 1)
        v = rng.uniform(margin * intr.height, (1 - margin) * intr.height - 1)
        d = np.array([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0])
        t, _ = kernels.raycast(np.zeros(3), d[None], prims)
        if not np.isfinite(t[0]):
            continue
        size = rng.uniform(*size_range)
        z = rng.uniform(*depth_frac) * t[0]
        if z - size < 0.5 or z >= t[0]:
            continue
        return d * z, size
    raise UsageError("could not place a primitive in the camera frustum")


def _shape(rng, center, size):
    if rng.random() < 0.5:
        return Primitive("sphere", (size,), RigidTransform(np.eye(3), center))
    half = tuple(size * rng.uniform(0.6, 1.0, size=3))
    return Primitive("box", half, RigidTransform(_random_rotation(rng), center))


def _object_motion(rng, center, speed, spin):
    t = _unit(rng) * speed
    R = rotvec_to_matrix(_unit(rng) * spin)
    c = np.asarray(center)
    return RigidTransform(R, c + t - R @ c)


def make_scene(seed, object_count_mean=BUSY_OBJECT_COUNT[0], object_count_sigma=BUSY_OBJECT_COUNT[1],
               extent=2.0, motion_scale=1.0, num_frames=21, intrinsics=None,
               object_size=(0.0375, 0.1), object_speed=(0.01, 0.03), object_spin_deg=2.0,
               camera_speed=(0.005, 0.015), camera_spin_deg=(0.1, 0.3), clutter=(1, 3),
               min_objects=0, max_objects=None, shared_motion=False):
    """Sample a room-scale dynamic scene.

    The object count is ``round(max(0, N(mean, sigma)))`` optionally clamped
    to ``[min_objects, max_objects]``. Objects and static clutter are placed
    along random camera-0 rays strictly in front of the room walls. Sizes
    (``object_size``) are fractions of ``extent``, the room scale in meters.
    With ``shared_motion`` every object gets the same world motion.
    """
    if not extent > 0:
        raise UsageError("extent must be positive")
    if num_frames < 2:
        raise UsageError("num_frames must be >= 2")
    rng = np.random.default_rng(seed)
    intr = intrinsics or default_intrinsics()

    background = [_room(extent)]
    for _ in range(int(rng.integers(clutter[0], clutter[1] + 1))):
        c, s = _place(rng, intr, background, (0.05 * extent, 0.125 * extent), (0.6, 0.95))
        background.append(_shape(rng, c, s))

    count = int(round(max(0.0, rng.normal(object_count_mean, object_count_sigma)))) \
        if object_count_sigma > 0 else int(round(max(0.0, object_count_mean)))
    count = max(count, min_objects)
    if max_objects is not None:
        count = min(count, max_objects)
    shared = None
    objects = []
    for _ in range(count):
        c, s = _place(rng, intr, background, (object_size[0] * extent, object_size[1] * extent), (0.35, 0.8))
        shape = _shape(rng, c, s)
        speed = rng.uniform(*object_speed) * motion_scale
        spin = math.radians(rng.uniform(0.0, object_spin_deg)) * motion_scale
        if shared_motion:
            if shared is None:
                shared = _unit(rng) * speed
            motion = RigidTransform(np.eye(3), shared)
        else:
            motion = _object_motion(rng, c, speed, spin)
        objects.append(MovingObject(shape, motion))

    # mostly forward and sideways so the path stays inside the room
    heading = _unit(rng) * (1.0, 0.3, 1.0)
    heading[2] = abs(heading[2])
    vel = heading / np.linalg.norm(heading) * rng.uniform(*camera_speed) * motion_scale
    omega = _unit(rng) * math.radians(rng.uniform(*camera_spin_deg)) * motion_scale
    path = [RigidTransform.identity()]
    for _ in range(num_frames - 1):
        jitter_v = rng.normal(scale=0.2 * np.linalg.norm(vel) / math.sqrt(3), size=3)
        jitter_w = rng.normal(scale=0.2 * np.linalg.norm(omega) / math.sqrt(3), size=3)
        step = RigidTransform(rotvec_to_matrix(omega + jitter_w), vel + jitter_v)
        path.append(path[-1].compose(step))
    return SceneSpec(intr, background, objects, path)


def pick_interval(rng, num_frames, intervals=KEYFRAME_INTERVALS):
    usable = [k for k in intervals if k < num_frames]
    k = int(rng.choice(usable))
    i = int(rng.integers(0, num_frames - k))
    return i, i + k


# --- noise ----------------------------------------------------------------------

def _disc_vectors(rng, n, radius):
    r = radius * np.sqrt(rng.random(n))
    a = rng.uniform(0, 2 * math.pi, n)
    return np.stack([r * np.cos(a), r * np.sin(a)], axis=1)


def _round_inside(u, v, W, H):
    iu = np.floor(u + 0.5)
    iv = np.floor(v + 0.5)
    with np.errstate(invalid="ignore"):
        inside = (iu >= 0) & (iu <= W - 1) & (iv >= 0) & (iv <= H - 1)
    return np.where(inside, iu, 0).astype(np.intp), np.where(inside, iv, 0).astype(np.intp), inside


def _smooth_noise(rng, shape, sigma, corr):
    n = rng.normal(size=shape)
    if corr > 0:
        for c in range(shape[-1]):
            n[..., c] = gaussian_filter(n[..., c], corr, mode="reflect")
        impulse = np.zeros((8 * int(math.ceil(corr)) + 1,) * 2)
        impulse[impulse.shape[0] // 2, impulse.shape[1] // 2] = 1.0
        kern = gaussian_filter(impulse, corr, mode="constant")
        n /= math.sqrt(float((kern ** 2).sum()))
    return sigma * n


def perturb(bundle, noise):
    """Corrupt the observed flow and depth of a bundle; ground truth is untouched.

    Flow is perturbed through a displacement of each frame-0 correspondence,
    and the backward flow is perturbed consistently with it, so a forward-
    backward check only rejects what it genuinely cannot explain:

    * outliers: in ``outlier_fraction`` of the ``outlier_patch``-sized cells
      the flow is replaced by one vector drawn uniformly from the disc of
      radius ``outlier_magnitude``; the backward flow where those pixels land
      is set to the negated vector;
    * Gaussian noise ``N(0, flow_sigma²)`` per component (optionally
      smoothed over ``noise_correlation`` pixels) is added to the forward
      flow and subtracted from the backward flow at its source pixel.

    Depths get relative Gaussian noise and ``invalid_hole_fraction`` of
    pixels are set invalid. The clean forward flow is kept in ``flow_fwd_gt``.
    """
    out = bundle.copy()
    if noise.is_null():
        return out
    rng = np.random.default_rng(noise.seed)
    H, W = bundle.flow_fwd.shape[:2]
    fwd0 = bundle.flow_fwd
    bwd0 = bundle.flow_bwd
    fwd = fwd0.copy()
    bwd = bwd0.copy()
    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    finite = np.all(np.isfinite(fwd0), axis=-1)

    if noise.outlier_fraction > 0 and noise.outlier_magnitude > 0:
        p = noise.outlier_patch
        ny, nx = -(-H // p), -(-W // p)
        k = int(round(noise.outlier_fraction * ny * nx))
        cells = rng.choice(ny * nx, k, replace=False)
        cell_vec = np.full((ny * nx, 2), np.nan)
        cell_vec[cells] = _disc_vectors(rng, k, noise.outlier_magnitude)
        cid = (v.astype(np.intp) // p) * nx + (u.astype(np.intp) // p)
        vec = cell_vec[cid]
        hit = np.isfinite(vec[..., 0]) & finite
        fwd[hit] = vec[hit]
        # the landing pixel's backward flow points home, so the outlier is FB-consistent
        wu, wv, w_in = _round_inside(u[hit] + vec[hit][:, 0], v[hit] + vec[hit][:, 1], W, H)
        bwd[wv[w_in], wu[w_in]] = -vec[hit][w_in]

    if noise.flow_sigma > 0:
        n_f = _smooth_noise(rng, (H, W, 2), noise.flow_sigma, noise.noise_correlation)
        n_b = _smooth_noise(rng, (H, W, 2), noise.flow_sigma, noise.noise_correlation)
        fwd = fwd + n_f
        su, sv, s_in = _round_inside(u + bwd[..., 0], v + bwd[..., 1], W, H)
        bwd = bwd - np.where(s_in[..., None], n_f[sv, su], -n_b)

    out.flow_fwd = fwd
    out.flow_bwd = bwd
    out.flow_fwd_gt = bundle.clean_flow_fwd.copy()

    def noisy_depth(d):
        d = d.copy()
        if noise.depth_sigma_rel > 0:
            d = d * (1.0 + noise.depth_sigma_rel * rng.normal(size=d.shape))
        return d

    out.depth0 = noisy_depth(bundle.depth0)
    out.depth1 = noisy_depth(bundle.depth1)
    if bundle.depth1_registered is not None:
        out.depth1_registered = noisy_depth(bundle.depth1_registered)
    if noise.invalid_hole_fraction > 0:
        for name in ("depth0", "depth1", "depth1_registered"):
            d = getattr(out, name)
            if d is not None:
                holes = rng.random(d.shape) < noise.invalid_hole_fraction
                setattr(out, name, np.where(holes, np.nan, d))
    return out


def object_coverage(bundle):
    """Fraction of valid frame-0 pixels owned by moving objects."""
    valid = bundle.valid
    return float((~bundle.rigidity & valid).sum()) / max(int(valid.sum()), 1)


def sample_bundles(n, first_seed=0, coverage=(0.0, 1.0), objects=(0, None), intervals=KEYFRAME_INTERVALS,
                   max_tries=10000, **scene_kw):
    """Deterministically collect ``n`` rendered pairs meeting coverage / object-count bounds.

    Seeds are scanned upward from ``first_seed``; returns ``[(seed, spec, bundle)]``.
    """
    found = []
    seed = first_seed
    lo_obj, hi_obj = objects
    while len(found) < n:
        if seed - first_seed >= max_tries:
            raise UsageError(f"only {len(found)} scenes met the constraints after {max_tries} seeds")
        spec = make_scene(seed, **scene_kw)
        nobj = len(spec.objects)
        if nobj >= lo_obj and (hi_obj is None or nobj <= hi_obj):
            rng = np.random.default_rng([seed, 1])
            bundle = render_pair(spec, pick_interval(rng, spec.num_frames, intervals))
            cov = object_coverage(bundle)
            if coverage[0] <= cov <= coverage[1]:
                found.append((seed, spec, bundle))
        seed += 1
    return found


# --- text serialisation of scenes ------------------------------------------------

def _pose_str(T):
    return " ".join(repr(float(x)) for x in list(T.rotation.ravel()) + list(T.translation))


def _pose_parse(tokens):
    vals = [float(x) for x in tokens]
    if len(vals) != 12:
        raise FormatError("a pose needs 12 numbers")
    return RigidTransform(np.array(vals[:9]).reshape(3, 3), vals[9:])


def _prim_str(p):
    return " ".join([p.kind] + [repr(s) for s in p.size]) + " | " + _pose_str(p.pose)


def _prim_parse(text):
    head, pose = text.split("|")
    tok = head.split()
    return Primitive(tok[0], tuple(float(x) for x in tok[1:]), _pose_parse(pose.split()))


def scene_to_text(spec):
    """Plain ``key = value`` document; numbers are written round-trip exact."""
    i = spec.intrinsics
    lines = ["# rigidflow scene", f"intrinsics = {i.fx!r} {i.fy!r} {i.cx!r} {i.cy!r} {i.width} {i.height}"]
    lines += [f"camera.{k} = {_pose_str(T)}" for k, T in enumerate(spec.camera_path)]
    lines += [f"background.{k} = {_prim_str(p)}" for k, p in enumerate(spec.background)]
    lines += [f"object.{k} = {_prim_str(o.shape)} | {_pose_str(o.motion)}" for k, o in enumerate(spec.objects)]
    return "\n".join(lines) + "\n"


def scene_from_text(text):
    entries = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        entries[key] = value
    try:
        vals = entries.pop("intrinsics").split()
        intr = Intrinsics(*map(float, vals[:4]), int(vals[4]), int(vals[5]))

        def indexed(prefix):
            keys = sorted((k for k in entries if k.startswith(prefix + ".")), key=lambda k: int(k.split(".")[1]))
            return [entries[k] for k in keys]

        cams = [_pose_parse(s.split()) for s in indexed("camera")]
        bg = [_prim_parse(s) for s in indexed("background")]
        objs = []
        for s in indexed("object"):
            a, b, c = s.split("|")
            objs.append(MovingObject(_prim_parse(a + "|" + b), _pose_parse(c.split())))
    except (KeyError, ValueError, IndexError) as exc:
        raise FormatError(f"malformed scene document: {exc}") from exc
    return SceneSpec(intr, bg, objs, cams)
