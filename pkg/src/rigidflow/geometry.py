"""Pinhole camera, SE(3) algebra and the two-view flow / scene-flow relations.

Conventions used throughout the package:

* pixel centres sit on integer coordinates, ``u`` is the column and ``v`` the
  row, so a grid of shape ``(H, W)`` spans ``u in [0, W-1]``, ``v in [0, H-1]``;
* depth is the camera-frame ``z`` coordinate in meters; any value that is not
  finite or not strictly positive marks an invalid pixel;
* flow fields are ``(H, W, 2)`` float arrays and scene-flow fields ``(H, W, 3)``;
  invalid entries are NaN;
* a :class:`RigidTransform` maps points of one frame into another,
  ``apply(T, p) = R p + t``. The relative pose ``C1`` maps camera-0
  coordinates into camera-1 coordinates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DomainError, UsageError


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise UsageError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if int(self.width) < 1 or int(self.height) < 1:
            raise UsageError(f"image size must be >= 1, got {self.width}x{self.height}")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def shape(self):
        return (self.height, self.width)

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def pixel_grid(self):
        """Return ``(u, v)`` coordinate arrays of shape ``(H, W)``."""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        return u, v

    def check_grid(self, grid, name="grid"):
        if tuple(np.shape(grid)[:2]) != self.shape:
            raise UsageError(f"{name} has shape {np.shape(grid)[:2]}, expected {self.shape}")


def default_intrinsics():
    """The 160x120 desk-scale camera used by the synthetic generator."""
    return Intrinsics(120.0, 120.0, 80.0, 60.0, 160, 120)


_ORTHO_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise UsageError("rigid transform has non-finite entries")
        if np.abs(R.T @ R - np.eye(3)).max() > _ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise UsageError("rotation is not a proper orthonormal matrix")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_translation(cls, t):
        return cls(np.eye(3), t)

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)):
        return cls(rotvec_to_matrix(rotvec), translation)

    @classmethod
    def from_quaternion(cls, quat, translation=(0.0, 0.0, 0.0)):
        """From a unit quaternion ``(qx, qy, qz, qw)``, which is kept so that
        :meth:`quaternion` returns it unchanged."""
        q = np.array(quat, dtype=np.float64).reshape(4)
        T = cls(Rotation.from_quat(q).as_matrix(), translation)
        object.__setattr__(T, "_quat", q)
        return T

    def quaternion(self):
        """``(qx, qy, qz, qw)`` with ``qw >= 0``."""
        q = getattr(self, "_quat", None)
        if q is None:
            q = Rotation.from_matrix(self.rotation).as_quat()
        return q if q[3] >= 0 else -q

    @property
    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, points):
        """Transform points of shape ``(..., 3)``."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other):
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self):
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def __matmul__(self, other):
        return self.compose(other)

    def allclose(self, other, atol=1e-9):
        return (np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
                and np.allclose(self.translation, other.translation, rtol=0, atol=atol))

    def __repr__(self):
        return f"RigidTransform(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def apply(T, p):
    return T.apply(p)


def compose(T1, T2):
    return T1.compose(T2)


def invert(T):
    return T.inverse()


def orthonormalize(R):
    """Project a near-rotation matrix onto SO(3)."""
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def skew(w):
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def rotvec_to_matrix(w):
    """Rodrigues' formula; exact to machine precision for small angles too."""
    w = np.asarray(w, dtype=np.float64).reshape(3)
    theta = float(np.linalg.norm(w))
    K = skew(w)
    if theta < 1e-8:
        # second-order Taylor terms; the remainder is O(theta^3)
        return np.eye(3) + K + 0.5 * (K @ K)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return orthonormalize(np.eye(3) + a * K + b * (K @ K))


def rotation_angle(R):
    """Geodesic rotation angle in radians."""
    c = 0.5 * (np.trace(R) - 1.0)
    return math.acos(min(1.0, max(-1.0, c)))


# --- Euler angles: R(alpha, beta, gamma) = Rx(alpha) Ry(beta) Rz(gamma) -----------

@dataclass(frozen=True)
class EulerAngles:
    alpha: float
    beta: float
    gamma: float
    degenerate: bool = False

    def as_array(self):
        return np.array([self.alpha, self.beta, self.gamma])


def _rx(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(b):
    c, s = math.cos(b), math.sin(b)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(g):
    c, s = math.cos(g), math.sin(g)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_to_rotation(e):
    if not isinstance(e, EulerAngles):
        e = EulerAngles(*e)
    if not all(math.isfinite(x) for x in (e.alpha, e.beta, e.gamma)):
        raise UsageError("Euler angles must be finite")
    return _rx(e.alpha) @ _ry(e.beta) @ _rz(e.gamma)


def rotation_to_euler(R):
    """Invert :func:`euler_to_rotation` with ``beta`` in ``[-pi/2, pi/2]``.

    At gimbal lock (``|cos beta| < 1e-8``) only ``alpha ± gamma`` is
    observable; ``gamma`` is set to 0 and the result is flagged degenerate.
    """
    R = np.asarray(R, dtype=np.float64)
    sb = R[0, 2]
    cb = math.hypot(R[0, 0], R[0, 1])
    beta = math.atan2(sb, cb)
    if cb < 1e-8:
        alpha = math.atan2(R[2, 1], R[1, 1])
        return EulerAngles(alpha, beta, 0.0, degenerate=True)
    alpha = math.atan2(-R[1, 2], R[2, 2])
    gamma = math.atan2(-R[0, 1], R[0, 0])
    return EulerAngles(alpha, beta, gamma)


# --- projection -----------------------------------------------------------------

def project(intr, p):
    """Pinhole projection of points ``(..., 3)`` to pixels ``(..., 2)``."""
    p = np.asarray(p, dtype=np.float64)
    z = p[..., 2]
    if np.any(~(z > 0)):
        raise DomainError("cannot project a point with non-positive depth")
    return _project(intr, p)


def _project(intr, p):
    # NaN wherever z <= 0 or the point is invalid
    z = p[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * p[..., 0] / z + intr.cx
        v = intr.fy * p[..., 1] / z + intr.cy
    out = np.stack([u, v], axis=-1)
    out[~(z > 0)] = np.nan
    return out


def backproject(intr, u, z):
    """Inverse projection of pixel(s) ``u (..., 2)`` at depth(s) ``z (...)``."""
    u = np.asarray(u, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if np.any(~(z > 0)) or np.any(~np.isfinite(z)):
        raise DomainError("backprojection needs a finite, positive depth")
    return _backproject(intr, u[..., 0], u[..., 1], z)


def _backproject(intr, u, v, z):
    x = (u - intr.cx) / intr.fx * z
    y = (v - intr.cy) / intr.fy * z
    return np.stack([x, y, z], axis=-1)


def valid_depth(depth):
    depth = np.asarray(depth, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        return np.isfinite(depth) & (depth > 0)


def backproject_grid(intr, depth):
    """Per-pixel camera points ``(H, W, 3)``; NaN where depth is invalid."""
    intr.check_grid(depth, "depth")
    depth = np.asarray(depth, dtype=np.float64)
    u, v = intr.pixel_grid()
    z = np.where(valid_depth(depth), depth, np.nan)
    return _backproject(intr, u, v, z)


def sample_nearest(grid, u, v):
    """Nearest-pixel lookup. Returns ``(values, inside)``; values are NaN outside."""
    grid = np.asarray(grid)
    H, W = grid.shape[:2]
    with np.errstate(invalid="ignore"):
        iu = np.floor(u + 0.5)
        iv = np.floor(v + 0.5)
        inside = (iu >= 0) & (iu <= W - 1) & (iv >= 0) & (iv <= H - 1)
    iu = np.where(inside, iu, 0).astype(np.intp)
    iv = np.where(inside, iv, 0).astype(np.intp)
    vals = grid[iv, iu].astype(np.float64)
    if vals.ndim > np.ndim(u):
        vals[~inside] = np.nan
    else:
        vals = np.where(inside, vals, np.nan)
    return vals, inside


def sample_bilinear(grid, u, v):
    """Bilinear lookup of a scalar grid; NaN if any of the four taps is invalid."""
    grid = np.asarray(grid, dtype=np.float64)
    H, W = grid.shape[:2]
    with np.errstate(invalid="ignore"):
        inside = (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    uu = np.where(inside, u, 0.0)
    vv = np.where(inside, v, 0.0)
    u0 = np.minimum(np.floor(uu).astype(np.intp), W - 2) if W > 1 else np.zeros_like(uu, dtype=np.intp)
    v0 = np.minimum(np.floor(vv).astype(np.intp), H - 2) if H > 1 else np.zeros_like(vv, dtype=np.intp)
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    a = uu - u0
    b = vv - v0
    g = np.where(valid_depth(grid), grid, np.nan)
    out = ((1 - a) * (1 - b) * g[v0, u0] + a * (1 - b) * g[v0, u1]
           + (1 - a) * b * g[v1, u0] + a * b * g[v1, u1])
    return np.where(inside, out, np.nan), inside


def sample_target_depth(depth1, u0, v0, u1, v1, sampling="nearest"):
    """Depth of the frame-1 correspondence of frame-0 pixels.

    ``nearest`` and ``bilinear`` read ``depth1`` (a frame-1 grid) at the
    target ``(u1, v1)``. ``registered`` expects ``depth1`` already expressed on
    the frame-0 grid (the depth, in camera 1, of each frame-0 pixel's match)
    and reads it at ``(u0, v0)``; the target still has to land in the image.
    Returns ``(z1, inside)`` with NaN for unavailable depths.
    """
    depth1 = np.asarray(depth1, dtype=np.float64)
    H, W = depth1.shape
    if sampling == "nearest":
        z1, inside = sample_nearest(depth1, u1, v1)
    elif sampling == "bilinear":
        z1, inside = sample_bilinear(depth1, u1, v1)
    elif sampling == "registered":
        with np.errstate(invalid="ignore"):
            inside = (np.floor(u1 + 0.5) >= 0) & (np.floor(u1 + 0.5) <= W - 1) \
                & (np.floor(v1 + 0.5) >= 0) & (np.floor(v1 + 0.5) <= H - 1)
        z1 = np.where(inside, depth1[v0.astype(np.intp), u0.astype(np.intp)], np.nan)
    else:
        raise UsageError(f"unknown depth sampling {sampling!r}")
    z1 = np.where(valid_depth(z1), z1, np.nan)
    return z1, inside


# --- the flow / scene-flow relations --------------------------------------------

def egomotion_flow(intr, depth0, C1):
    """Flow induced by camera motion alone: ``π(C1·π⁻¹(u0, z0)) − u0``."""
    x0 = backproject_grid(intr, depth0)
    u, v = intr.pixel_grid()
    uv1 = _project(intr, C1.apply(x0))
    flow = uv1 - np.stack([u, v], axis=-1)
    return flow


def scene_flow_from_flow(intr, depth0, depth1, flow, C1, sampling="nearest"):
    """3D motion of every frame-0 pixel given optical flow, both depths and the pose.

    ``δx = C1⁻¹·π⁻¹(u0 + δu, z1) − π⁻¹(u0, z0)``, expressed in camera-0
    coordinates. ``sampling`` selects how ``z1`` is read, see
    :func:`sample_target_depth`.
    """
    intr.check_grid(depth0, "depth0")
    intr.check_grid(depth1, "depth1")
    intr.check_grid(flow, "flow")
    flow = np.asarray(flow, dtype=np.float64)
    u, v = intr.pixel_grid()
    x0 = backproject_grid(intr, depth0)
    u1 = u + flow[..., 0]
    v1 = v + flow[..., 1]
    z1, _ = sample_target_depth(depth1, u, v, u1, v1, sampling)
    x1 = _backproject(intr, u1, v1, z1)
    return C1.inverse().apply(x1) - x0


def projected_scene_flow(flow_of, flow_cm):
    """Optical flow minus egomotion flow; NaN propagates from either input."""
    flow_of = np.asarray(flow_of, dtype=np.float64)
    flow_cm = np.asarray(flow_cm, dtype=np.float64)
    if flow_of.shape != flow_cm.shape:
        raise UsageError(f"flow shapes differ: {flow_of.shape} vs {flow_cm.shape}")
    return flow_of - flow_cm


def flow_from_scene_flow(intr, C0, C1, points0, dx):
    """``π(C1·(x0 + δx)) − π(C0·x0)`` for world points ``x0`` and motions ``δx``."""
    points0 = np.asarray(points0, dtype=np.float64)
    dx = np.asarray(dx, dtype=np.float64)
    return _project(intr, C1.apply(points0 + dx)) - _project(intr, C0.apply(points0))


def huber(r, delta):
    """Huber cost of a residual vector and its IRLS weight.

    For ``s = ||r||``: cost ``s²/2`` when ``s <= delta`` else
    ``delta·(s − delta/2)``; weight ``1`` or ``delta/s`` respectively.
    """
    if not delta > 0:
        raise UsageError(f"huber delta must be positive, got {delta}")
    s = float(np.linalg.norm(np.asarray(r, dtype=np.float64)))
    if s <= delta:
        return 0.5 * s * s, 1.0
    return delta * (s - 0.5 * delta), delta / s


def huber_vec(s, delta):
    """Vectorised :func:`huber` over residual norms ``s``."""
    s = np.asarray(s, dtype=np.float64)
    quad = s <= delta
    with np.errstate(divide="ignore", invalid="ignore"):
        cost = np.where(quad, 0.5 * s * s, delta * (s - 0.5 * delta))
        weight = np.where(quad, 1.0, delta / s)
    return cost, weight
