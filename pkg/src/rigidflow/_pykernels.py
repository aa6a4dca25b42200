"""Pure-numpy implementations of the hot kernels.

Signatures mirror ``_ckernels.pyx`` exactly; ``rigidflow.kernels`` picks one
backend at import time.
"""
import numpy as np

PLANE, SPHERE, BOX = 0, 1, 2
T_MIN = 1e-9


def fb_residual(fwd, bwd):
    """``||fwd(u) + bwd(round(u + fwd(u)))||`` per pixel, NaN when undefined."""
    fwd = np.ascontiguousarray(fwd, dtype=np.float64)
    bwd = np.ascontiguousarray(bwd, dtype=np.float64)
    H, W = fwd.shape[:2]
    v, u = np.mgrid[0:H, 0:W]
    with np.errstate(invalid="ignore"):
        tu = np.floor(u + fwd[..., 0] + 0.5)
        tv = np.floor(v + fwd[..., 1] + 0.5)
        inside = (tu >= 0) & (tu <= W - 1) & (tv >= 0) & (tv <= H - 1)
    iu = np.where(inside, tu, 0).astype(np.intp)
    iv = np.where(inside, tv, 0).astype(np.intp)
    back = bwd[iv, iu]
    ru = fwd[..., 0] + back[..., 0]
    rv = fwd[..., 1] + back[..., 1]
    res = np.sqrt(ru * ru + rv * rv)
    res[~inside] = np.nan
    return res


def dilate(mask, patch):
    """Binary dilation by a ``patch x patch`` square.

    The window covers offsets ``-(patch // 2) .. (patch - 1) // 2`` on both
    axes; pixels beyond the border count as unset.
    """
    mask = np.asarray(mask, dtype=bool)
    H, W = mask.shape
    lo = patch // 2
    hi = (patch - 1) // 2
    S = np.zeros((H + 1, W + 1), dtype=np.int64)
    S[1:, 1:] = mask.astype(np.int64).cumsum(0).cumsum(1)
    y = np.arange(H)
    x = np.arange(W)
    y0 = np.clip(y - lo, 0, H)[:, None]
    y1 = np.clip(y + hi + 1, 0, H)[:, None]
    x0 = np.clip(x - lo, 0, W)[None, :]
    x1 = np.clip(x + hi + 1, 0, W)[None, :]
    count = S[y1, x1] - S[y0, x1] - S[y1, x0] + S[y0, x0]
    return count > 0


def huber_normal_equations(y, r, delta, prior=None):
    """Accumulate the IRLS Gauss-Newton system for residuals ``r_i = y_i - x1_i``.

    The Jacobian of ``r_i`` w.r.t. a left increment ``(w, v)`` is
    ``[-[y_i]x, I]``. ``delta <= 0`` or infinite gives plain least squares.
    ``prior`` holds optional per-pair weights multiplying both cost and
    Huber weight. Returns ``(H, g, cost)`` with ``H = sum w J^T J`` and
    ``g = sum w J^T r``.
    """
    y = np.asarray(y, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    s = np.sqrt(np.einsum("ij,ij->i", r, r))
    pw = np.ones_like(s) if prior is None else np.asarray(prior, dtype=np.float64)
    if delta > 0 and np.isfinite(delta):
        quad = s <= delta
        w = np.where(quad, 1.0, delta / np.where(quad, 1.0, s))
        c = np.where(quad, 0.5 * s * s, delta * (s - 0.5 * delta))
    else:
        w = np.ones_like(s)
        c = 0.5 * s * s
    w = w * pw
    cost = np.dot(pw, c)
    wy = w[:, None] * y
    yy = np.einsum("i,i->", w, np.einsum("ij,ij->i", y, y))
    H = np.zeros((6, 6))
    H[:3, :3] = yy * np.eye(3) - wy.T @ y
    sy = wy.sum(0)
    Sx = np.array([[0.0, -sy[2], sy[1]], [sy[2], 0.0, -sy[0]], [-sy[1], sy[0], 0.0]])
    H[:3, 3:] = Sx
    H[3:, :3] = -Sx
    H[3:, 3:] = w.sum() * np.eye(3)
    g = np.empty(6)
    g[:3] = np.cross(wy, r).sum(0)
    g[3:] = (w[:, None] * r).sum(0)
    return H, g, float(cost)


def raycast(origin, dirs, prims):
    """First hit of rays ``origin + t·dirs`` against packed primitives.

    ``prims`` is ``(M, 16)``: column 0 is the type code, then
    plane ``[p(3), n(3)]``, sphere ``[c(3), radius]`` or oriented box
    ``[c(3), half(3), R(9) row-major, local->world]``.
    Returns ``(t, index)``; misses give ``t = inf`` and ``index = -1``.
    """
    o = np.asarray(origin, dtype=np.float64).reshape(3)
    d = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    prims = np.asarray(prims, dtype=np.float64).reshape(-1, 16)
    n = d.shape[0]
    best_t = np.full(n, np.inf)
    best_i = np.full(n, -1, dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for k, pr in enumerate(prims):
            kind = int(pr[0])
            if kind == PLANE:
                p, nrm = pr[1:4], pr[4:7]
                den = d @ nrm
                t = np.where(np.abs(den) > 1e-300, ((p - o) @ nrm) / den, np.inf)
            elif kind == SPHERE:
                c, rad = pr[1:4], pr[4]
                oc = o - c
                a = np.einsum("ij,ij->i", d, d)
                b = d @ oc
                cc = oc @ oc - rad * rad
                disc = b * b - a * cc
                sq = np.sqrt(np.where(disc >= 0, disc, 0.0))
                t_near = (-b - sq) / a
                t_far = (-b + sq) / a
                t = np.where(t_near > T_MIN, t_near, t_far)
                t = np.where(disc >= 0, t, np.inf)
            elif kind == BOX:
                c, half = pr[1:4], pr[4:7]
                R = pr[7:16].reshape(3, 3)
                ol = R.T @ (o - c)
                dl = d @ R
                t_enter = np.full(n, -np.inf)
                t_exit = np.full(n, np.inf)
                miss = np.zeros(n, dtype=bool)
                for ax in range(3):
                    da = dl[:, ax]
                    par = da == 0.0
                    miss |= par & ((ol[ax] < -half[ax]) | (ol[ax] > half[ax]))
                    inv = 1.0 / np.where(par, 1.0, da)
                    t1 = (-half[ax] - ol[ax]) * inv
                    t2 = (half[ax] - ol[ax]) * inv
                    t_enter = np.where(par, t_enter, np.maximum(t_enter, np.minimum(t1, t2)))
                    t_exit = np.where(par, t_exit, np.minimum(t_exit, np.maximum(t1, t2)))
                hit = ~miss & (t_exit >= t_enter) & (t_exit > T_MIN)
                t = np.where(t_enter > T_MIN, t_enter, t_exit)
                t = np.where(hit, t, np.inf)
            else:
                raise ValueError(f"unknown primitive type {kind}")
            t = np.where(t > T_MIN, t, np.inf)
            closer = t < best_t
            best_t = np.where(closer, t, best_t)
            best_i = np.where(closer, k, best_i)
    return best_t, best_i
