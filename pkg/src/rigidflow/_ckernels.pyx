# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot kernels; see ``_pykernels`` for the contracts."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, floor, INFINITY, NAN, fabs, isfinite

cnp.import_array()

cdef double T_MIN = 1e-9


def fb_residual(fwd, bwd):
    cdef const double[:, :, ::1] f = np.ascontiguousarray(fwd, dtype=np.float64)
    cdef const double[:, :, ::1] b = np.ascontiguousarray(bwd, dtype=np.float64)
    cdef Py_ssize_t H = f.shape[0], W = f.shape[1]
    out_arr = np.empty((H, W), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t y, x, iu, iv
    cdef double fu, fv, tu, tv, ru, rv
    with nogil:
        for y in range(H):
            for x in range(W):
                fu = f[y, x, 0]
                fv = f[y, x, 1]
                tu = floor(x + fu + 0.5)
                tv = floor(y + fv + 0.5)
                # NaN flow fails both comparisons
                if not (tu >= 0 and tu <= W - 1 and tv >= 0 and tv <= H - 1):
                    out[y, x] = NAN
                    continue
                iu = <Py_ssize_t>tu
                iv = <Py_ssize_t>tv
                ru = fu + b[iv, iu, 0]
                rv = fv + b[iv, iu, 1]
                out[y, x] = sqrt(ru * ru + rv * rv)
    return out_arr


def dilate(mask, int patch):
    cdef const cnp.uint8_t[:, ::1] m = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t H = m.shape[0], W = m.shape[1]
    cdef int lo = patch // 2, hi = (patch - 1) // 2
    tmp_arr = np.zeros((H, W), dtype=np.int32)
    out_arr = np.zeros((H, W), dtype=bool)
    cdef int[:, ::1] tmp = tmp_arr
    cdef cnp.uint8_t[:, ::1] out = out_arr.view(np.uint8)
    cdef Py_ssize_t y, x, a, b
    cdef int count
    with nogil:
        # horizontal running count, window [x - lo, x + hi]
        for y in range(H):
            count = 0
            for x in range(min(hi, W - 1) + 1):
                count += m[y, x] != 0
            for x in range(W):
                tmp[y, x] = count
                a = x - lo
                b = x + hi + 1
                if a >= 0:
                    count -= m[y, a] != 0
                if b < W:
                    count += m[y, b] != 0
        for x in range(W):
            count = 0
            for y in range(min(hi, H - 1) + 1):
                count += tmp[y, x]
            for y in range(H):
                out[y, x] = count > 0
                a = y - lo
                b = y + hi + 1
                if a >= 0:
                    count -= tmp[a, x]
                if b < H:
                    count += tmp[b, x]
    return out_arr


def huber_normal_equations(y, r, double delta, prior=None):
    cdef const double[:, ::1] Y = np.ascontiguousarray(y, dtype=np.float64)
    cdef const double[:, ::1] Rr = np.ascontiguousarray(r, dtype=np.float64)
    cdef Py_ssize_t n = Y.shape[0], i
    cdef bint weighted = prior is not None
    cdef const double[::1] PW = np.ascontiguousarray(prior if weighted else np.ones(1), dtype=np.float64)
    cdef double pw = 1.0
    cdef bint robust = delta > 0 and isfinite(delta)
    cdef double s, w, cost = 0.0
    cdef double y0, y1, y2, r0, r1, r2
    cdef double sw = 0, syy = 0, sy0 = 0, sy1 = 0, sy2 = 0
    cdef double s00 = 0, s01 = 0, s02 = 0, s11 = 0, s12 = 0, s22 = 0
    cdef double g0 = 0, g1 = 0, g2 = 0, g3 = 0, g4 = 0, g5 = 0
    with nogil:
        for i in range(n):
            y0 = Y[i, 0]; y1 = Y[i, 1]; y2 = Y[i, 2]
            r0 = Rr[i, 0]; r1 = Rr[i, 1]; r2 = Rr[i, 2]
            s = sqrt(r0 * r0 + r1 * r1 + r2 * r2)
            if weighted:
                pw = PW[i]
            if robust and s > delta:
                w = pw * delta / s
                cost += pw * delta * (s - 0.5 * delta)
            else:
                w = pw
                cost += pw * 0.5 * s * s
            sw += w
            syy += w * (y0 * y0 + y1 * y1 + y2 * y2)
            sy0 += w * y0; sy1 += w * y1; sy2 += w * y2
            s00 += w * y0 * y0; s01 += w * y0 * y1; s02 += w * y0 * y2
            s11 += w * y1 * y1; s12 += w * y1 * y2; s22 += w * y2 * y2
            g0 += w * (y1 * r2 - y2 * r1)
            g1 += w * (y2 * r0 - y0 * r2)
            g2 += w * (y0 * r1 - y1 * r0)
            g3 += w * r0; g4 += w * r1; g5 += w * r2
    Hm = np.zeros((6, 6))
    Hm[0, 0] = syy - s00; Hm[0, 1] = -s01; Hm[0, 2] = -s02
    Hm[1, 0] = -s01; Hm[1, 1] = syy - s11; Hm[1, 2] = -s12
    Hm[2, 0] = -s02; Hm[2, 1] = -s12; Hm[2, 2] = syy - s22
    Sx = np.array([[0.0, -sy2, sy1], [sy2, 0.0, -sy0], [-sy1, sy0, 0.0]])
    Hm[:3, 3:] = Sx
    Hm[3:, :3] = -Sx
    Hm[3, 3] = sw; Hm[4, 4] = sw; Hm[5, 5] = sw
    g = np.array([g0, g1, g2, g3, g4, g5])
    return Hm, g, cost


cdef inline double _plane(const double* o, const double* d, const double* p) noexcept nogil:
    cdef double den = d[0] * p[3] + d[1] * p[4] + d[2] * p[5]
    if fabs(den) <= 1e-300:
        return INFINITY
    return ((p[0] - o[0]) * p[3] + (p[1] - o[1]) * p[4] + (p[2] - o[2]) * p[5]) / den


cdef inline double _sphere(const double* o, const double* d, const double* p) noexcept nogil:
    cdef double oc0 = o[0] - p[0], oc1 = o[1] - p[1], oc2 = o[2] - p[2]
    cdef double a = d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
    cdef double b = d[0] * oc0 + d[1] * oc1 + d[2] * oc2
    cdef double c = oc0 * oc0 + oc1 * oc1 + oc2 * oc2 - p[3] * p[3]
    cdef double disc = b * b - a * c
    cdef double sq, t
    if disc < 0:
        return INFINITY
    sq = sqrt(disc)
    t = (-b - sq) / a
    if t > T_MIN:
        return t
    return (-b + sq) / a


cdef inline double _box(const double* o, const double* d, const double* p) noexcept nogil:
    # p: c(3), half(3), R(9) row-major local->world
    cdef double ol[3]
    cdef double dl[3]
    cdef double w0 = o[0] - p[0], w1 = o[1] - p[1], w2 = o[2] - p[2]
    cdef int ax
    cdef double t_enter = -INFINITY, t_exit = INFINITY, t1, t2, inv, h
    for ax in range(3):
        ol[ax] = p[6 + ax] * w0 + p[9 + ax] * w1 + p[12 + ax] * w2
        dl[ax] = p[6 + ax] * d[0] + p[9 + ax] * d[1] + p[12 + ax] * d[2]
    for ax in range(3):
        h = p[3 + ax]
        if dl[ax] == 0.0:
            if ol[ax] < -h or ol[ax] > h:
                return INFINITY
            continue
        inv = 1.0 / dl[ax]
        t1 = (-h - ol[ax]) * inv
        t2 = (h - ol[ax]) * inv
        if t1 > t2:
            t1, t2 = t2, t1
        if t1 > t_enter:
            t_enter = t1
        if t2 < t_exit:
            t_exit = t2
    if t_exit < t_enter or t_exit <= T_MIN:
        return INFINITY
    if t_enter > T_MIN:
        return t_enter
    return t_exit


def raycast(origin, dirs, prims):
    cdef const double[::1] o = np.ascontiguousarray(np.asarray(origin, dtype=np.float64).reshape(3))
    cdef const double[:, ::1] d = np.ascontiguousarray(np.asarray(dirs, dtype=np.float64).reshape(-1, 3))
    cdef const double[:, ::1] P = np.ascontiguousarray(np.asarray(prims, dtype=np.float64).reshape(-1, 16))
    cdef Py_ssize_t n = d.shape[0], m = P.shape[0], i, k
    for k in range(m):
        if <int>P[k, 0] not in (0, 1, 2):
            raise ValueError(f"unknown primitive type {int(P[k, 0])}")
    t_arr = np.full(n, np.inf)
    i_arr = np.full(n, -1, dtype=np.int64)
    cdef double[::1] best_t = t_arr
    cdef cnp.int64_t[::1] best_i = i_arr
    cdef double t
    cdef int kind
    with nogil:
        for i in range(n):
            for k in range(m):
                kind = <int>P[k, 0]
                if kind == 0:
                    t = _plane(&o[0], &d[i, 0], &P[k, 1])
                elif kind == 1:
                    t = _sphere(&o[0], &d[i, 0], &P[k, 1])
                else:
                    t = _box(&o[0], &d[i, 0], &P[k, 1])
                if t > T_MIN and t < best_t[i]:
                    best_t[i] = t
                    best_i[i] = k
    return t_arr, i_arr
