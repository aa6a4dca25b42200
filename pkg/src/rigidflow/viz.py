"""Flow colour coding and error heatmaps (8-bit images as numpy arrays)."""
from __future__ import annotations

import numpy as np
from PIL import Image

from .errors import UsageError

AUTO_PERCENTILE = 99.0
MIN_AUTO_MAGNITUDE = 1e-6


def make_colorwheel():
    """The 55-entry Middlebury wheel (red, yellow, green, cyan, blue, magenta)."""
    RY, YG, GC, CB, BM, MR = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((RY + YG + GC + CB + BM + MR, 3))
    k = 0
    wheel[k:k + RY, 0] = 255
    wheel[k:k + RY, 1] = np.floor(255 * np.arange(RY) / RY)
    k += RY
    wheel[k:k + YG, 0] = 255 - np.floor(255 * np.arange(YG) / YG)
    wheel[k:k + YG, 1] = 255
    k += YG
    wheel[k:k + GC, 1] = 255
    wheel[k:k + GC, 2] = np.floor(255 * np.arange(GC) / GC)
    k += GC
    wheel[k:k + CB, 1] = 255 - np.floor(255 * np.arange(CB) / CB)
    wheel[k:k + CB, 2] = 255
    k += CB
    wheel[k:k + BM, 2] = 255
    wheel[k:k + BM, 0] = np.floor(255 * np.arange(BM) / BM)
    k += BM
    wheel[k:k + MR, 2] = 255 - np.floor(255 * np.arange(MR) / MR)
    wheel[k:k + MR, 0] = 255
    return wheel


_WHEEL = make_colorwheel()


def auto_max_magnitude(flow):
    mag = np.linalg.norm(np.asarray(flow, dtype=np.float64), axis=-1)
    mag = mag[np.isfinite(mag)]
    if len(mag) == 0:
        return 1.0
    return max(float(np.percentile(mag, AUTO_PERCENTILE)), MIN_AUTO_MAGNITUDE)


def flow_to_color(flow, max_magnitude=None):
    """``(H, W, 3)`` uint8 image. Hue encodes direction, saturation the
    magnitude relative to ``max_magnitude`` (clipped at 1).

    Zero flow is white and non-finite flow black. ``max_magnitude=None``
    uses the 99th percentile of the valid magnitudes.
    """
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise UsageError(f"flow must be (H, W, 2), got {flow.shape}")
    if max_magnitude is None:
        max_magnitude = auto_max_magnitude(flow)
    elif not max_magnitude > 0:
        raise UsageError("max_magnitude must be positive")
    u, v = flow[..., 0], flow[..., 1]
    invalid = ~(np.isfinite(u) & np.isfinite(v))
    u = np.where(invalid, 0.0, u)
    v = np.where(invalid, 0.0, v)
    sat = np.minimum(np.hypot(u, v) / max_magnitude, 1.0)
    ncols = len(_WHEEL)
    a = np.arctan2(-v, -u) / np.pi  # in [-1, 1]
    fk = (a + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    f = (fk - k0)[..., None]
    col = ((1 - f) * _WHEEL[k0] + f * _WHEEL[k1]) / 255.0
    col = 1 - sat[..., None] * (1 - col)
    img = np.floor(255 * col + 0.5).astype(np.uint8)
    img[invalid] = 0
    return img


def error_heatmap(est, gt, valid=None, cap=1.0):
    """``round(min(||est - gt|| / cap, 1) · 255)`` as uint8; invalid pixels 0."""
    if not cap > 0:
        raise UsageError("cap must be positive")
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if est.shape != gt.shape:
        raise UsageError(f"shape mismatch {est.shape} vs {gt.shape}")
    err = np.linalg.norm(est - gt, axis=-1)
    ok = np.isfinite(err)
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != err.shape:
            raise UsageError(f"valid mask is {valid.shape}, fields are {err.shape}")
        ok &= valid
    val = np.floor(np.minimum(np.where(ok, err, 0.0) / cap, 1.0) * 255 + 0.5)
    return np.where(ok, val, 0).astype(np.uint8)


def save_image(path, img):
    Image.fromarray(np.asarray(img, dtype=np.uint8)).save(path, format="PNG")
