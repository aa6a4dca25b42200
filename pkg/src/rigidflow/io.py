"""Readers and writers for flow, scene flow, depth, masks, poses and bundles.

Binary containers are little-endian. Readers raise :class:`FormatError` on
anything malformed and never return partial data.
"""
from __future__ import annotations

import math
import os
import struct

import numpy as np
from PIL import Image

from .errors import DataError, FormatError, UsageError
from .geometry import Intrinsics, RigidTransform

FLO_MAGIC = 202021.25
INVALID_FLOW = 1e10  # written for NaN entries; anything above 1e9 reads back as NaN
DEFAULT_DEPTH_SCALE = 5000.0

BUNDLE_FILES = {
    "depth0": "depth0.png",
    "depth1": "depth1.png",
    "flow_fwd": "flow_fwd.flo",
    "flow_bwd": "flow_bwd.flo",
    "rigidity": "rigidity.png",
    "occlusion_fwd": "occlusion.png",
    "valid": "valid.png",
    "pose01": "pose01.txt",
    "scene_flow": "scene_flow.sfl",
    "intrinsics": "intrinsics.txt",
}
OPTIONAL_FILES = {"depth1_registered": "depth1_registered.sfl", "flow_fwd_gt": "flow_fwd_gt.flo"}


def _read_bytes(path):
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc


def _encode_grid(data):
    out = np.array(data, dtype="<f4")
    out[~np.isfinite(out)] = INVALID_FLOW
    return out


def _decode_grid(raw, H, W, C):
    data = raw.reshape(H, W, C).astype(np.float32)
    data[np.abs(data) > 1e9] = np.nan
    return data


# --- .flo / .sfl ----------------------------------------------------------------

def write_flo(path, flow):
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise UsageError(f"flow must be (H, W, 2), got {flow.shape}")
    H, W = flow.shape[:2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", FLO_MAGIC, W, H))
        fh.write(_encode_grid(flow).tobytes())


def read_flo(path):
    """Return an ``(H, W, 2)`` float32 field; values beyond 1e9 become NaN."""
    buf = _read_bytes(path)
    if len(buf) < 12:
        raise FormatError(f"{path}: truncated header")
    magic, W, H = struct.unpack_from("<fii", buf)
    if magic != FLO_MAGIC:
        raise FormatError(f"{path}: bad magic {magic}")
    if W <= 0 or H <= 0:
        raise FormatError(f"{path}: bad size {W}x{H}")
    n = W * H * 2
    if len(buf) != 12 + 4 * n:
        raise FormatError(f"{path}: expected {12 + 4 * n} bytes, found {len(buf)}")
    return _decode_grid(np.frombuffer(buf, dtype="<f4", offset=12), H, W, 2)


def write_sfl(path, field):
    """Like .flo, with a channel count after the height (3 for scene flow)."""
    field = np.asarray(field)
    if field.ndim == 2:
        field = field[..., None]
    if field.ndim != 3:
        raise UsageError(f"field must be (H, W, C), got {field.shape}")
    H, W, C = field.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fiii", FLO_MAGIC, W, H, C))
        fh.write(_encode_grid(field).tobytes())


def read_sfl(path):
    buf = _read_bytes(path)
    if len(buf) < 16:
        raise FormatError(f"{path}: truncated header")
    magic, W, H, C = struct.unpack_from("<fiii", buf)
    if magic != FLO_MAGIC:
        raise FormatError(f"{path}: bad magic {magic}")
    if W <= 0 or H <= 0 or C <= 0:
        raise FormatError(f"{path}: bad size {W}x{H}x{C}")
    n = W * H * C
    if len(buf) != 16 + 4 * n:
        raise FormatError(f"{path}: expected {16 + 4 * n} bytes, found {len(buf)}")
    return _decode_grid(np.frombuffer(buf, dtype="<f4", offset=16), H, W, C)


# --- images ---------------------------------------------------------------------

def _open_image(path):
    try:
        with Image.open(path) as im:
            im.load()
            return im.copy()
    except (OSError, ValueError, Image.DecompressionBombError) as exc:
        raise FormatError(f"cannot decode image {path}: {exc}") from exc


def write_depth(path, depth, scale=DEFAULT_DEPTH_SCALE):
    """16-bit PNG with ``value = round(depth · scale)``; invalid depth is 0."""
    if not scale > 0:
        raise UsageError("depth scale must be positive")
    d = np.asarray(depth, dtype=np.float64)
    ok = np.isfinite(d) & (d > 0)
    q = np.zeros(d.shape)
    q[ok] = np.floor(d[ok] * scale + 0.5)
    if np.any(q > 65535):
        raise DataError(f"depth above {65535 / scale:g} m cannot be stored at scale {scale:g}")
    Image.fromarray(q.astype(np.uint16)).save(path, format="PNG")


def read_depth(path, scale=DEFAULT_DEPTH_SCALE):
    """Depth in meters; stored zeros come back as NaN."""
    if not scale > 0:
        raise UsageError("depth scale must be positive")
    im = _open_image(path)
    a = np.asarray(im)
    if a.ndim != 2:
        raise FormatError(f"{path}: depth image must be single-channel")
    a = a.astype(np.float64)
    return np.where(a > 0, a / scale, np.nan)


def write_mask(path, mask):
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise UsageError(f"mask must be 2-D, got {m.shape}")
    Image.fromarray(np.where(m, 255, 0).astype(np.uint8)).save(path, format="PNG")


def read_mask(path):
    a = np.asarray(_open_image(path))
    if a.ndim == 3:
        a = a.any(axis=-1)
    return a != 0


# --- trajectories ---------------------------------------------------------------

def _num(x):
    return "%.17g" % (float(x) + 0.0)


def format_pose_line(timestamp, T):
    q = T.quaternion()
    vals = [_num(x) for x in T.translation] + [_num(x) for x in q]
    return " ".join([repr(float(timestamp))] + vals)


def write_trajectory(path, poses):
    """``poses`` is a sequence of ``(timestamp, RigidTransform)``."""
    with open(path, "w") as fh:
        for ts, T in poses:
            fh.write(format_pose_line(ts, T) + "\n")


def parse_pose_line(line, where="line"):
    tok = line.split()
    if len(tok) != 8:
        raise FormatError(f"{where}: expected 8 fields, found {len(tok)}")
    try:
        vals = [float(x) for x in tok]
    except ValueError as exc:
        raise FormatError(f"{where}: {exc}") from exc
    if not all(math.isfinite(x) for x in vals):
        raise FormatError(f"{where}: non-finite value")
    q = np.array(vals[4:])
    if abs(np.linalg.norm(q) - 1.0) > 1e-3:
        raise FormatError(f"{where}: quaternion norm {np.linalg.norm(q):.6g} is not 1")
    return vals[0], RigidTransform.from_quaternion(q, vals[1:4])


def read_trajectory(path):
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    out = []
    for n, line in enumerate(lines, 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        out.append(parse_pose_line(s, f"{path}:{n}"))
    return out


# --- intrinsics -----------------------------------------------------------------

def format_intrinsics(intr):
    return " ".join(_num(x) for x in (intr.fx, intr.fy, intr.cx, intr.cy)) + f" {intr.width} {intr.height}"


def parse_intrinsics(text):
    lines = [s for s in (ln.strip() for ln in text.splitlines()) if s and not s.startswith("#")]
    if len(lines) != 1:
        raise FormatError("intrinsics must be a single line 'fx fy cx cy width height'")
    tok = lines[0].split()
    if len(tok) != 6:
        raise FormatError("intrinsics must have 6 fields")
    try:
        fx, fy, cx, cy = (float(x) for x in tok[:4])
        w, h = float(tok[4]), float(tok[5])
        if w != int(w) or h != int(h):
            raise ValueError("image size must be integral")
        return Intrinsics(fx, fy, cx, cy, int(w), int(h))
    except (ValueError, UsageError) as exc:
        raise FormatError(f"bad intrinsics: {exc}") from exc


def read_intrinsics(path):
    try:
        with open(path) as fh:
            return parse_intrinsics(fh.read())
    except (OSError, UnicodeDecodeError) as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc


def write_intrinsics(path, intr):
    with open(path, "w") as fh:
        fh.write(format_intrinsics(intr) + "\n")


# --- bundles --------------------------------------------------------------------

def write_bundle(directory, bundle, depth_scale=DEFAULT_DEPTH_SCALE):
    os.makedirs(directory, exist_ok=True)
    p = lambda key: os.path.join(directory, BUNDLE_FILES[key])  # noqa: E731
    write_depth(p("depth0"), bundle.depth0, depth_scale)
    write_depth(p("depth1"), bundle.depth1, depth_scale)
    write_flo(p("flow_fwd"), bundle.flow_fwd)
    write_flo(p("flow_bwd"), bundle.flow_bwd)
    write_mask(p("rigidity"), bundle.rigidity)
    write_mask(p("occlusion_fwd"), bundle.occlusion_fwd)
    write_mask(p("valid"), bundle.valid)
    write_trajectory(p("pose01"), [(0.0, bundle.pose01)])
    write_sfl(p("scene_flow"), bundle.scene_flow)
    write_intrinsics(p("intrinsics"), bundle.intrinsics)
    if bundle.depth1_registered is not None:
        write_sfl(os.path.join(directory, OPTIONAL_FILES["depth1_registered"]), bundle.depth1_registered)
    if bundle.flow_fwd_gt is not None:
        write_flo(os.path.join(directory, OPTIONAL_FILES["flow_fwd_gt"]), bundle.flow_fwd_gt)


def read_bundle(directory, depth_scale=DEFAULT_DEPTH_SCALE):
    from .synth import GroundTruthBundle

    def p(name):
        return os.path.join(directory, name)

    for key, name in BUNDLE_FILES.items():
        if key not in ("occlusion_fwd", "valid") and not os.path.isfile(p(name)):
            raise FormatError(f"bundle {directory} is missing {name}")
    intr = read_intrinsics(p(BUNDLE_FILES["intrinsics"]))
    grids = {
        "depth0": read_depth(p(BUNDLE_FILES["depth0"]), depth_scale),
        "depth1": read_depth(p(BUNDLE_FILES["depth1"]), depth_scale),
        "flow_fwd": read_flo(p(BUNDLE_FILES["flow_fwd"])),
        "flow_bwd": read_flo(p(BUNDLE_FILES["flow_bwd"])),
        "rigidity": read_mask(p(BUNDLE_FILES["rigidity"])),
        "scene_flow": read_sfl(p(BUNDLE_FILES["scene_flow"])),
    }
    for key, default in (("occlusion_fwd", False), ("valid", True)):
        path = p(BUNDLE_FILES[key])
        grids[key] = read_mask(path) if os.path.isfile(path) else np.full(intr.shape, default)
    poses = read_trajectory(p(BUNDLE_FILES["pose01"]))
    if len(poses) != 1:
        raise FormatError(f"{BUNDLE_FILES['pose01']} must hold exactly one pose")
    extra = {}
    if os.path.isfile(p(OPTIONAL_FILES["depth1_registered"])):
        extra["depth1_registered"] = read_sfl(p(OPTIONAL_FILES["depth1_registered"]))[..., 0].astype(np.float64)
    if os.path.isfile(p(OPTIONAL_FILES["flow_fwd_gt"])):
        extra["flow_fwd_gt"] = read_flo(p(OPTIONAL_FILES["flow_fwd_gt"])).astype(np.float64)
    for key, g in grids.items():
        if tuple(g.shape[:2]) != intr.shape:
            raise FormatError(f"{key} is {g.shape[:2]}, intrinsics say {intr.shape}")
    for key in ("flow_fwd", "flow_bwd", "scene_flow"):
        grids[key] = grids[key].astype(np.float64)
    if "scene_flow" in grids and grids["scene_flow"].shape[2] != 3:
        raise FormatError("scene_flow.sfl must have 3 channels")
    return GroundTruthBundle(intrinsics=intr, pose01=poses[0][1], **grids, **extra)
