"""Backend selection for the hot kernels.

The compiled module is used when it was built and importable; setting
``RIGIDFLOW_PURE_PYTHON=1`` forces the numpy fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("RIGIDFLOW_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

fb_residual = _impl.fb_residual
dilate = _impl.dilate
huber_normal_equations = _impl.huber_normal_equations
raycast = _impl.raycast

PLANE, SPHERE, BOX = _pykernels.PLANE, _pykernels.SPHERE, _pykernels.BOX


def backends():
    """Every importable backend, keyed by name (used by tests and benchmarks)."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels
        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
