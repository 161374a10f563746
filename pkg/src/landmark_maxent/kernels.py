"""Backend selection for the hot loops.

The compiled extension is used when it imports; otherwise, or when
``LANDMARK_MAXENT_PURE=1`` is set, the NumPy fallback is used.  ``BACKEND``
names the active one.
"""
import os

from . import _kernels_py

_compiled = None
if os.environ.get("LANDMARK_MAXENT_PURE", "") != "1":
    try:
        from . import _kernels_cy as _compiled
    except ImportError:  # extension not built
        _compiled = None

_active = _compiled if _compiled is not None else _kernels_py
BACKEND = "cython" if _compiled is not None else "python"

metropolis_sweeps = _active.metropolis_sweeps
pcd_steps = _active.pcd_steps


def get_backend(name=None):
    """Kernel module by name (``"cython"`` or ``"python"``); default: active."""
    if name is None:
        return _active
    if name == "python":
        return _kernels_py
    if name == "cython":
        if _compiled is None:
            from . import _kernels_cy

            return _kernels_cy
        return _compiled
    raise ValueError(f"unknown backend {name!r}")
