"""Kernel selection: compiled extension if importable, numpy fallback otherwise.

Set ``CAVITYARRAY_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _pykernel

BACKEND = "python"
trace_rays = _pykernel.trace_rays

if os.environ.get("CAVITYARRAY_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernel
    except ImportError:  # extension not built
        _ckernel = None
    if _ckernel is not None:
        BACKEND = "compiled"
        trace_rays = _ckernel.trace_rays


def get_kernel(name=None):
    """Return ``trace_rays`` for ``compiled``/``python`` (default: active backend)."""
    if name is None:
        return trace_rays
    if name == "python":
        return _pykernel.trace_rays
    if name == "compiled":
        from . import _ckernel as ck
        return ck.trace_rays
    raise ValueError(f"unknown kernel {name!r}")
