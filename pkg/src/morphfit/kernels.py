"""Select the compiled kernel module, falling back to numpy.

Set ``MORPHFIT_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("MORPHFIT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback

closest_points_bvh = _impl.closest_points_bvh

__all__ = ["BACKEND", "closest_points_bvh"]
