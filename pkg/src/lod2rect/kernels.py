"""Kernel backend selection.

The compiled extension is used when importable; set ``LOD2RECT_PURE_PYTHON=1``
to force the numpy fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels
if os.environ.get("LOD2RECT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build
        _impl = _pykernels

grid_sse = _impl.grid_sse
max_inner_rect = _impl.max_inner_rect
watershed_flood = _impl.watershed_flood


def backends():
    """Available backend modules keyed by name (for tests and benchmarks)."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:  # pragma: no cover
        pass
    return out
