"""Picks the compiled loops when importable, otherwise the numpy versions.

Set MAGPC_PURE_PYTHON=1 to force the numpy versions.
"""

import os

from . import _core_py

BACKEND = "python"
_impl = _core_py
if os.environ.get("MAGPC_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _core as _compiled
    except ImportError:
        _compiled = None
    if _compiled is not None:
        _impl = _compiled
        BACKEND = "compiled"
else:
    _compiled = None


def get(backend=None):
    """Kernel module for `backend` in {None, "compiled", "python"}."""
    if backend in (None, "auto"):
        return _impl
    if backend == "python":
        return _core_py
    if backend == "compiled":
        if _compiled is None:
            from . import _core as mod
            return mod
        return _compiled
    raise ValueError(f"unknown backend {backend!r}")


def available():
    out = ["python"]
    try:
        from . import _core  # noqa: F401
        out.append("compiled")
    except ImportError:
        pass
    return out
