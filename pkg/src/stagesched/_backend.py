"""Select the compiled kernel when available, else the pure-Python one.

Set STAGESCHED_PURE=1 to force the fallback.
"""
from __future__ import annotations

import logging
import os

from . import _kernel_py

logger = logging.getLogger(__name__)

_compiled = None
if os.environ.get("STAGESCHED_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernel as _compiled  # type: ignore[attr-defined]
    except ImportError:  # extension not built
        logger.debug("compiled kernel unavailable, using pure-Python fallback")
        _compiled = None

BACKEND = "compiled" if _compiled is not None else "python"
simulate = _compiled.simulate if _compiled is not None else _kernel_py.simulate


def get_simulate(name: str | None = None):
    """Kernel function by backend name ("compiled", "python"); None means the active one."""
    if name is None:
        return simulate
    if name == "python":
        return _kernel_py.simulate
    if name == "compiled":
        if _compiled is None:
            raise ImportError("compiled kernel is not built")
        return _compiled.simulate
    raise ValueError(f"unknown backend {name!r}")
