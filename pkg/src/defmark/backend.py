"""Backend selection for the node-sweep hot loop.

The compiled extension (`defmark._native`) is preferred; the numpy fallback
(`defmark._native_py`) is used when the extension is not built. Set
DEFMARK_BACKEND=python or DEFMARK_BACKEND=compiled to force one side
(benchmarks and agreement tests import both modules directly instead).
"""

from __future__ import annotations

import logging
import os

_log = logging.getLogger("defmark")

_requested = os.environ.get("DEFMARK_BACKEND", "auto").strip().lower() or "auto"

if _requested == "auto":
    try:
        from . import _native as _impl

        BACKEND = "compiled"
    except ImportError:
        from . import _native_py as _impl

        BACKEND = "python"
        _log.info("compiled sweep kernel unavailable; using the numpy fallback")
elif _requested == "python":
    from . import _native_py as _impl

    BACKEND = "python"
elif _requested in ("compiled", "native"):
    from . import _native as _impl

    BACKEND = "compiled"
else:
    raise ImportError(
        f"DEFMARK_BACKEND={_requested!r} not understood (use auto, python or compiled)"
    )

sweep_nodes = _impl.sweep_nodes

__all__ = ["BACKEND", "sweep_nodes"]
