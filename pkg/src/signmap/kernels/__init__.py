"""Hot numeric kernels with a numba backend and a pure-numpy fallback.

The backend is chosen once at import time.  Set ``SIGNMAP_NUMBA=0`` in the
environment to force the numpy path; anything else (including unset) uses
numba when it is importable.  ``python -m signmap.benchmark`` compares the
two on a realistic workload.
"""

from __future__ import annotations

import os

from . import plain
from .plain import (  # cold helpers are numpy-only by design
    LOG_2PI,
    PSI_FLOOR,
    edge_detect_grads,
    edge_log_f_mixed,
)

_flag = os.environ.get("SIGNMAP_NUMBA", "").strip().lower()
if _flag in ("0", "false", "off", "no"):
    _active = plain
else:
    try:
        from . import jitted as _active
    except ImportError:  # pragma: no cover - numba genuinely missing
        _active = plain

log_i0 = _active.log_i0
i1_over_i0 = _active.i1_over_i0
edge_log_f = _active.edge_log_f
edge_detect = _active.edge_detect
bp_run = _active.bp_run


def backend_name() -> str:
    """Name of the active backend: 'numba' or 'numpy'."""
    return _active.BACKEND


def available_backends() -> dict:
    """All importable backend modules, keyed by name."""
    out = {"numpy": plain}
    try:
        from . import jitted
        out["numba"] = jitted
    except ImportError:  # pragma: no cover
        pass
    return out


__all__ = [
    "LOG_2PI",
    "PSI_FLOOR",
    "log_i0",
    "i1_over_i0",
    "edge_log_f",
    "edge_detect",
    "bp_run",
    "edge_detect_grads",
    "edge_log_f_mixed",
    "backend_name",
    "available_backends",
]
