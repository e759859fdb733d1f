"""Selects the compiled reservoir kernels, falling back to numpy.

Set ``ESNCV_PURE_PYTHON=1`` before import to force the fallback.
"""
import os

from . import _kernels_py

IMPLEMENTATIONS = {"python": _kernels_py}

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None
else:
    IMPLEMENTATIONS["compiled"] = _compiled

if _compiled is not None and not os.environ.get("ESNCV_PURE_PYTHON"):
    ACTIVE = "compiled"
else:
    ACTIVE = "python"

_impl = IMPLEMENTATIONS[ACTIVE]
run_reservoir = _impl.run_reservoir
run_closed_loop = _impl.run_closed_loop


def get(name=None):
    """Return the kernel module called ``name`` (default: the active one)."""
    if name is None:
        name = ACTIVE
    try:
        return IMPLEMENTATIONS[name]
    except KeyError:
        raise ValueError(
            f"kernel implementation {name!r} unavailable; have {sorted(IMPLEMENTATIONS)}"
        ) from None
