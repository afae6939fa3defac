"""Kernel backend selection.

The compiled ``_kernels`` extension is used when it was built; otherwise the
pure-Python twin in ``_kernels_py``. Set ``MGAA_PURE_PYTHON=1`` to force the
fallback.
"""

import os

from . import _kernels_py

_impl = _kernels_py
if os.environ.get("MGAA_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        _impl = _compiled
else:
    _compiled = None

BACKEND = _impl.BACKEND
level_rank = _impl.level_rank
balanced_solve = _impl.balanced_solve
brute_force_solve = _impl.brute_force_solve


def available_backends():
    """Map backend name -> module for every importable implementation."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels
    except ImportError:
        pass
    else:
        out["cython"] = _kernels
    return out
