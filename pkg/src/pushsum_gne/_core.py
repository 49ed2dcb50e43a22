"""Backend selection for the scalar-quadratic run loop.

The compiled extension is used when it imports; setting
``PUSHSUM_GNE_PURE=1`` forces the numpy fallback.
"""

import os

from . import _kernel_py

try:
    if os.environ.get("PUSHSUM_GNE_PURE", "") not in ("", "0"):
        raise ImportError("pure-python backend requested")
    from . import _kernel as _compiled
except ImportError:
    _compiled = None

BACKEND = "compiled" if _compiled is not None else "python"


def get_kernel(name: str = "auto"):
    """Return the ``run_scalar_quadratic`` implementation for ``name``.

    ``name`` is ``"auto"``, ``"compiled"`` or ``"python"``.
    """
    if name == "python" or (name == "auto" and _compiled is None):
        return _kernel_py.run_scalar_quadratic
    if _compiled is None:
        raise RuntimeError("compiled kernel unavailable; reinstall with a C compiler and Cython")
    return _compiled.run_scalar_quadratic
