"""Kernel backend selection.

The compiled extension (``pbvote._kernels``) is preferred when it imported
cleanly; the numpy fallback is always available.  ``PBVOTE_BACKEND`` forces a
choice: ``compiled``, ``python`` or ``auto`` (default).
"""

import os

from . import _purekernels

try:
    from . import _kernels as _compiled
except ImportError:
    _compiled = None


def available_backends():
    names = ["python"]
    if _compiled is not None:
        names.insert(0, "compiled")
    return names


def active_backend() -> str:
    forced = os.environ.get("PBVOTE_BACKEND", "auto").lower()
    if forced == "python":
        return "python"
    if forced == "compiled":
        if _compiled is None:
            raise RuntimeError(
                "PBVOTE_BACKEND=compiled but pbvote._kernels is not built; "
                "run `python setup.py build_ext --inplace` or reinstall"
            )
        return "compiled"
    return "compiled" if _compiled is not None else "python"


def kernels(name=None):
    """Return the kernel module implementing fwd/bwd for dense chains."""
    name = name or active_backend()
    if name == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled backend not available")
        return _compiled
    return _purekernels
