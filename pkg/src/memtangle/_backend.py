"""Kernel backend selection.

The compiled extension is used when importable; setting
``MEMTANGLE_PURE_PYTHON=1`` forces the numpy fallback.
"""
from __future__ import annotations

import os

from . import _fallback

fallback = _fallback

if os.environ.get("MEMTANGLE_PURE_PYTHON", "") not in ("", "0"):
    kernels = _fallback
    BACKEND = "python"
else:
    try:
        from . import _kernels as kernels  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        kernels = _fallback
        BACKEND = "python"


def compiled():
    """The compiled module, or None when it was not built."""
    try:
        from . import _kernels  # type: ignore[attr-defined]
    except ImportError:
        return None
    return _kernels
