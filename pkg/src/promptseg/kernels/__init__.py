"""Hot kernels with a numba path and a pure numpy/scipy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``PROMPTSEG_DISABLE_NUMBA`` is unset or ``0``. :func:`use_numba`
switches at runtime (benchmarks and equivalence tests rely on it).
"""

import os

from . import _numpy_kernels

try:
    from . import _numba_kernels

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba_kernels = None
    NUMBA_AVAILABLE = False

_KERNELS = ("label8", "otsu_bin", "within_tolerance", "conv2d_forward", "conv2d_backward")


def _env_disabled():
    return os.environ.get("PROMPTSEG_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")


_active = None


def use_numba(flag):
    """Select the numba (True) or numpy (False) implementations globally."""
    global _active
    if flag and not NUMBA_AVAILABLE:
        raise RuntimeError("numba is not importable; cannot enable the numba backend")
    _active = _numba_kernels if flag else _numpy_kernels
    g = globals()
    for name in _KERNELS:
        g[name] = getattr(_active, name)


def backend():
    """Name of the active backend, ``"numba"`` or ``"numpy"``."""
    return "numba" if _active is _numba_kernels and _numba_kernels is not None else "numpy"


use_numba(NUMBA_AVAILABLE and not _env_disabled())

__all__ = ["NUMBA_AVAILABLE", "backend", "use_numba", *_KERNELS]
