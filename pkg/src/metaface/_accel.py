"""Numba availability switch.

Set ``METAFACE_DISABLE_NUMBA=1`` to force the pure-numpy kernels. Numba is
also skipped silently when it cannot be imported.
"""

import os

_DISABLED = os.environ.get("METAFACE_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    import numba as _numba
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None
    HAS_NUMBA = False

NUMBA_ENABLED = HAS_NUMBA and not _DISABLED


def njit(func):
    """``numba.njit(cache=True)`` when numba is importable, identity otherwise.

    The jitted object is always built (if possible) so the benchmark can
    compare both paths regardless of ``NUMBA_ENABLED``.
    """
    if not HAS_NUMBA:
        return func
    return _numba.njit(cache=True, nogil=True)(func)
