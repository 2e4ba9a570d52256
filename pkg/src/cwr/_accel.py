"""Numba switch for the hot kernels.

Set ``CWR_DISABLE_NUMBA=1`` to force the pure-numpy implementations (useful
for debugging and for the benchmark in ``bench/``).
"""

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("CWR_DISABLE_NUMBA", "0").lower() not in (
    "1",
    "true",
    "yes",
)


def njit(fn):
    """Compile ``fn`` in nopython mode when numba is available, else return it."""
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def select(numba_impl, numpy_impl):
    return numba_impl if USE_NUMBA else numpy_impl
