"""Switch between numba-compiled kernels and the numpy fallback.

Set ``DEMOSEG_DISABLE_NUMBA=1`` to force the numpy path (useful when numba
is unavailable or when comparing the two paths).
"""
import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("DEMOSEG_DISABLE_NUMBA", "0") not in ("1", "true", "yes")

numba_kwargs = {
    "nopython": True,
    "cache": True,
    "nogil": True,
}


def njit(fn):
    """Compile ``fn`` with numba when available, else return it untouched."""
    if not HAVE_NUMBA:
        return fn
    return numba.jit(**numba_kwargs)(fn)
