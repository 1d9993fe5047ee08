"""Backend switch for the compiled kernels.

Set ``MIXSEG_NUMBA=0`` in the environment before import to force the
pure-numpy code paths. When numba is missing the numpy path is used too.
"""

import os

_flag = os.environ.get("MIXSEG_NUMBA", "1").strip().lower()
_requested = _flag not in ("0", "false", "no", "off")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _requested


def njit(*args, **kwargs):
    """``numba.njit`` with caching, or a no-op decorator without numba."""
    kwargs.setdefault("cache", True)
    if HAVE_NUMBA:
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]):
        return args[0]
    return lambda f: f
