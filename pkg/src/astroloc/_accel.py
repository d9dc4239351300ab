"""Backend switch for the hot numeric kernels.

Set ``ASTROLOC_NUMBA=0`` in the environment to force the pure-numpy path,
e.g. on platforms without numba or to cross-check the compiled kernels.
The flag is read once at import time.
"""
import os

_FLAG = os.environ.get("ASTROLOC_NUMBA", "1").strip().lower()

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _FLAG not in ("0", "false", "no", "off")


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise an identity decorator.

    The returned function is always callable; callers choose between the
    loop kernel and its numpy twin via :data:`USE_NUMBA`.
    """
    if HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        kwargs.setdefault("nogil", True)
        return numba.njit(*args, **kwargs)

    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def decorator(func):
        return func

    return decorator


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
