"""Optional numba acceleration.

Set ``MEDUSA_DISABLE_JIT=1`` before import to force the pure-numpy kernels.
"""
import logging
import os

log = logging.getLogger(__name__)

_disabled = os.environ.get("MEDUSA_DISABLE_JIT", "").strip().lower() in ("1", "true", "yes", "on")

try:
    if _disabled:
        raise ImportError("disabled by MEDUSA_DISABLE_JIT")
    from numba import njit

    HAS_NUMBA = True
except ImportError as exc:  # pragma: no cover - depends on environment
    log.debug("numba unavailable, using numpy kernels: %s", exc)
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def wrapper(func):
            return func

        return wrapper


def backend():
    return "numba" if HAS_NUMBA else "numpy"
