"""Numba switch.

Hot kernels are compiled with numba when it is importable and the
``RLKV_NUMBA`` environment variable is not set to ``0``.  Otherwise the
pure-numpy implementations in :mod:`rlkv.kernels` are used.
"""

import logging
import os

logger = logging.getLogger(__name__)

_flag = os.environ.get("RLKV_NUMBA", "1").strip().lower()
_requested = _flag not in ("0", "false", "no", "off")

try:
    if not _requested:
        raise ImportError("disabled by RLKV_NUMBA")
    import numba

    njit = numba.njit
    HAVE_NUMBA = True
except ImportError as exc:
    if _requested:
        logger.warning("numba unavailable (%s); using numpy kernels", exc)

    def njit(*args, **kwargs):
        """No-op stand-in for ``numba.njit``."""
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def wrap(func):
            return func

        return wrap

    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA
