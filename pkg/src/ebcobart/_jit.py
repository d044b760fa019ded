"""JIT selection.

Hot kernels are written once in numba-compatible numpy/Python.  Setting the
environment variable ``EBCOBART_DISABLE_JIT=1`` before import turns ``njit``
into a no-op so the same kernels run interpreted (slow, but bit-identical,
because both paths draw from the same ``numpy.random.Generator``).
"""

import os

DISABLE_JIT = os.environ.get("EBCOBART_DISABLE_JIT", "").strip().lower() in {"1", "true", "yes", "on"}

if DISABLE_JIT:
    HAS_NUMBA = False
else:
    try:
        import numba

        HAS_NUMBA = True
    except ImportError:  # pragma: no cover
        HAS_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit(cache=True, nogil=True)`` or identity, per ``DISABLE_JIT``."""
    if not HAS_NUMBA:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda func: func
    opts = {"cache": True, "nogil": True}
    opts.update(kwargs)
    if len(args) == 1 and callable(args[0]):
        return numba.njit(**opts)(args[0])
    return numba.njit(*args, **opts)


def backend():
    return "numba" if HAS_NUMBA else "python"
