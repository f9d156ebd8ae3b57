"""Backend selection for the pairwise interaction kernels.

Two implementations of the hot loops exist: a numba-compiled one and a plain
numpy one.  The active backend is chosen once at import time from the
MFLAB_BACKEND environment variable:

  MFLAB_BACKEND=numba   force the compiled path, raise if numba is missing
  MFLAB_BACKEND=numpy   force the plain-numpy path
  (unset)               use numba when importable, numpy otherwise

Both paths compute the same sums; they differ only in accumulation order, so
results agree to rounding (the tests pin this at 1e-10 relative).
"""

import os

_HAVE_NUMBA = False
try:
    import numba  # noqa: F401

    _HAVE_NUMBA = True
except ImportError:
    pass

_VALID = ("numba", "numpy")


def _resolve(name):
    if name is None or name == "":
        return "numba" if _HAVE_NUMBA else "numpy"
    name = name.strip().lower()
    if name not in _VALID:
        raise ValueError(
            "MFLAB_BACKEND must be one of %r, got %r" % (_VALID, name)
        )
    if name == "numba" and not _HAVE_NUMBA:
        raise RuntimeError(
            "MFLAB_BACKEND=numba but numba is not importable in this environment"
        )
    return name


_ACTIVE = _resolve(os.environ.get("MFLAB_BACKEND"))


def active_backend():
    """Name of the backend in use, 'numba' or 'numpy'."""
    return _ACTIVE


def have_numba():
    return _HAVE_NUMBA


def set_backend(name):
    """Override the backend at runtime (mainly for tests and benchmarks).

    Returns the previous backend name so callers can restore it.
    """
    global _ACTIVE
    prev = _ACTIVE
    _ACTIVE = _resolve(name)
    return prev
