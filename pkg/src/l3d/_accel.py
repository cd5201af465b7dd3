"""Backend selection for the hot kernels.

``L3D_BACKEND=numpy`` forces the pure-numpy kernels; ``numba`` (the default
when numba imports) uses the JIT-compiled ones.  The choice is read once at
import time.
"""
import os

try:
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


def requested_backend():
    value = os.environ.get("L3D_BACKEND", "").strip().lower()
    if value in ("", "auto"):
        return "numba" if HAVE_NUMBA else "numpy"
    if value not in ("numba", "numpy"):
        raise ValueError(f"L3D_BACKEND must be 'numba' or 'numpy', got {value!r}")
    if value == "numba" and not HAVE_NUMBA:
        raise ImportError("L3D_BACKEND=numba but numba is not installed")
    return value


BACKEND = requested_backend()


def set_threads(n):
    """Cap numba's worker pool; a no-op on the numpy backend."""
    if n is None or not HAVE_NUMBA:
        return
    import numba

    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
