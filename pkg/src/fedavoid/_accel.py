"""Numba availability and backend selection.

Set ``FEDAVOID_DISABLE_NUMBA=1`` in the environment to force the pure-numpy
kernels. :func:`set_backend` switches at runtime (tests and benchmarks use it).
"""
import os

try:
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in CI
    HAVE_NUMBA = False
    _njit = None

_DISABLED = os.environ.get("FEDAVOID_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

_state = {"backend": "numba" if (HAVE_NUMBA and not _DISABLED) else "numpy"}


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, else an identity decorator."""
    if HAVE_NUMBA:
        return _njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f


def backend() -> str:
    return _state["backend"]


def set_backend(name: str) -> str:
    """Select ``"numba"`` or ``"numpy"``; returns the previous backend."""
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    prev = _state["backend"]
    _state["backend"] = name
    return prev
