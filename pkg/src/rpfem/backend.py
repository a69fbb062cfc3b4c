"""Runtime backend selection for the hot kernels.

RPFEM_BACKEND=auto|numba|numpy picks the kernel implementation (default
"auto": numba when importable, numpy otherwise).  RPFEM_THREADS caps worker
parallelism for scene-level evaluation and ablation sweeps.
"""
from __future__ import annotations

import os

from .errors import ConfigError

_BACKENDS = ("auto", "numba", "numpy")
_numba_probe: bool | None = None


def numba_available() -> bool:
    global _numba_probe
    if _numba_probe is None:
        try:
            import numba  # noqa: F401

            _numba_probe = True
        except Exception:
            _numba_probe = False
    return _numba_probe


def requested_backend() -> str:
    name = os.environ.get("RPFEM_BACKEND", "auto").strip().lower()
    if name not in _BACKENDS:
        raise ConfigError(
            f"RPFEM_BACKEND must be one of {_BACKENDS}, got {name!r}"
        )
    return name


def active_backend() -> str:
    """Resolve the backend actually used for kernel dispatch."""
    name = requested_backend()
    if name == "numba" and not numba_available():
        raise ConfigError("RPFEM_BACKEND=numba but numba is not importable")
    if name == "auto":
        return "numba" if numba_available() else "numpy"
    return name


def thread_count() -> int:
    raw = os.environ.get("RPFEM_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"RPFEM_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise ConfigError(f"RPFEM_THREADS must be >= 1, got {n}")
    return n
