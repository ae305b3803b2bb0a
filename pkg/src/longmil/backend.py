"""Kernel backend selection.

The compiled extension (longmil._kernels) is preferred when it imported
cleanly; the pure-python tile loops are the fallback and the semantic
reference.  LONGMIL_BACKEND overrides the choice: auto (default),
compiled, or python.  Resolution happens once, at first use.
"""

from __future__ import annotations

import os
import warnings

from . import _kernels_py
from .errors import ConfigError

_CHOICES = ("auto", "compiled", "python")

_compiled = None
_compiled_error: str | None = None
try:
    from . import _kernels as _compiled  # type: ignore[no-redef]
except ImportError as exc:  # extension not built on this install
    _compiled_error = str(exc)

_active: str | None = None


def _resolve() -> str:
    requested = os.environ.get("LONGMIL_BACKEND", "auto").strip().lower()
    if requested not in _CHOICES:
        raise ConfigError(
            f"LONGMIL_BACKEND must be one of {', '.join(_CHOICES)}, got {requested!r}"
        )
    if requested == "compiled" and _compiled is None:
        raise ConfigError(f"compiled backend requested but unavailable: {_compiled_error}")
    if requested == "auto":
        if _compiled is None:
            warnings.warn(
                f"compiled kernels unavailable ({_compiled_error}); using python backend",
                RuntimeWarning,
                stacklevel=3,
            )
            return "python"
        return "compiled"
    return requested


def active_backend() -> str:
    """Name of the backend in use: 'compiled' or 'python'."""
    global _active
    if _active is None:
        _active = _resolve()
    return _active


def kernels(backend: str | None = None):
    """Module providing forward_tiles/backward_tiles for the given backend."""
    name = backend if backend is not None else active_backend()
    if name == "python":
        return _kernels_py
    if name == "compiled":
        if _compiled is None:
            raise ConfigError(f"compiled backend unavailable: {_compiled_error}")
        return _compiled
    raise ConfigError(f"unknown backend {name!r}")
