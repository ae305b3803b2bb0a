"""Buffer pool with exact byte accounting.

Kernels obtain their large transient buffers through take()/give() so a
benchmark or test can install a WorkspaceAccountant and read off the exact
peak workspace in bytes.  Process RSS is platform-noisy; pool bytes are
portable.  Without an installed accountant take() is a plain allocation.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import LongMILError

__all__ = ["WorkspaceAccountant", "measuring", "take", "give", "current"]


class WorkspaceLimitError(LongMILError):
    """A kernel requested a buffer the accountant forbids."""


class WorkspaceAccountant:
    """Running and peak counters over pool-allocated bytes.

    forbid_single_at_least, when set, makes any single request of at least
    that many bytes an error; the banded kernels use it to assert they
    never ask for an n-by-n buffer.  Owned by one measuring thread.
    """

    def __init__(self, forbid_single_at_least: int | None = None):
        self.running = 0
        self.peak = 0
        self.forbid_single_at_least = forbid_single_at_least

    def reset(self) -> None:
        self.running = 0
        self.peak = 0

    def on_take(self, nbytes: int) -> None:
        limit = self.forbid_single_at_least
        if limit is not None and nbytes >= limit:
            raise WorkspaceLimitError(
                f"single allocation of {nbytes} bytes exceeds the "
                f"accountant limit of {limit} bytes"
            )
        self.running += nbytes
        if self.running > self.peak:
            self.peak = self.running

    def on_give(self, nbytes: int) -> None:
        self.running -= nbytes


_current: WorkspaceAccountant | None = None


def current() -> WorkspaceAccountant | None:
    return _current


@contextmanager
def measuring(accountant: WorkspaceAccountant):
    """Install an accountant for the duration of the block."""
    global _current
    previous = _current
    _current = accountant
    try:
        yield accountant
    finally:
        _current = previous


def take(shape, dtype=np.float64) -> np.ndarray:
    buf = np.empty(shape, dtype=dtype)
    if _current is not None:
        _current.on_take(buf.nbytes)
    return buf


def give(buf: np.ndarray) -> None:
    if _current is not None:
        _current.on_give(buf.nbytes)
