"""Minimal dense linear algebra used by every other module.

Matrices are plain C-contiguous float64 numpy arrays; matmul and the QR
factorization are delegated to BLAS/LAPACK, which keeps results
deterministic for a fixed build (no split-K reductions).  The 32-bit
variants of the attention kernels exist only for benchmark mode; all
correctness paths run in float64.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import ConfigError, DegenerateRowError, ShapeError

__all__ = [
    "Rng",
    "matmul",
    "softmax_rows",
    "numerical_rank",
    "rand_mat",
    "as_matrix",
]

_TWO_PI = 2.0 * np.pi


class Rng:
    """Seeded random stream backed by the Philox counter-based generator.

    Philox produces the same stream for the same 64-bit seed on every
    platform.  Gaussian variates are derived from the uniform stream with
    the Box-Muller transform in a fixed order (cosine first, interleaved),
    so they are reproducible independent of library internals.
    """

    def __init__(self, seed: int):
        if seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {seed}")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def spawn(self, offset: int) -> "Rng":
        """Derived stream for parallel work items (seed = base XOR offset)."""
        return Rng(self.seed ^ int(offset))

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1)."""
        return self._gen.random(int(n))

    def gaussian(self, n: int) -> np.ndarray:
        """n standard-normal doubles via Box-Muller on the uniform stream."""
        n = int(n)
        m = (n + 1) // 2
        u1 = self._gen.random(m)
        u2 = self._gen.random(m)
        # 1 - u1 lies in (0, 1]; log of it is finite.
        r = np.sqrt(-2.0 * np.log1p(-u1))
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(_TWO_PI * u2)
        z[1::2] = r * np.sin(_TWO_PI * u2)
        return z[:n]

    def integers(self, low: int, high: int, size=None):
        """Integers in [low, high)."""
        return self._gen.integers(low, high, size=size)

    def shuffle(self, seq) -> None:
        self._gen.shuffle(seq)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(int(n))


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-d, got shape {arr.shape}")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Standard product a @ b with an explicit shape check."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul shape mismatch: ({a.shape[0]}x{a.shape[1]}) @ "
            f"({b.shape[0]}x{b.shape[1]})"
        )
    return a @ b


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction.

    -inf is the only accepted mask sentinel; masked entries come out as
    exact zeros.  A row with no finite entry is degenerate.
    """
    m = as_matrix(m)
    if m.size == 0:
        raise ShapeError(f"softmax_rows on empty matrix of shape {m.shape}")
    if np.isnan(m).any() or np.isposinf(m).any():
        raise ShapeError("softmax_rows input must be finite or -inf")
    row_max = np.max(m, axis=1)
    dead = np.isneginf(row_max)
    if dead.any():
        raise DegenerateRowError(
            f"rows {np.flatnonzero(dead).tolist()} have no finite entry"
        )
    shifted = m - row_max[:, None]
    # exp(-inf - finite) underflows to an exact 0 for masked entries
    out = np.exp(shifted)
    out /= out.sum(axis=1)[:, None]
    return out


def numerical_rank(m: np.ndarray, rel_tol: float = 1e-8) -> int:
    """Threshold rank from column-pivoted QR.

    Counts diagonal magnitudes of R above rel_tol times the largest one.
    Cheaper than an SVD and sufficient for a threshold rank at the matrix
    sizes this engine targets.
    """
    m = as_matrix(m)
    if m.size == 0:
        raise ShapeError(f"numerical_rank on empty matrix of shape {m.shape}")
    if not 0.0 < rel_tol < 1.0:
        raise ConfigError(f"rel_tol must lie in (0, 1), got {rel_tol}")
    r = scipy.linalg.qr(m, mode="r", pivoting=True)[0]
    diag = np.abs(np.diagonal(r))
    largest = diag.max(initial=0.0)
    if largest == 0.0:
        return 0
    return int(np.count_nonzero(diag > rel_tol * largest))


def rand_mat(rng: Rng, rows: int, cols: int, dist: str = "gaussian") -> np.ndarray:
    """Seeded random matrix, gaussian or uniform entries."""
    rows, cols = int(rows), int(cols)
    if rows < 1 or cols < 1:
        raise ShapeError(f"rand_mat needs rows, cols >= 1, got {rows}x{cols}")
    if dist == "gaussian":
        flat = rng.gaussian(rows * cols)
    elif dist == "uniform":
        flat = rng.uniform(rows * cols)
    else:
        raise ConfigError(f"unknown distribution {dist!r}")
    return flat.reshape(rows, cols)
