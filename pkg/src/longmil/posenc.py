"""Positional information for 2-d patch grids.

Three mechanisms: an absolute learned table with edge clamping, a rotary
encoding applied axially (x rotates one half of the head dimension, y the
other), and an additive bias proportional to negative Euclidean distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

__all__ = [
    "PosMode",
    "check_positions",
    "abs2d_lookup",
    "abs2d_scatter_grad",
    "rope2d_apply",
    "alibi2d_bias",
    "alibi2d_matrix",
    "alibi_slope",
]


@dataclass(frozen=True)
class PosMode:
    """Tagged positional-encoding choice serialized inside run configs."""

    kind: str = "none"  # none | abs2d | rope2d | alibi2d
    max_x: int = 0
    max_y: int = 0
    theta_base: float = 10000.0
    rho: float = 1.0

    def __post_init__(self):
        if self.kind not in ("none", "abs2d", "rope2d", "alibi2d"):
            raise ConfigError(f"unknown pos_mode kind {self.kind!r}")
        if self.kind == "rope2d" and self.theta_base <= 1.0:
            raise ConfigError(f"theta_base must exceed 1, got {self.theta_base}")
        if self.kind == "alibi2d" and self.rho <= 0.0:
            raise ConfigError(f"rho must be positive, got {self.rho}")
        if self.kind == "abs2d" and (self.max_x < 0 or self.max_y < 0):
            raise ConfigError("abs2d table extents must be non-negative")

    @classmethod
    def none(cls) -> "PosMode":
        return cls("none")

    @classmethod
    def abs2d(cls, max_x: int, max_y: int) -> "PosMode":
        return cls("abs2d", max_x=max_x, max_y=max_y)

    @classmethod
    def rope2d(cls, theta_base: float = 10000.0) -> "PosMode":
        return cls("rope2d", theta_base=theta_base)

    @classmethod
    def alibi2d(cls, rho: float = 1.0) -> "PosMode":
        return cls("alibi2d", rho=rho)

    def to_json(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "abs2d":
            out.update(max_x=self.max_x, max_y=self.max_y)
        elif self.kind == "rope2d":
            out["theta_base"] = self.theta_base
        elif self.kind == "alibi2d":
            out["rho"] = self.rho
        return out

    @classmethod
    def from_json(cls, obj) -> "PosMode":
        if isinstance(obj, str):
            return cls(obj)
        fields = {k: obj[k] for k in ("max_x", "max_y", "theta_base", "rho") if k in obj}
        return cls(obj.get("kind", "none"), **fields)


def check_positions(positions: np.ndarray) -> np.ndarray:
    """Validate an (n, 2) integer grid-position array: non-negative, unique."""
    pos = np.ascontiguousarray(positions, dtype=np.int32)
    if pos.ndim != 2 or pos.shape[1] != 2:
        raise ShapeError(f"positions must have shape (n, 2), got {pos.shape}")
    if pos.shape[0] == 0:
        raise ShapeError("positions must contain at least one token")
    if (pos < 0).any():
        raise ShapeError("grid positions must be non-negative")
    if len(np.unique(pos, axis=0)) != pos.shape[0]:
        raise ShapeError("grid positions must be unique within a bag")
    return pos


def abs2d_lookup(table: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Rows of a (max_x+1, max_y+1, d) table for each position.

    Out-of-range coordinates clamp to the table edge, so test-time
    positions beyond the trained extent resolve to the border vectors.
    """
    if table.ndim != 3:
        raise ShapeError(f"abs2d table must be 3-d, got shape {table.shape}")
    pos = np.asarray(positions)
    x = np.minimum(pos[:, 0], table.shape[0] - 1)
    y = np.minimum(pos[:, 1], table.shape[1] - 1)
    return table[x, y]


def abs2d_scatter_grad(table_shape, positions: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient of abs2d_lookup: accumulate upstream rows into the clamped cells."""
    grad = np.zeros(table_shape)
    pos = np.asarray(positions)
    x = np.minimum(pos[:, 0], table_shape[0] - 1)
    y = np.minimum(pos[:, 1], table_shape[1] - 1)
    np.add.at(grad, (x, y), upstream)
    return grad


def _rope_half(v: np.ndarray, coord: np.ndarray, theta: np.ndarray, inverse: bool) -> np.ndarray:
    # v: (n, 2*k) pairs; coord: (n,); theta: (k,) frequencies
    n = v.shape[0]
    pairs = v.reshape(n, -1, 2)
    angle = coord[:, None].astype(np.float64) * theta[None, :]
    if inverse:
        angle = -angle
    cos, sin = np.cos(angle), np.sin(angle)
    a, b = pairs[:, :, 0], pairs[:, :, 1]
    out = np.empty_like(pairs)
    out[:, :, 0] = a * cos - b * sin
    out[:, :, 1] = a * sin + b * cos
    return out.reshape(n, -1)


def rope2d_apply(
    v: np.ndarray,
    positions: np.ndarray,
    theta_base: float = 10000.0,
    inverse: bool = False,
) -> np.ndarray:
    """Axial 2-d rotary encoding.

    The first d/2 components rotate by the x coordinate, the second d/2 by
    y; pair k inside each half uses frequency theta_base**(-4k/d).  The
    rotation is an isometry and query-key products depend on the 2-d
    positional offset only.  inverse=True applies the transposed rotation
    (used by backward passes).
    """
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    if single:
        v = v[None, :]
    n, d = v.shape
    if d % 4 != 0:
        raise ConfigError(f"rope2d needs the head dimension divisible by 4, got {d}")
    pos = np.asarray(positions)
    if pos.ndim == 1:
        pos = pos[None, :]
    if pos.shape[0] != n:
        raise ShapeError(f"positions rows {pos.shape[0]} != vectors rows {n}")
    k = d // 4
    theta = float(theta_base) ** (-4.0 * np.arange(k) / d)
    out = np.empty_like(v)
    half = d // 2
    out[:, :half] = _rope_half(v[:, :half], pos[:, 0], theta, inverse)
    out[:, half:] = _rope_half(v[:, half:], pos[:, 1], theta, inverse)
    return out[0] if single else out


def alibi_slope(rho: float, head: int = 0, n_heads: int = 1) -> float:
    """Distance-penalty slope: rho * 2**-h, so head 0 keeps rho itself."""
    if not 0 <= head < max(n_heads, 1):
        raise ConfigError(f"head {head} out of range for {n_heads} heads")
    return float(rho) * 2.0 ** (-head)


def alibi2d_bias(a, b, rho: float) -> float:
    """Additive attention bias -rho * Euclidean distance between two cells."""
    ax, ay = a
    bx, by = b
    return -float(rho) * float(np.hypot(float(ax) - float(bx), float(ay) - float(by)))


def alibi2d_matrix(positions: np.ndarray, rho: float) -> np.ndarray:
    """Full n-by-n bias matrix; symmetric with a zero diagonal."""
    pos = np.asarray(positions, dtype=np.float64)
    delta = pos[:, None, :] - pos[None, :, :]
    return -float(rho) * np.sqrt((delta ** 2).sum(axis=2))
