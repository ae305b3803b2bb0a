"""Band-mask geometry and chunk planning.

A ChunkPlan fixes a token ordering, cuts it into fixed-size chunks, and
keeps only the (query-chunk, key-chunk) pairs whose spatial bounding boxes
come within the band radius.  Box min-distance lower-bounds every
token-pair distance, so a dropped pair provably contains no in-band
token pair; correctness never depends on the ordering, only the skip
rate does.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .posenc import check_positions

__all__ = [
    "build_mask_2d",
    "morton_key",
    "order_tokens",
    "ChunkPlan",
    "plan_chunks",
]


def build_mask_2d(positions: np.ndarray, band: float) -> np.ndarray:
    """Boolean allow-matrix: (i, j) allowed iff euclid(pos_i, pos_j) <= band.

    The diagonal is always allowed (distance zero).  Distances are compared
    squared in integer arithmetic, so the cut is exact.
    """
    pos = check_positions(positions)
    if np.isinf(band):
        n = pos.shape[0]
        return np.ones((n, n), dtype=bool)
    delta = pos[:, None, :].astype(np.int64) - pos[None, :, :].astype(np.int64)
    dist2 = (delta ** 2).sum(axis=2)
    return dist2 <= float(band) ** 2


def morton_key(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Interleave the bits of 16-bit x and y into a z-order key."""
    def spread(v: np.ndarray) -> np.ndarray:
        v = v.astype(np.uint64) & np.uint64(0xFFFF)
        v = (v | (v << np.uint64(8))) & np.uint64(0x00FF00FF)
        v = (v | (v << np.uint64(4))) & np.uint64(0x0F0F0F0F)
        v = (v | (v << np.uint64(2))) & np.uint64(0x33333333)
        v = (v | (v << np.uint64(1))) & np.uint64(0x55555555)
        return v

    return spread(np.asarray(x)) | (spread(np.asarray(y)) << np.uint64(1))


def order_tokens(positions: np.ndarray, ordering: str) -> np.ndarray:
    """Permutation putting tokens in row-major (y, x) or z-order."""
    pos = np.asarray(positions)
    if ordering == "row_major":
        return np.lexsort((pos[:, 0], pos[:, 1]))
    if ordering == "morton":
        return np.argsort(morton_key(pos[:, 0], pos[:, 1]), kind="stable")
    raise ConfigError(f"unknown token ordering {ordering!r}")


@dataclass
class ChunkPlan:
    """Deterministic tiling of one bag for the banded kernel.

    order       permutation of bag indices (the kernel works in this order)
    starts      chunk boundaries, len n_chunks + 1
    boxes       per-chunk (min_x, max_x, min_y, max_y)
    pair_ptr    CSR offsets into pair_kc, grouped by query chunk
    pair_kc     kept key-chunk indices, ascending within each query chunk
    """

    order: np.ndarray
    starts: np.ndarray
    boxes: np.ndarray
    pair_ptr: np.ndarray
    pair_kc: np.ndarray
    band: float
    chunk_size: int
    ordering: str

    @property
    def n_chunks(self) -> int:
        return len(self.starts) - 1

    @property
    def n_pairs(self) -> int:
        return len(self.pair_kc)

    def pairs(self) -> np.ndarray:
        """Kept (query-chunk, key-chunk) pairs as an (n_pairs, 2) array."""
        qc = np.repeat(np.arange(self.n_chunks), np.diff(self.pair_ptr))
        return np.stack([qc, self.pair_kc], axis=1)


def _box_min_dist2(boxes: np.ndarray) -> np.ndarray:
    # pairwise squared min distance between axis-aligned boxes
    lo_x, hi_x = boxes[:, 0].astype(np.int64), boxes[:, 1].astype(np.int64)
    lo_y, hi_y = boxes[:, 2].astype(np.int64), boxes[:, 3].astype(np.int64)
    gap_x = np.maximum(0, np.maximum(lo_x[:, None] - hi_x[None, :], lo_x[None, :] - hi_x[:, None]))
    gap_y = np.maximum(0, np.maximum(lo_y[:, None] - hi_y[None, :], lo_y[None, :] - hi_y[:, None]))
    return gap_x ** 2 + gap_y ** 2


def plan_chunks(
    positions: np.ndarray,
    band: float,
    chunk_size: int,
    ordering: str = "row_major",
) -> ChunkPlan:
    """Build the tiling for one bag.

    Keeps a chunk pair iff the min distance between the chunks' bounding
    boxes is <= band, which covers every in-band token pair.
    """
    pos = check_positions(positions)
    if chunk_size < 1:
        raise ConfigError(f"chunk_size must be >= 1, got {chunk_size}")
    n = pos.shape[0]
    order = order_tokens(pos, ordering)
    starts = np.arange(0, n + chunk_size, chunk_size, dtype=np.int64)
    starts[-1] = n
    if len(starts) >= 2 and starts[-1] == starts[-2]:
        starts = starts[:-1]
    nc = len(starts) - 1

    sorted_pos = pos[order]
    boxes = np.empty((nc, 4), dtype=np.int32)
    for c in range(nc):
        chunk = sorted_pos[starts[c]:starts[c + 1]]
        boxes[c] = (chunk[:, 0].min(), chunk[:, 0].max(), chunk[:, 1].min(), chunk[:, 1].max())

    if np.isinf(band):
        keep = np.ones((nc, nc), dtype=bool)
    else:
        keep = _box_min_dist2(boxes) <= float(band) ** 2
    counts = keep.sum(axis=1)
    pair_ptr = np.zeros(nc + 1, dtype=np.int64)
    np.cumsum(counts, out=pair_ptr[1:])
    pair_kc = np.nonzero(keep)[1].astype(np.int64)

    return ChunkPlan(
        order=order.astype(np.int64),
        starts=starts,
        boxes=boxes,
        pair_ptr=pair_ptr,
        pair_kc=pair_kc,
        band=float(band),
        chunk_size=int(chunk_size),
        ordering=ordering,
    )
