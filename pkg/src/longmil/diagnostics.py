"""Analysis instruments: attention rank, sparsity ratio, band bounds.

These never feed back into training; they measure attention matrices.
Pre-softmax rank carries a hard bound (min(n, d)); post-softmax rank is
reported but never asserted.  The 1-d band construction carries a
provable lower bound of n - b, which band_rank_check verifies along
with the upper-triangular witness sub-matrix.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .chunks import build_mask_2d
from .data import Bag
from .errors import ConfigError, DiagnosticError, InputError
from .linalg import Rng, numerical_rank, softmax_rows
from .params import Module

__all__ = [
    "AttnStats",
    "sparsity_stats",
    "RankBoundReport",
    "rank_bound_report",
    "BandRankReport",
    "band_rank_check",
    "band_rank_2d_measure",
    "collect_attn_stats",
    "write_stats_csv",
]


@dataclass(frozen=True)
class AttnStats:
    """Rank and sparsity of one attention matrix."""

    layer: str
    n: int
    rank: int
    rel_tol: float
    sparsity: float
    tau: float

    def csv_row(self) -> list:
        return [self.layer, self.n, self.rank, self.rel_tol, self.sparsity, self.tau]


def sparsity_stats(
    a: np.ndarray,
    tau_scale: float = 1e-4,
    rel_tol: float = 1e-8,
    layer: str = "",
) -> AttnStats:
    """Sparsity ratio r = 1 - |{(i,j): A_ij > tau}| / n^2, tau = tau_scale/n.

    Requires a row-stochastic square matrix (rows sum to 1 within 1e-6).
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InputError(f"attention matrix must be square, got {a.shape}")
    if tau_scale <= 0:
        raise ConfigError(f"tau_scale must be > 0, got {tau_scale}")
    sums = a.sum(axis=1)
    worst = int(np.argmax(np.abs(sums - 1.0)))
    if abs(sums[worst] - 1.0) > 1e-6 or a.min() < 0:
        raise InputError(
            f"rows must be stochastic; row {worst} sums to {sums[worst]!r}"
        )
    n = a.shape[0]
    tau = tau_scale / n
    kept = int((a > tau).sum())
    r = 1.0 - kept / (n * n)
    return AttnStats(
        layer=layer, n=n, rank=numerical_rank(a, rel_tol),
        rel_tol=rel_tol, sparsity=r, tau=tau,
    )


@dataclass(frozen=True)
class RankBoundReport:
    n: int
    d: int
    bound: int
    rank_pre: int
    rank_post: int
    rel_tol: float


def rank_bound_report(q: np.ndarray, k: np.ndarray, rel_tol: float = 1e-8) -> RankBoundReport:
    """rank(Q K^T) against the min(n, d) bound; post-softmax rank is
    measurement only, the softmax can move it either way."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.shape != k.shape or q.ndim != 2:
        raise InputError(f"Q and K must share an (n, d) shape, got {q.shape} vs {k.shape}")
    n, d = q.shape
    scores = q @ k.T
    rank_pre = numerical_rank(scores, rel_tol)
    bound = min(n, d)
    if rank_pre > bound:
        raise DiagnosticError(
            f"rank(QK^T) = {rank_pre} exceeds min(n, d) = {bound} at rel_tol {rel_tol}"
        )
    rank_post = numerical_rank(softmax_rows(scores / np.sqrt(d)), rel_tol)
    return RankBoundReport(n, d, bound, rank_pre, rank_post, rel_tol)


@dataclass(frozen=True)
class BandRankReport:
    n: int
    b: int
    bound: int
    rank: int
    rel_tol: float
    attempts: int


def band_rank_check(n: int, b: int, rng: Rng, rel_tol: float = 1e-8) -> BandRankReport:
    """1-d band-masked row-stochastic matrix: verify rank >= n - b.

    Also extracts the lower-left sub-matrix A[b:, :n-b] and checks it is
    upper triangular with a nonzero diagonal, the structural witness for
    the bound.  Degenerate random draws (measure zero) get up to 3
    retries before the failure is reported.
    """
    if not 0 < b < n:
        raise ConfigError(f"need 0 < b < n, got n={n}, b={b}")
    idx = np.arange(n)
    mask = np.abs(idx[:, None] - idx[None, :]) <= b
    last_error = None
    for attempt in range(1, 4):
        scores = rng.gaussian(n * n).reshape(n, n)
        a = softmax_rows(np.where(mask, scores, -np.inf))
        sub = a[b:, : n - b]
        below = np.tril(sub, -1)
        diag = np.diagonal(sub)
        if below.max(initial=0.0) != 0.0:
            last_error = f"sub-matrix not upper triangular, max below-diag {below.max()}"
            continue
        if diag.min() <= 0.0:
            last_error = f"sub-matrix diagonal touches zero, min {diag.min()}"
            continue
        rank = numerical_rank(a, rel_tol)
        if rank >= n - b:
            return BandRankReport(n, b, n - b, rank, rel_tol, attempt)
        last_error = f"numerical rank {rank} under bound {n - b}"
    raise DiagnosticError(f"band rank check failed for n={n}, b={b}: {last_error}")


@dataclass(frozen=True)
class BandRank2dReport:
    n: int
    b: float
    d: int
    rank: int
    rel_tol: float
    at_or_under_d: bool


def band_rank_2d_measure(
    positions: np.ndarray, b: float, d: int, rng: Rng, rel_tol: float = 1e-8
) -> BandRank2dReport:
    """Measured (not asserted) rank of a 2-d band-masked stochastic matrix.

    The 1-d lower bound has no proven 2-d analogue; this only flags when
    the measured rank drops to the d ceiling that full attention has.
    """
    mask = build_mask_2d(positions, b)
    n = mask.shape[0]
    scores = rng.gaussian(n * n).reshape(n, n)
    a = softmax_rows(np.where(mask, scores, -np.inf))
    rank = numerical_rank(a, rel_tol)
    return BandRank2dReport(n, float(b), d, rank, rel_tol, rank <= d)


def collect_attn_stats(
    head: Module,
    bag: Bag,
    tau_scale: float = 1e-4,
    rel_tol: float = 1e-8,
) -> list[AttnStats]:
    """Run one bag through a head and measure every attention layer.

    Works on any head whose attention layers expose dense_weights();
    heads without attention layers yield an empty list.
    """
    head.forward(bag.z64(), bag.positions)
    stats = []
    for path, module in head.named_modules():
        weights = getattr(module, "dense_weights", None)
        if weights is None:
            continue
        for h, a in enumerate(weights()):
            label = path if len(module.slices) == 1 else f"{path}.h{h}"
            stats.append(sparsity_stats(a, tau_scale, rel_tol, layer=label))
    return stats


def write_stats_csv(stats: list[AttnStats], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["layer", "n", "rank", "rel_tol", "sparsity", "tau"])
        for s in stats:
            writer.writerow(s.csv_row())
