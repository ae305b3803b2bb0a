"""Time/memory scaling benchmark over strip-geometry bags.

Tokens fill a fixed-width strip left to right, so token count n is
proportional to tissue area and "linear in n at fixed band" is
geometrically meaningful.  Timings are medians over repetitions with a
warmup excluded; memory is exact pool bytes from the workspace
accountant, not RSS.  Absolute speeds are machine-dependent, so
consumers should compare ratios between sizes, not wall times.

Benchmarks may run in float32; the training engine itself stays in
float64.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import workspace
from .attention import banded_attention, release
from .errors import ConfigError
from .linalg import Rng

__all__ = [
    "BenchRecord",
    "strip_positions",
    "scaling_bench",
    "write_bench_csv",
    "DEFAULT_NS",
    "STRIP_WIDTH",
]

STRIP_WIDTH = 64
DEFAULT_NS = (1024, 2048, 4096, 8192)
BENCH_KERNELS = ("full", "banded")


@dataclass(frozen=True)
class BenchRecord:
    kernel: str
    n: int
    d: int
    b: float
    chunk: int
    time_ns: int
    peak_bytes: int
    backend: str
    threads: int

    def __post_init__(self):
        if self.time_ns <= 0:
            raise ConfigError(f"measured time must be > 0, got {self.time_ns}")
        if self.peak_bytes < self.n * self.d * 8:
            raise ConfigError(
                f"peak workspace {self.peak_bytes} below the n*d*8 floor "
                f"({self.n * self.d * 8}); the kernel bypassed the pool"
            )

    def csv_row(self) -> list:
        return [
            self.kernel, self.n, self.d, self.b, self.chunk,
            self.time_ns, self.peak_bytes, self.backend, self.threads,
        ]


def strip_positions(n: int, width: int = STRIP_WIDTH) -> np.ndarray:
    """Row-filled strip: token i sits at (i % width, i // width)."""
    idx = np.arange(n, dtype=np.int32)
    return np.stack([idx % width, idx // width], axis=1)


def _run_full(q, k, v, scale):
    # Dense reference measured honestly: the n x n score matrix goes
    # through the pool so the accountant sees the quadratic term.
    n = q.shape[0]
    s = workspace.take((n, n), dtype=q.dtype)
    np.matmul(q, k.T, out=s)
    s *= scale
    s -= s.max(axis=1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=1, keepdims=True)
    out = workspace.take((n, v.shape[1]), dtype=q.dtype)
    np.matmul(s, v, out=out)
    workspace.give(out)
    workspace.give(s)


def _run_banded(q, k, v, positions, b, chunk, backend):
    _, ctx = banded_attention(
        q, k, v, positions, b, chunk_size=chunk, backend=backend
    )
    release(ctx)


def resolve_threads(threads: int | None = None) -> int:
    if threads is None:
        threads = int(os.environ.get("LONGMIL_THREADS", "1"))
    if threads < 1:
        raise ConfigError(f"thread count must be >= 1, got {threads}")
    return threads


def scaling_bench(
    ns=DEFAULT_NS,
    d: int = 384,
    b: float = 10.0,
    chunk: int = 128,
    kernels=BENCH_KERNELS,
    reps: int = 5,
    dtype=np.float32,
    seed: int = 0,
    backend: str | None = None,
    threads: int | None = None,
    progress=None,
) -> list[BenchRecord]:
    """One BenchRecord per (kernel, n), median time over reps.

    The banded runs install an accountant that rejects any single
    allocation of n x n bytes once n >= 4 * chunk, so a regression to a
    dense buffer fails loudly instead of showing up as a slow ratio.
    """
    if reps < 5:
        raise ConfigError(f"need >= 5 reps for a stable median, got {reps}")
    for kern in kernels:
        if kern not in BENCH_KERNELS:
            raise ConfigError(f"unknown kernel {kern!r}")
    threads = resolve_threads(threads)
    from .backend import active_backend

    backend_name = backend if backend is not None else active_backend()
    records = []
    with threadpool_limits(limits=threads):
        for n in sorted(ns):
            positions = strip_positions(n)
            rng = Rng(seed).spawn(n)
            q = rng.gaussian(n * d).reshape(n, d).astype(dtype)
            k = rng.gaussian(n * d).reshape(n, d).astype(dtype)
            v = rng.gaussian(n * d).reshape(n, d).astype(dtype)
            scale = 1.0 / np.sqrt(d)
            for kern in kernels:
                itemsize = np.dtype(dtype).itemsize
                forbid = n * n * itemsize if (kern == "banded" and n >= 4 * chunk) else None
                acc = workspace.WorkspaceAccountant(forbid_single_at_least=forbid)
                if kern == "full":
                    run = lambda: _run_full(q, k, v, scale)
                else:
                    run = lambda: _run_banded(q, k, v, positions, b, chunk, backend)
                times = []
                with workspace.measuring(acc):
                    run()
                    acc.reset()
                    for _ in range(reps):
                        t0 = time.perf_counter_ns()
                        run()
                        times.append(time.perf_counter_ns() - t0)
                rec = BenchRecord(
                    kernel=kern, n=n, d=d, b=float(b), chunk=chunk,
                    time_ns=int(np.median(times)), peak_bytes=acc.peak,
                    backend=backend_name, threads=threads,
                )
                records.append(rec)
                if progress is not None:
                    progress(rec)
    return records


def write_bench_csv(records: list[BenchRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["kernel", "n", "d", "b", "chunk", "time_ns", "peak_bytes", "backend", "threads"]
        )
        for rec in records:
            writer.writerow(rec.csv_row())
