"""Attention: dense reference path and the chunked banded kernel.

full_attention materializes the score matrix and is the diagnostic /
small-n path.  banded_attention never forms an n x n array; it permutes
tokens into plan order, streams kept tiles through an online softmax,
and keeps only O(n d + C^2) live state.  Both paths use -inf as the only
mask sentinel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import workspace
from .backend import kernels
from .chunks import ChunkPlan, plan_chunks
from .errors import ConfigError, ShapeError, StateError
from .linalg import softmax_rows
from .posenc import PosMode

__all__ = [
    "AttentionSpec",
    "full_attention",
    "full_attention_weights",
    "full_attention_backward",
    "banded_attention",
    "banded_attention_backward",
    "release",
    "BandedContext",
]


@dataclass(frozen=True)
class AttentionSpec:
    """Shared attention hyperparameters: band = inf means full attention."""

    d_model: int
    n_heads: int = 1
    band: float = 10.0
    chunk_size: int = 128
    ordering: str = "row_major"
    pos: PosMode = field(default_factory=PosMode.rope2d)

    def __post_init__(self):
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} must be a positive multiple of n_heads {self.n_heads}"
            )
        if self.chunk_size < 1:
            raise ConfigError(f"chunk_size must be >= 1, got {self.chunk_size}")
        if self.band < 0:
            raise ConfigError(f"band must be >= 0, got {self.band}")
        if self.ordering not in ("row_major", "morton"):
            raise ConfigError(f"ordering must be row_major or morton, got {self.ordering!r}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def _check_qkv(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> None:
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("q, k, v must be 2-d")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"q and k feature dims differ: {q.shape[1]} vs {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"k and v row counts differ: {k.shape[0]} vs {v.shape[0]}")


def _scores(q, k, bias, mask, scale):
    s = (q @ k.T) * scale
    if bias is not None:
        if bias.shape != s.shape:
            raise ShapeError(f"bias shape {bias.shape} does not match scores {s.shape}")
        s = s + bias
    if mask is not None:
        if mask.shape != s.shape:
            raise ShapeError(f"mask shape {mask.shape} does not match scores {s.shape}")
        s = np.where(mask, s, -np.inf)
    return s


def full_attention(q, k, v, mask=None, bias=None, scale=None):
    """softmax(scale * q k^T + bias) @ v with an optional boolean allow-mask."""
    _check_qkv(q, k, v)
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[1])
    return softmax_rows(_scores(q, k, bias, mask, scale)) @ v


def full_attention_weights(q, k, v, mask=None, bias=None, scale=None):
    """Same as full_attention but also returns the attention matrix."""
    _check_qkv(q, k, v)
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[1])
    a = softmax_rows(_scores(q, k, bias, mask, scale))
    return a @ v, a


def full_attention_backward(q, k, v, dout, mask=None, bias=None, scale=None):
    """Gradients (dq, dk, dv) of full_attention for an upstream dout."""
    _check_qkv(q, k, v)
    if dout.shape != (q.shape[0], v.shape[1]):
        raise ShapeError(f"dout shape {dout.shape} does not match output")
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[1])
    p = softmax_rows(_scores(q, k, bias, mask, scale))
    dv = p.T @ dout
    dp = dout @ v.T
    ds = p * (dp - (dp * p).sum(axis=1, keepdims=True))
    dq = scale * (ds @ k)
    dk = scale * (ds.T @ q)
    return dq, dk, dv


@dataclass
class BandedContext:
    """Forward-pass residue needed by banded_attention_backward.

    Arrays live in plan order; inverse permutation restores bag order.
    """

    plan: ChunkPlan
    qs: np.ndarray
    ks: np.ndarray
    vs: np.ndarray
    pos_s: np.ndarray
    out_s: np.ndarray
    m: np.ndarray
    l: np.ndarray
    scale: float
    rho: float
    backend: str | None


def _take_like(a: np.ndarray, order: np.ndarray) -> np.ndarray:
    buf = workspace.take((len(order), a.shape[1]), dtype=a.dtype)
    np.take(a, order, axis=0, out=buf)
    return buf


def banded_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    positions: np.ndarray,
    band: float,
    chunk_size: int = 128,
    ordering: str = "row_major",
    rho: float = 0.0,
    scale: float | None = None,
    plan: ChunkPlan | None = None,
    backend: str | None = None,
):
    """Banded attention via the chunked online-softmax kernel.

    Returns (out, ctx).  rho > 0 adds the -rho * distance bias inside kept
    tiles; rho = 0 means no bias.  A precomputed plan may be passed when
    the same geometry is reused across layers.
    """
    _check_qkv(q, k, v)
    n, d = q.shape
    if k.shape[0] != n:
        raise ShapeError("banded attention is self-attention: q and k must have equal rows")
    if band < 0:
        raise ConfigError(f"band must be >= 0, got {band}")
    if rho < 0:
        raise ConfigError(f"rho must be >= 0, got {rho}")
    if scale is None:
        scale = 1.0 / np.sqrt(d)
    if plan is None:
        plan = plan_chunks(positions, band, chunk_size, ordering)
    elif plan.band != float(band):
        raise ConfigError(f"plan was built for band {plan.band}, not {band}")
    ker = kernels(backend)

    order = plan.order
    qs = _take_like(q, order)
    ks = _take_like(k, order)
    vs = _take_like(v, order)
    pos_s = np.ascontiguousarray(np.asarray(positions, dtype=np.int32)[order])
    out_s = workspace.take((n, v.shape[1]), dtype=q.dtype)
    out_s[:] = 0.0
    m = workspace.take((n,), dtype=q.dtype)
    m[:] = -np.inf
    l = workspace.take((n,), dtype=q.dtype)
    l[:] = 0.0
    c = plan.chunk_size
    s_buf = workspace.take((c, c), dtype=q.dtype)
    t_buf = workspace.take((c, c), dtype=q.dtype)
    try:
        ker.forward_tiles(
            qs, ks, vs, pos_s, plan.starts, plan.pair_ptr, plan.pair_kc,
            plan.band, float(scale), float(rho), out_s, m, l, s_buf, t_buf,
        )
    finally:
        workspace.give(t_buf)
        workspace.give(s_buf)
    out_s /= l[:, None]

    out = np.empty_like(out_s)
    out[order] = out_s
    ctx = BandedContext(
        plan=plan, qs=qs, ks=ks, vs=vs, pos_s=pos_s, out_s=out_s,
        m=m, l=l, scale=float(scale), rho=float(rho), backend=backend,
    )
    return out, ctx


def banded_attention_backward(ctx: BandedContext, dout: np.ndarray):
    """Gradients (dq, dk, dv) in original bag order, tile recompute style."""
    plan = ctx.plan
    n = len(plan.order)
    if ctx.qs is None:
        raise StateError("banded context already consumed by a previous backward")
    if dout.shape != ctx.out_s.shape:
        raise ShapeError(f"dout shape {dout.shape} does not match output {ctx.out_s.shape}")
    ker = kernels(ctx.backend)

    dout_s = _take_like(np.ascontiguousarray(dout), plan.order)
    delta = workspace.take((n,), dtype=dout_s.dtype)
    np.einsum("ij,ij->i", dout_s, ctx.out_s, out=delta)
    dq_s = workspace.take(ctx.qs.shape, dtype=ctx.qs.dtype)
    dk_s = workspace.take(ctx.ks.shape, dtype=ctx.ks.dtype)
    dv_s = workspace.take(ctx.vs.shape, dtype=ctx.vs.dtype)
    dq_s[:] = 0.0
    dk_s[:] = 0.0
    dv_s[:] = 0.0
    c = plan.chunk_size
    s_buf = workspace.take((c, c), dtype=ctx.qs.dtype)
    t_buf = workspace.take((c, c), dtype=ctx.qs.dtype)
    try:
        ker.backward_tiles(
            ctx.qs, ctx.ks, ctx.vs, ctx.pos_s, plan.starts, plan.pair_ptr,
            plan.pair_kc, plan.band, ctx.scale, ctx.rho,
            dout_s, ctx.m, ctx.l, delta, dq_s, dk_s, dv_s, s_buf, t_buf,
        )
    finally:
        workspace.give(t_buf)
        workspace.give(s_buf)

    dq = np.empty_like(dq_s)
    dk = np.empty_like(dk_s)
    dv = np.empty_like(dv_s)
    dq[plan.order] = dq_s
    dk[plan.order] = dk_s
    dv[plan.order] = dv_s
    for buf in (dv_s, dk_s, dq_s, delta, dout_s):
        workspace.give(buf)
    release(ctx)
    return dq, dk, dv


def release(ctx: BandedContext) -> None:
    """Return the context's workspace buffers to the accountant."""
    if ctx.qs is None:
        return
    for buf in (ctx.l, ctx.m, ctx.out_s, ctx.vs, ctx.ks, ctx.qs):
        workspace.give(buf)
    ctx.qs = ctx.ks = ctx.vs = ctx.out_s = ctx.m = ctx.l = None
