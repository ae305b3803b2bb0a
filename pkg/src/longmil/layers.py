"""Neural layers with explicit forward/backward passes.

Everything runs in float64 on (n, d) token matrices for a single bag.
Each layer caches what its backward needs on forward; backward returns
the input gradient and accumulates parameter gradients in place, so a
training step is forward -> backward -> optimizer -> zero_grad.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf, expit

from . import attention, posenc
from .attention import AttentionSpec
from .chunks import ChunkPlan, build_mask_2d
from .errors import ConfigError, ShapeError, StateError
from .linalg import Rng, softmax_rows
from .params import Module, Param

__all__ = [
    "Linear",
    "LayerNorm",
    "gelu",
    "gelu_grad",
    "FeedForward",
    "FullSelfAttention",
    "BandedSelfAttention",
    "TransformerBlock",
    "WindowPool2x2",
    "GatedAttentionPool",
]

SQRT2 = np.sqrt(2.0)
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact gaussian-error-function gelu."""
    return 0.5 * x * (1.0 + erf(x / SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / SQRT2)) + x * INV_SQRT_2PI * np.exp(-0.5 * x * x)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: Rng, bias: bool = True):
        self.w = Param(rng.gaussian(d_in * d_out).reshape(d_in, d_out) / np.sqrt(d_in))
        self.b = Param(np.zeros(d_out)) if bias else None
        self._x: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.w.value.shape[0]:
            raise ShapeError(f"linear expects {self.w.value.shape[0]} features, got {x.shape[1]}")
        self._x = x
        y = x @ self.w.value
        if self.b is not None:
            y += self.b.value
        return y

    def backward(self, dout: np.ndarray) -> np.ndarray:
        x = self._x
        self.w.grad += x.T @ dout
        if self.b is not None:
            self.b.grad += dout.sum(axis=0)
        return dout @ self.w.value.T


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Param(np.ones(d))
        self.beta = Param(np.zeros(d))
        self.eps = eps
        self._xhat: np.ndarray | None = None
        self._inv_std: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        mu = x.mean(axis=1, keepdims=True)
        var = x.var(axis=1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv_std
        self._xhat, self._inv_std = xhat, inv_std
        return xhat * self.gamma.value + self.beta.value

    def backward(self, dout: np.ndarray) -> np.ndarray:
        xhat, inv_std = self._xhat, self._inv_std
        self.beta.grad += dout.sum(axis=0)
        self.gamma.grad += (dout * xhat).sum(axis=0)
        dxhat = dout * self.gamma.value
        return inv_std * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )


class FeedForward(Module):
    """Linear -> gelu -> Linear with the usual 4x hidden width."""

    def __init__(self, d: int, rng: Rng, mult: int = 4):
        self.fc1 = Linear(d, mult * d, rng)
        self.fc2 = Linear(mult * d, d, rng)
        self._h: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = self.fc1.forward(x)
        self._h = h
        return self.fc2.forward(gelu(h))

    def backward(self, dout: np.ndarray) -> np.ndarray:
        dh = self.fc2.backward(dout) * gelu_grad(self._h)
        return self.fc1.backward(dh)


def _head_slices(spec: AttentionSpec) -> list[slice]:
    if spec.pos.kind == "rope2d" and spec.d_head % 4 != 0:
        raise ConfigError(f"rope2d needs head dim divisible by 4, got {spec.d_head}")
    return [slice(h * spec.d_head, (h + 1) * spec.d_head) for h in range(spec.n_heads)]


class FullSelfAttention(Module):
    """Dense multi-head self-attention with optional rope/alibi."""

    def __init__(self, spec: AttentionSpec, rng: Rng):
        d_model = spec.d_model
        self.wq = Linear(d_model, d_model, rng)
        self.wk = Linear(d_model, d_model, rng)
        self.wv = Linear(d_model, d_model, rng)
        self.wo = Linear(d_model, d_model, rng)
        self.spec = spec
        self.pos = spec.pos
        self.n_heads = spec.n_heads
        self.slices = _head_slices(spec)
        self._cache = None

    def forward(self, x: np.ndarray, positions: np.ndarray) -> np.ndarray:
        q, k, v = self.wq.forward(x), self.wk.forward(x), self.wv.forward(x)
        heads = []
        per_head = []
        for h, sl in enumerate(self.slices):
            qh, kh, vh = q[:, sl], k[:, sl], v[:, sl]
            if self.pos.kind == "rope2d":
                qh = posenc.rope2d_apply(qh, positions, self.pos.theta_base)
                kh = posenc.rope2d_apply(kh, positions, self.pos.theta_base)
            bias = None
            if self.pos.kind == "alibi2d":
                slope = posenc.alibi_slope(self.pos.rho, h, self.n_heads)
                bias = posenc.alibi2d_matrix(positions, slope)
            out_h = attention.full_attention(qh, kh, vh, bias=bias)
            heads.append(out_h)
            per_head.append((qh, kh, vh, bias))
        self._cache = (per_head, positions)
        return self.wo.forward(np.concatenate(heads, axis=1))

    def backward(self, dout: np.ndarray) -> np.ndarray:
        per_head, positions = self._cache
        dconcat = self.wo.backward(dout)
        dq = np.empty_like(dconcat)
        dk = np.empty_like(dconcat)
        dv = np.empty_like(dconcat)
        for sl, (qh, kh, vh, bias) in zip(self.slices, per_head):
            dqh, dkh, dvh = attention.full_attention_backward(qh, kh, vh, dconcat[:, sl], bias=bias)
            if self.pos.kind == "rope2d":
                dqh = posenc.rope2d_apply(dqh, positions, self.pos.theta_base, inverse=True)
                dkh = posenc.rope2d_apply(dkh, positions, self.pos.theta_base, inverse=True)
            dq[:, sl], dk[:, sl], dv[:, sl] = dqh, dkh, dvh
        return self.wq.backward(dq) + self.wk.backward(dk) + self.wv.backward(dv)

    def dense_weights(self) -> list[np.ndarray]:
        """Per-head attention matrices from the last forward pass."""
        if self._cache is None:
            raise StateError("no cached forward pass to take attention weights from")
        per_head, _ = self._cache
        return [
            attention.full_attention_weights(qh, kh, vh, bias=bias)[1]
            for qh, kh, vh, bias in per_head
        ]


class BandedSelfAttention(Module):
    """Multi-head self-attention through the chunked banded kernel."""

    def __init__(self, spec: AttentionSpec, rng: Rng):
        if spec.pos.kind == "abs2d":
            raise ConfigError("abs2d is an input-level encoding, not a per-layer one")
        d_model = spec.d_model
        self.wq = Linear(d_model, d_model, rng)
        self.wk = Linear(d_model, d_model, rng)
        self.wv = Linear(d_model, d_model, rng)
        self.wo = Linear(d_model, d_model, rng)
        self.spec = spec
        self.pos = spec.pos
        self.n_heads = spec.n_heads
        self.slices = _head_slices(spec)
        self._cache = None

    def forward(self, x: np.ndarray, positions: np.ndarray, plan: ChunkPlan | None = None) -> np.ndarray:
        q, k, v = self.wq.forward(x), self.wk.forward(x), self.wv.forward(x)
        heads = []
        ctxs = []
        for h, sl in enumerate(self.slices):
            qh, kh, vh = q[:, sl], k[:, sl], v[:, sl]
            if self.pos.kind == "rope2d":
                qh = posenc.rope2d_apply(qh, positions, self.pos.theta_base)
                kh = posenc.rope2d_apply(kh, positions, self.pos.theta_base)
            rho = 0.0
            if self.pos.kind == "alibi2d":
                rho = posenc.alibi_slope(self.pos.rho, h, self.n_heads)
            out_h, ctx = attention.banded_attention(
                qh, kh, vh, positions, self.spec.band, self.spec.chunk_size,
                self.spec.ordering, rho=rho, plan=plan,
            )
            if plan is None:
                plan = ctx.plan
            heads.append(out_h)
            ctxs.append(ctx)
        self._cache = (ctxs, positions)
        return self.wo.forward(np.concatenate(heads, axis=1))

    def backward(self, dout: np.ndarray) -> np.ndarray:
        ctxs, positions = self._cache
        dconcat = self.wo.backward(dout)
        dq = np.empty_like(dconcat)
        dk = np.empty_like(dconcat)
        dv = np.empty_like(dconcat)
        for sl, ctx in zip(self.slices, ctxs):
            dqh, dkh, dvh = attention.banded_attention_backward(ctx, dconcat[:, sl])
            if self.pos.kind == "rope2d":
                dqh = posenc.rope2d_apply(dqh, positions, self.pos.theta_base, inverse=True)
                dkh = posenc.rope2d_apply(dkh, positions, self.pos.theta_base, inverse=True)
            dq[:, sl], dk[:, sl], dv[:, sl] = dqh, dkh, dvh
        self._cache = None
        return self.wq.backward(dq) + self.wk.backward(dk) + self.wv.backward(dv)

    def dense_weights(self) -> list[np.ndarray]:
        """Per-head attention matrices, densified from the banded context.

        Small-n diagnostic only; reconstructs the same masked softmax the
        kernel computed, in original token order.
        """
        if self._cache is None:
            raise StateError("no cached forward pass to take attention weights from")
        ctxs, _ = self._cache
        mats = []
        for h, ctx in enumerate(ctxs):
            if ctx.qs is None:
                raise StateError("banded context already consumed; rerun forward")
            mask = build_mask_2d(ctx.pos_s, ctx.plan.band)
            bias = None
            if ctx.rho != 0.0:
                bias = posenc.alibi2d_matrix(ctx.pos_s, ctx.rho)
            s = (ctx.qs @ ctx.ks.T) * ctx.scale
            if bias is not None:
                s = s + bias
            a_sorted = softmax_rows(np.where(mask, s, -np.inf))
            a = np.empty_like(a_sorted)
            a[np.ix_(ctx.plan.order, ctx.plan.order)] = a_sorted
            mats.append(a)
        return mats


class TransformerBlock(Module):
    """Pre-norm residual block: x + attn(ln(x)), then x + ffn(ln(x))."""

    def __init__(self, attn: Module, d_model: int, rng: Rng):
        self.ln1 = LayerNorm(d_model)
        self.attn = attn
        self.ln2 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, rng)

    def forward(self, x: np.ndarray, positions: np.ndarray, plan: ChunkPlan | None = None) -> np.ndarray:
        if isinstance(self.attn, BandedSelfAttention):
            h = x + self.attn.forward(self.ln1.forward(x), positions, plan)
        else:
            h = x + self.attn.forward(self.ln1.forward(x), positions)
        return h + self.ffn.forward(self.ln2.forward(h))

    def backward(self, dout: np.ndarray) -> np.ndarray:
        dh = dout + self.ln2.backward(self.ffn.backward(dout))
        return dh + self.ln1.backward(self.attn.backward(dh))


class WindowPool2x2(Module):
    """Mean-pool tokens sharing a 2x2 window; halves both grid axes.

    Output tokens are ordered row-major by window coordinate and carry
    position (wx, wy) = (x // 2, y // 2).  Stateless, but caches the
    scatter map for backward.
    """

    def __init__(self) -> None:
        self._cache = None

    def forward(self, x: np.ndarray, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pos = np.asarray(positions)
        win = pos // 2
        key = win[:, 1].astype(np.int64) * (int(win[:, 0].max()) + 1) + win[:, 0]
        uniq, inv = np.unique(key, return_inverse=True)
        counts = np.bincount(inv, minlength=len(uniq)).astype(np.float64)
        pooled = np.zeros((len(uniq), x.shape[1]))
        np.add.at(pooled, inv, x)
        pooled /= counts[:, None]
        first = np.full(len(uniq), -1, dtype=np.int64)
        seen_at = np.arange(len(inv))[::-1]
        first[inv[::-1]] = seen_at
        out_pos = win[first].astype(np.int32)
        self._cache = (inv, counts, x.shape[0])
        return pooled, out_pos

    def backward(self, dpooled: np.ndarray) -> np.ndarray:
        inv, counts, n = self._cache
        return dpooled[inv] / counts[inv][:, None]


class GatedAttentionPool(Module):
    """Gated attention-based MIL pooling.

    a = softmax(w^T (tanh(z V1) * sigmoid(z V2))), pooled = sum_i a_i z_i.
    """

    def __init__(self, d: int, hidden: int, rng: Rng):
        self.v1 = Param(rng.gaussian(d * hidden).reshape(d, hidden) / np.sqrt(d))
        self.v2 = Param(rng.gaussian(d * hidden).reshape(d, hidden) / np.sqrt(d))
        self.w = Param(rng.gaussian(hidden) / np.sqrt(hidden))
        self._cache = None

    def forward(self, z: np.ndarray) -> np.ndarray:
        t = np.tanh(z @ self.v1.value)
        s = expit(z @ self.v2.value)
        e = (t * s) @ self.w.value
        e = e - e.max()
        a = np.exp(e)
        a /= a.sum()
        self._cache = (z, t, s, a)
        return a @ z

    def attention_weights(self) -> np.ndarray:
        return self._cache[3]

    def backward(self, dpooled: np.ndarray) -> np.ndarray:
        z, t, s, a = self._cache
        da = z @ dpooled
        dz = np.outer(a, dpooled)
        de = a * (da - float(a @ da))
        self.w.grad += (t * s).T @ de
        dg = np.outer(de, self.w.value)
        dt = dg * s * (1.0 - t * t)
        ds = dg * t * s * (1.0 - s)
        self.v1.grad += z.T @ dt
        self.v2.grad += z.T @ ds
        dz += dt @ self.v1.value.T + ds @ self.v2.value.T
        return dz
