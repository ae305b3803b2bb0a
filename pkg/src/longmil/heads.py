"""Bag-level classification heads.

Five heads share the contract feats (n, d_in) + positions (n, 2) ->
BagLogits: linear probes over mean/max pooling, gated attention pooling
(abmil), a stack of dense attention blocks (full_attn), and the
local-global pipeline (longmil): banded blocks, a 2x2 window pool, one
dense block, then gated pooling.  The pooling baselines and abmil read
raw embeddings; the transformer heads project to d_model first when the
input width differs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import posenc
from .attention import AttentionSpec
from .chunks import plan_chunks
from .errors import ConfigError
from .layers import (
    BandedSelfAttention,
    FullSelfAttention,
    GatedAttentionPool,
    Linear,
    TransformerBlock,
    WindowPool2x2,
)
from .linalg import Rng
from .params import Module, Param

__all__ = ["HEAD_KINDS", "HeadConfig", "BagLogits", "build_head"]

HEAD_KINDS = ("mean_pool", "max_pool", "abmil", "full_attn", "longmil")


@dataclass(frozen=True)
class HeadConfig:
    kind: str
    d_in: int
    n_classes: int
    d_model: int = 384
    n_heads: int = 1
    band: float = 10.0
    chunk_size: int = 128
    ordering: str = "row_major"
    pos: posenc.PosMode = field(default_factory=posenc.PosMode.rope2d)
    pool_hidden: int = 128
    local_layers: int = 2
    full_layers: int = 1
    global_stage: str = "full"
    window_pool: bool = True

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ConfigError(f"kind must be one of {HEAD_KINDS}, got {self.kind!r}")
        if self.d_in < 1 or self.n_classes < 2:
            raise ConfigError("d_in >= 1 and n_classes >= 2 required")
        if self.local_layers < 1:
            raise ConfigError("local_layers must be >= 1")
        if self.full_layers < 0:
            raise ConfigError("full_layers must be >= 0")
        if self.global_stage not in ("full", "none"):
            raise ConfigError(f"global_stage must be full or none, got {self.global_stage!r}")

    def attn_spec(self, band: float) -> AttentionSpec:
        return AttentionSpec(
            d_model=self.d_model, n_heads=self.n_heads, band=band,
            chunk_size=self.chunk_size, ordering=self.ordering,
            pos=_layer_pos(self.pos),
        )

    def to_json(self) -> str:
        d = {k: v for k, v in self.__dict__.items() if k != "pos"}
        d["pos"] = self.pos.to_json()
        if d["band"] == np.inf:
            d["band"] = "inf"
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "HeadConfig":
        d = json.loads(text)
        d["pos"] = posenc.PosMode.from_json(d["pos"])
        if d.get("band") == "inf":
            d["band"] = np.inf
        return cls(**d)


@dataclass
class BagLogits:
    """Per-bag class scores plus the pooling weights when the head has them."""

    logits: np.ndarray
    pool_weights: np.ndarray | None = None


def _layer_pos(pos: posenc.PosMode) -> posenc.PosMode:
    # abs2d lives at the input; attention layers then run unencoded
    return posenc.PosMode.none() if pos.kind == "abs2d" else pos


class _PooledHead(Module):
    """Linear classifier over the column-mean or column-max of Z."""

    def __init__(self, cfg: HeadConfig, rng: Rng, mode: str):
        self.classifier = Linear(cfg.d_in, cfg.n_classes, rng)
        self.mode = mode

    def forward(self, feats: np.ndarray, positions: np.ndarray) -> BagLogits:
        del positions
        if self.mode == "mean_pool":
            pooled = feats.mean(axis=0)
        else:
            pooled = feats.max(axis=0)
        return BagLogits(self.classifier.forward(pooled[None, :])[0])

    def backward(self, dlogits: np.ndarray) -> None:
        # embeddings are data, not parameters; only the probe trains
        self.classifier.backward(dlogits[None, :])


class _AbmilHead(Module):
    """Gated attention pooling directly on Z, then a linear classifier."""

    def __init__(self, cfg: HeadConfig, rng: Rng):
        self.pool = GatedAttentionPool(cfg.d_in, cfg.pool_hidden, rng)
        self.classifier = Linear(cfg.d_in, cfg.n_classes, rng)

    def forward(self, feats: np.ndarray, positions: np.ndarray) -> BagLogits:
        del positions
        pooled = self.pool.forward(feats)
        return BagLogits(
            self.classifier.forward(pooled[None, :])[0],
            pool_weights=self.pool.attention_weights(),
        )

    def backward(self, dlogits: np.ndarray) -> None:
        dpooled = self.classifier.backward(dlogits[None, :])[0]
        self.pool.backward(dpooled)


class _Abs2dTable(Module):
    """Learned absolute positional table, edge-clamped on lookup."""

    def __init__(self, max_x: int, max_y: int, d: int, rng: Rng):
        init = 0.02 * rng.gaussian((max_x + 1) * (max_y + 1) * d)
        self.table = Param(init.reshape(max_x + 1, max_y + 1, d))
        self._pos = None

    def forward(self, x: np.ndarray, positions: np.ndarray) -> np.ndarray:
        self._pos = positions
        return x + posenc.abs2d_lookup(self.table.value, positions)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        self.table.grad += posenc.abs2d_scatter_grad(self.table.value.shape, self._pos, dout)
        return dout


class _TransformerHead(Module):
    """Shared trunk plumbing for full_attn and longmil heads."""

    def __init__(self, cfg: HeadConfig, rng: Rng):
        self.proj = None if cfg.d_in == cfg.d_model else Linear(cfg.d_in, cfg.d_model, rng)
        self.abs_table = None
        if cfg.pos.kind == "abs2d":
            self.abs_table = _Abs2dTable(cfg.pos.max_x, cfg.pos.max_y, cfg.d_model, rng)
        self.pool = GatedAttentionPool(cfg.d_model, cfg.pool_hidden, rng)
        self.classifier = Linear(cfg.d_model, cfg.n_classes, rng)
        self.cfg = cfg

    def embed(self, feats: np.ndarray, positions: np.ndarray) -> np.ndarray:
        z = feats if self.proj is None else self.proj.forward(feats)
        if self.abs_table is not None:
            z = self.abs_table.forward(z, positions)
        return z

    def embed_backward(self, dz: np.ndarray) -> None:
        if self.abs_table is not None:
            dz = self.abs_table.backward(dz)
        if self.proj is not None:
            self.proj.backward(dz)

    def head_out(self, z: np.ndarray) -> BagLogits:
        pooled = self.pool.forward(z)
        return BagLogits(
            self.classifier.forward(pooled[None, :])[0],
            pool_weights=self.pool.attention_weights(),
        )

    def head_backward(self, dlogits: np.ndarray) -> np.ndarray:
        dpooled = self.classifier.backward(dlogits[None, :])[0]
        return self.pool.backward(dpooled)


class _FullAttnHead(_TransformerHead):
    """full_layers dense attention blocks; zero blocks degenerates to abmil."""

    def __init__(self, cfg: HeadConfig, rng: Rng):
        super().__init__(cfg, rng)
        spec = cfg.attn_spec(band=np.inf)
        self.blocks = [
            TransformerBlock(FullSelfAttention(spec, rng), cfg.d_model, rng)
            for _ in range(cfg.full_layers)
        ]

    def forward(self, feats: np.ndarray, positions: np.ndarray) -> BagLogits:
        z = self.embed(feats, positions)
        for block in self.blocks:
            z = block.forward(z, positions)
        return self.head_out(z)

    def backward(self, dlogits: np.ndarray) -> None:
        dz = self.head_backward(dlogits)
        for block in reversed(self.blocks):
            dz = block.backward(dz)
        self.embed_backward(dz)


class _LongMILHead(_TransformerHead):
    """Banded local blocks, 2x2 window pool, one dense global block."""

    def __init__(self, cfg: HeadConfig, rng: Rng):
        super().__init__(cfg, rng)
        spec = cfg.attn_spec(band=cfg.band)
        self.local_blocks = [
            TransformerBlock(BandedSelfAttention(spec, rng), cfg.d_model, rng)
            for _ in range(cfg.local_layers)
        ]
        self.window = WindowPool2x2() if cfg.window_pool else None
        self.global_block = None
        if cfg.global_stage == "full":
            gspec = cfg.attn_spec(band=np.inf)
            self.global_block = TransformerBlock(FullSelfAttention(gspec, rng), cfg.d_model, rng)

    def forward(self, feats: np.ndarray, positions: np.ndarray) -> BagLogits:
        cfg = self.cfg
        plan = plan_chunks(positions, cfg.band, cfg.chunk_size, cfg.ordering)
        z = self.embed(feats, positions)
        for block in self.local_blocks:
            z = block.forward(z, positions, plan)
        if self.window is not None:
            z, positions = self.window.forward(z, positions)
        if self.global_block is not None:
            z = self.global_block.forward(z, positions)
        return self.head_out(z)

    def backward(self, dlogits: np.ndarray) -> None:
        dz = self.head_backward(dlogits)
        if self.global_block is not None:
            dz = self.global_block.backward(dz)
        if self.window is not None:
            dz = self.window.backward(dz)
        for block in reversed(self.local_blocks):
            dz = block.backward(dz)
        self.embed_backward(dz)


def build_head(cfg: HeadConfig, rng: Rng) -> Module:
    if cfg.kind in ("mean_pool", "max_pool"):
        return _PooledHead(cfg, rng, cfg.kind)
    if cfg.kind == "abmil":
        return _AbmilHead(cfg, rng)
    if cfg.kind == "full_attn":
        return _FullAttnHead(cfg, rng)
    if cfg.kind == "longmil":
        return _LongMILHead(cfg, rng)
    raise ConfigError(f"unknown head kind {cfg.kind!r}")
