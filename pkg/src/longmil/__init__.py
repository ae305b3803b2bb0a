"""Banded 2-d attention over spatial bags, with MIL heads and a trainer.

The engine is float64 numpy with an optional compiled kernel core; set
LONGMIL_BACKEND=python to force the pure-python tile loops.
"""

from .attention import (
    AttentionSpec,
    banded_attention,
    banded_attention_backward,
    full_attention,
    full_attention_backward,
    full_attention_weights,
)
from .backend import active_backend
from .chunks import ChunkPlan, build_mask_2d, order_tokens, plan_chunks
from .data import (
    Bag,
    Manifest,
    SynthSpec,
    gen_synthetic,
    read_bag,
    split_by_size,
    split_random,
    write_bag,
)
from .errors import LongMILError
from .heads import HEAD_KINDS, BagLogits, HeadConfig, build_head
from .linalg import Rng
from .metrics import EvalReport, macro_auc, macro_f1
from .params import load_checkpoint, save_checkpoint
from .posenc import PosMode
from .train import TrainConfig, TrainResult, evaluate, extrapolation_experiment, train

__version__ = "0.1.0"

__all__ = [
    "AttentionSpec",
    "banded_attention",
    "banded_attention_backward",
    "full_attention",
    "full_attention_backward",
    "full_attention_weights",
    "active_backend",
    "ChunkPlan",
    "build_mask_2d",
    "order_tokens",
    "plan_chunks",
    "Bag",
    "Manifest",
    "SynthSpec",
    "gen_synthetic",
    "read_bag",
    "split_by_size",
    "split_random",
    "write_bag",
    "LongMILError",
    "HEAD_KINDS",
    "BagLogits",
    "HeadConfig",
    "build_head",
    "Rng",
    "EvalReport",
    "macro_auc",
    "macro_f1",
    "load_checkpoint",
    "save_checkpoint",
    "PosMode",
    "TrainConfig",
    "TrainResult",
    "evaluate",
    "extrapolation_experiment",
    "train",
    "__version__",
]
