"""Training loop, AdamW, and the extrapolation experiment harness.

One optimizer step per bag (batch size 1), seeded shuffle each epoch,
checkpoint selected by best validation macro-AUC, early stop on
patience.  Everything is deterministic for a fixed seed and dataset.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import Bag, SynthSpec, gen_synthetic, split_by_size
from .errors import ConfigError, TrainingError
from .heads import BagLogits, HeadConfig, build_head
from .linalg import Rng
from .metrics import EvalReport, cross_entropy, evaluate_scores, macro_auc
from .params import Module, Param

__all__ = [
    "AdamW",
    "TrainConfig",
    "TrainResult",
    "train",
    "evaluate",
    "predict_scores",
    "ExtrapolationRow",
    "extrapolation_experiment",
]


class AdamW:
    """Adam with decoupled weight decay.

    theta <- theta * (1 - lr*wd) - lr * mhat / (sqrt(vhat) + eps); decay
    never passes through the moment estimates.
    """

    def __init__(
        self,
        named_params: list[tuple[str, Param]],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 1e-2,
    ):
        if lr <= 0:
            raise ConfigError(f"lr must be > 0, got {lr}")
        self.named = list(named_params)
        self.lr, self.beta1, self.beta2 = lr, beta1, beta2
        self.eps, self.weight_decay = eps, weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.value) for _, p in self.named]
        self.v = [np.zeros_like(p.value) for _, p in self.named]

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for (name, p), m, v in zip(self.named, self.m, self.v):
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in parameter {name}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value *= 1.0 - self.lr * self.weight_decay
            p.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    seed: int
    epochs: int = 30
    lr: float = 1e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 10

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")


@dataclass
class TrainResult:
    head: Module
    best_epoch: int
    best_val_auc: float
    epoch_losses: list[float] = field(default_factory=list)
    val_aucs: list[float] = field(default_factory=list)


def predict_scores(head: Module, bags: list[Bag]) -> tuple[np.ndarray, np.ndarray]:
    """Softmax class probabilities and labels for a list of bags."""
    scores = []
    labels = []
    for bag in bags:
        out: BagLogits = head.forward(bag.z64(), bag.positions)
        shifted = out.logits - out.logits.max()
        p = np.exp(shifted)
        scores.append(p / p.sum())
        labels.append(bag.label)
    return np.array(scores), np.array(labels)


def train(
    head_cfg: HeadConfig,
    train_bags: list[Bag],
    val_bags: list[Bag],
    cfg: TrainConfig,
) -> TrainResult:
    """Fit a head; keep the parameters of the best validation epoch."""
    if not train_bags or not val_bags:
        raise ConfigError("train and val splits must both be non-empty")
    head = build_head(head_cfg, Rng(cfg.seed).spawn(0x1217))
    opt = AdamW(
        list(head.named_params()), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
        eps=cfg.eps, weight_decay=cfg.weight_decay,
    )
    shuffle_rng = Rng(cfg.seed).spawn(0x51F7)

    best_auc = -np.inf
    best_epoch = -1
    best_state = head.state_dict()
    best_state = {k: v.copy() for k, v in best_state.items()}
    losses = []
    val_aucs = []
    since_best = 0
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in shuffle_rng.permutation(len(train_bags)):
            bag = train_bags[idx]
            out = head.forward(bag.z64(), bag.positions)
            loss, dlogits = cross_entropy(out.logits, bag.label)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss on bag {bag.id}")
            total += loss
            head.zero_grad()
            head.backward(dlogits)
            opt.step()
        losses.append(total / len(train_bags))

        scores, labels = predict_scores(head, val_bags)
        auc = macro_auc(scores, labels)
        val_aucs.append(auc)
        if auc > best_auc:
            best_auc = auc
            best_epoch = epoch
            best_state = {k: v.copy() for k, v in head.state_dict().items()}
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break

    head.load_state_dict(best_state)
    return TrainResult(head, best_epoch, float(best_auc), losses, val_aucs)


def evaluate(head: Module, bags: list[Bag], split: str, seed: int) -> EvalReport:
    scores, labels = predict_scores(head, bags)
    return evaluate_scores(scores, labels, split, seed)


@dataclass(frozen=True)
class ExtrapolationRow:
    pos_mode: str
    seed: int
    test_auc: float
    val_auc: float


EXTRAPOLATION_VARIANTS = ("rope2d", "abs2d", "none")


def extrapolation_experiment(
    base_head: HeadConfig,
    synth: SynthSpec,
    seeds: list[int],
    small_count: int = 120,
    large_count: int = 30,
    large_grid: tuple[int, int] = (48, 64),
    train_cfg: TrainConfig | None = None,
    progress=None,
) -> list[ExtrapolationRow]:
    """Train small, test large, across positional-encoding variants.

    For each seed: generates small-grid bags plus a batch of large-grid
    bags with the same prototypes, splits by size so every test bag is a
    large one, then trains one head per pos-mode variant with identical
    data and init seeds.  abs2d tables are sized to the training grids,
    so test positions clamp at the table edge.
    """
    from . import posenc

    rows = []
    for seed in seeds:
        spec_small = replace(synth, seed=seed)
        spec_large = replace(
            synth, seed=seed, grid_min=large_grid[0], grid_max=large_grid[1]
        )
        bags = gen_synthetic(spec_small, small_count)
        bags += gen_synthetic(spec_large, large_count, first_index=small_count)
        ratio_test = large_count / (small_count + large_count)
        ratio_val = 0.25 * (1.0 - ratio_test)
        manifest = split_by_size(
            bags, (1.0 - ratio_val - ratio_test, ratio_val, ratio_test)
        )
        by_split = {"train": [], "val": [], "test": []}
        for bag, row in zip(bags, manifest.rows):
            by_split[row.split].append(bag)

        variants = {
            "rope2d": posenc.PosMode.rope2d(),
            "abs2d": posenc.PosMode.abs2d(synth.grid_max - 1, synth.grid_max - 1),
            "none": posenc.PosMode.none(),
        }
        tc = train_cfg if train_cfg is not None else TrainConfig(seed=seed)
        tc = replace(tc, seed=seed)
        for name in EXTRAPOLATION_VARIANTS:
            head_cfg = replace(base_head, pos=variants[name])
            result = train(head_cfg, by_split["train"], by_split["val"], tc)
            scores, labels = predict_scores(result.head, by_split["test"])
            row = ExtrapolationRow(
                pos_mode=name,
                seed=seed,
                test_auc=macro_auc(scores, labels),
                val_auc=result.best_val_auc,
            )
            rows.append(row)
            if progress is not None:
                progress(row)
    return rows
