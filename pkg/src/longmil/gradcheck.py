"""Central finite-difference validation of the hand-written backwards.

Perturbs sampled parameter scalars by +-h around the trained point,
recomputes the scalar loss, and compares the secant slope against the
analytic gradient with rel err = |analytic - numeric| / max(1e-8,
|numeric|).  f64 only; intended for small bags.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .linalg import Rng
from .metrics import cross_entropy
from .params import Module

__all__ = ["GradCheckRow", "GradCheckReport", "check_loss_fn", "grad_check_head"]


@dataclass(frozen=True)
class GradCheckRow:
    name: str
    index: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    tol: float
    h: float
    rows: list[GradCheckRow] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((r.rel_err for r in self.rows), default=0.0)

    @property
    def failures(self) -> list[GradCheckRow]:
        return [r for r in self.rows if r.rel_err > self.tol]

    @property
    def ok(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        status = "pass" if self.ok else f"FAIL ({len(self.failures)} scalars)"
        return (
            f"gradcheck {status}: {len(self.rows)} scalars, "
            f"max rel err {self.max_rel_err:.3e} at tol {self.tol:.1e}"
        )


def check_loss_fn(
    model: Module,
    loss_and_backward,
    h: float = 1e-4,
    tol: float = 1e-4,
    max_scalars: int = 200,
    rng: Rng | None = None,
) -> GradCheckReport:
    """Generic checker over a model's parameters.

    loss_and_backward() must run a fresh forward, populate parameter
    gradients, and return the scalar loss.  It is called once for the
    analytic pass and twice per sampled scalar for the secants.
    """
    if h <= 0 or tol <= 0:
        raise ConfigError("h and tol must be positive")
    rng = rng if rng is not None else Rng(0)
    named = list(model.named_params())
    if not named:
        raise ConfigError("model has no parameters to check")

    model.zero_grad()
    loss_and_backward()
    analytic = {name: p.grad.copy() for name, p in named}

    total = sum(p.value.size for _, p in named)
    budget = min(max_scalars, total)
    flat_ids = rng.permutation(total)[:budget]
    bounds = np.cumsum([p.value.size for _, p in named])

    report = GradCheckReport(tol=tol, h=h)
    for flat in sorted(int(i) for i in flat_ids):
        which = int(np.searchsorted(bounds, flat, side="right"))
        name, p = named[which]
        idx = flat - (0 if which == 0 else int(bounds[which - 1]))
        view = p.value.ravel()
        keep = view[idx]
        view[idx] = keep + h
        lo_plus = loss_and_backward_quiet(model, loss_and_backward)
        view[idx] = keep - h
        lo_minus = loss_and_backward_quiet(model, loss_and_backward)
        view[idx] = keep
        numeric = (lo_plus - lo_minus) / (2.0 * h)
        a = float(analytic[name].ravel()[idx])
        # 1e-6 floor sits well above the secant's eps/h noise (~1e-12)
        # so a mathematically-zero gradient is not scored against noise
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
        report.rows.append(GradCheckRow(name, int(idx), a, float(numeric), float(rel)))
    return report


def loss_and_backward_quiet(model: Module, loss_and_backward) -> float:
    # secant evaluations do not need gradients, but reusing the same
    # closure keeps the forward path identical; grads are discarded
    model.zero_grad()
    return float(loss_and_backward())


def grad_check_head(
    head: Module,
    feats: np.ndarray,
    positions: np.ndarray,
    label: int,
    h: float = 1e-4,
    tol: float = 1e-4,
    max_scalars: int = 200,
    rng: Rng | None = None,
) -> GradCheckReport:
    """Check a bag head end to end through the cross-entropy loss."""
    feats = np.asarray(feats, dtype=np.float64)

    def loss_and_backward() -> float:
        out = head.forward(feats, positions)
        loss, dlogits = cross_entropy(out.logits, label)
        head.backward(dlogits)
        return loss

    return check_loss_fn(head, loss_and_backward, h=h, tol=tol,
                         max_scalars=max_scalars, rng=rng)
