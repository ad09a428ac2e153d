"""Path cross-entropy, correctness BCE, the repetition penalty and their weighted total.

The repetition penalty ``k - |unique(path)|`` counts decoded duplicates and has
no useful gradient. Training uses a relaxation instead: per concept ``c`` the
expected visit count ``s_c = sum_i p_i(c)`` is hinged at one,
``sum_c max(0, s_c - 1)``. For one-hot distributions both forms agree exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .model import ConfigError
from .numerics import ContractError, ShapeError, Tensor

PROB_FLOOR = 1e-12


@dataclass
class LossBreakdown:
    ce: float
    bce: float
    rep: float
    total: float
    lambda1: float
    lambda2: float
    graph: Tensor | None = None  # differentiable total, dropped after backward

    def as_dict(self) -> dict[str, float]:
        return {"ce": self.ce, "bce": self.bce, "rep": self.rep, "total": self.total}


def path_ce(path_probs: Tensor, targets) -> Tensor:
    """Mean over samples of the per-step mean of ``-log p(target)``."""
    targets = np.asarray(targets, dtype=np.int64)
    B, k, T = path_probs.shape
    if targets.shape != (B, k):
        raise ShapeError(f"path_ce: targets {targets.shape} vs probs {path_probs.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= T):
        raise ContractError(f"path_ce: target out of range [0, {T})")
    nll = nx.log(nx.pick(path_probs, targets), floor=PROB_FLOOR)
    return nx.scale(nx.reduce_sum(nll), -1.0 / (B * k))


def dkt_bce(dkt_probs: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=nx.get_dtype())
    if labels.shape != dkt_probs.shape:
        raise ShapeError(f"dkt_bce: labels {labels.shape} vs probs {dkt_probs.shape}")
    p = nx.clip(dkt_probs, PROB_FLOOR, 1.0 - PROB_FLOOR)
    # 1 - 1e-12 rounds to 1 in float32, so the complement needs its own floor
    pos = nx.mul(nx.log(p, floor=PROB_FLOOR), labels)
    neg = nx.mul(nx.log(nx.sub(1.0, p), floor=PROB_FLOOR), 1.0 - labels)
    return nx.scale(nx.reduce_sum(nx.add(pos, neg)), -1.0 / labels.size)


def rep_penalty_soft(path_probs: Tensor) -> Tensor:
    B = path_probs.shape[0]
    visits = nx.reduce_sum(path_probs, axis=1)  # [B, T]
    # relu has zero subgradient at the hinge
    return nx.scale(nx.reduce_sum(nx.relu(nx.sub(visits, 1.0))), 1.0 / B)


def rep_penalty_hard(decoded) -> float:
    decoded = np.asarray(decoded)
    if decoded.size == 0:
        return 0.0
    k = decoded.shape[1]
    return float(np.mean([k - len(set(row.tolist())) for row in decoded]))


def combine(ce: float, bce: float, rep: float, lambda1: float, lambda2: float) -> float:
    """The weighted total of already-computed components."""
    if lambda1 < 0 or lambda2 < 0:
        raise ConfigError(f"loss weights must be non-negative (lambda1={lambda1}, lambda2={lambda2})")
    return ce + lambda1 * bce + lambda2 * rep


def total_loss(path_probs: Tensor, targets, dkt_probs: Tensor | None, labels, lambda1: float = 0.5, lambda2: float = 0.1) -> LossBreakdown:
    """``ce + lambda1*bce + lambda2*rep`` with all parts kept for logging.

    A term whose weight is zero is still computed and logged but is not wired
    into the gradient graph. Pass ``dkt_probs=None`` for single-task models.
    """
    if lambda1 < 0 or lambda2 < 0:
        raise ConfigError(f"loss weights must be non-negative (lambda1={lambda1}, lambda2={lambda2})")
    ce = path_ce(path_probs, targets)
    bce = dkt_bce(dkt_probs, labels) if dkt_probs is not None else None
    rep = rep_penalty_soft(path_probs)

    graph = ce
    if bce is not None and lambda1 > 0:
        graph = nx.add(graph, nx.scale(bce, lambda1))
    if lambda2 > 0:
        graph = nx.add(graph, nx.scale(rep, lambda2))

    ce_v, rep_v = ce.item(), rep.item()
    bce_v = bce.item() if bce is not None else 0.0
    w1 = lambda1 if bce is not None else 0.0
    return LossBreakdown(ce_v, bce_v, rep_v, combine(ce_v, bce_v, rep_v, w1, lambda2), w1, lambda2, graph)
