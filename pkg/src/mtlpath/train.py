"""Training loop, evaluation and the architecture-by-path-length comparison grid."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import numerics as nx
from .dataio import DatasetSplit, SequenceSample, to_arrays
from .losses import LossBreakdown, rep_penalty_hard, total_loss
from .metrics import MetricReport, UndefinedMetricError, path_metrics, roc_auc
from .model import ARCHITECTURES, ModelConfig, forward, init_params, save_checkpoint
from .numerics import AdamState, ContractError, ParameterStore

log = logging.getLogger(__name__)


class TrainingDivergedError(ArithmeticError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    lambda1: float = 0.5
    lambda2: float = 0.1
    seed: int = 42
    eval_every: int = 1
    checkpoint: str | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError(f"invalid training config: epochs={self.epochs}, batch_size={self.batch_size}, lr={self.lr}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class EpochRecord:
    epoch: int
    loss: dict[str, float]
    report: MetricReport | None
    seconds: float

    def log_line(self) -> str:
        acc = "nan" if self.report is None else f"{self.report.accuracy:.4f}"
        l = self.loss
        return (
            f"epoch={self.epoch} ce={l['ce']:.6f} bce={l['bce']:.6f} rep={l['rep']:.6f} "
            f"total={l['total']:.6f} acc={acc} secs={self.seconds:.3f}"
        )

    def json_line(self) -> str:
        rec = {"epoch": self.epoch, **self.loss, "secs": round(self.seconds, 6)}
        if self.report is not None:
            rec.update({k: v for k, v in self.report.as_dict().items()})
        return json.dumps(rec, sort_keys=True)


@dataclass
class TrainResult:
    store: ParameterStore  # parameters after the last epoch
    records: list[EpochRecord]
    best_store: ParameterStore  # highest test accuracy seen at an evaluation
    best_epoch: int | None = None
    best_report: MetricReport | None = None


def batches(num: int, batch_size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    order = rng.permutation(num)
    for start in range(0, num, batch_size):
        yield order[start : start + batch_size]


def batch_loss(store: ParameterStore, config: ModelConfig, x, y, c, lambda1: float, lambda2: float) -> LossBreakdown:
    """Teacher-forced forward and the weighted loss; baselines get no BCE term."""
    pred = forward(store, config, x, y, training=True)
    if config.has_dkt:
        return total_loss(pred.path_probs, y, pred.dkt_probs, c, lambda1, lambda2)
    return total_loss(pred.path_probs, y, None, None, 0.0, lambda2)


def train(
    split: DatasetSplit,
    model_config: ModelConfig,
    train_config: TrainConfig,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    if not split.train:
        raise ContractError("train: empty training set")
    cfg = train_config
    x, y, c = to_arrays(split.train)
    if x.shape[1] != model_config.n or y.shape[1] != model_config.m:
        raise ContractError(f"train: windows are n={x.shape[1]}, m={y.shape[1]} but config says n={model_config.n}, m={model_config.m}")
    if max(x.max(), y.max()) >= model_config.vocab_size:
        raise ContractError("train: concept index exceeds vocab_size")

    store = init_params(model_config, cfg.seed)
    adam = AdamState(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    lambda1 = cfg.lambda1 if model_config.has_dkt else 0.0
    do_eval = cfg.eval_every > 0 and bool(split.test)

    records: list[EpochRecord] = []
    best_store, best_epoch, best_report = store.copy(), None, None
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        sums = {"ce": 0.0, "bce": 0.0, "rep": 0.0, "total": 0.0}
        nb = 0
        for bi, idx in enumerate(batches(len(x), cfg.batch_size, rng)):
            store.zero_grads()
            lb = batch_loss(store, model_config, x[idx], y[idx], c[idx], lambda1, cfg.lambda2)
            if not all(math.isfinite(v) for v in lb.as_dict().values()):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {bi}: {lb.as_dict()}")
            nx.backward(lb.graph, store)
            lb.graph = None
            nx.adam_step(store, adam)
            for k, v in lb.as_dict().items():
                sums[k] += v
            nb += 1
        store.zero_grads()
        report = None
        if do_eval and epoch % cfg.eval_every == 0:
            report = evaluate(store, model_config, split.test)
            if best_report is None or report.accuracy > best_report.accuracy:
                best_store, best_epoch, best_report = store.copy(), epoch, report
        rec = EpochRecord(epoch, {k: v / nb for k, v in sums.items()}, report, time.perf_counter() - t0)
        records.append(rec)
        log.debug(rec.log_line())
        if on_epoch is not None:
            on_epoch(rec)

    if best_report is None:
        best_store = store.copy()
    if cfg.checkpoint:
        save_checkpoint(best_store, model_config, cfg.checkpoint)
    return TrainResult(store, records, best_store, best_epoch, best_report)


def predict(store: ParameterStore, config: ModelConfig, inputs: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Free-running greedy paths for a stack of histories."""
    out = [forward(store, config, inputs[s : s + batch_size]).decoded for s in range(0, len(inputs), batch_size)]
    return np.concatenate(out, axis=0)


def evaluate(store: ParameterStore, config: ModelConfig, samples: list[SequenceSample], batch_size: int = 512) -> MetricReport:
    """Path metrics of free-running decodes; AUC of the correctness head when there is one.

    The correctness head is scored teacher-forced on the true path, since the
    labels describe the items the student actually attempted.
    """
    if not samples:
        raise ContractError("evaluate: no samples")
    x, y, c = to_arrays(samples)
    decoded = predict(store, config, x, batch_size)
    report = path_metrics(decoded, y, config.vocab_size)
    report.rep_penalty = rep_penalty_hard(decoded)
    if config.has_dkt:
        probs = np.concatenate(
            [forward(store, config, x[s : s + batch_size], y[s : s + batch_size], training=True).dkt_probs.data for s in range(0, len(x), batch_size)]
        )
        try:
            report.auc = roc_auc(probs.reshape(-1), c.reshape(-1))
        except UndefinedMetricError:
            report.auc = None
    return report


@dataclass
class ComparisonResult:
    grid: dict[tuple[int, str, int], MetricReport] = field(default_factory=dict)
    runs: dict[tuple[int, str, int], TrainResult] = field(default_factory=dict)

    def reports_for(self, seed: int, m: int) -> dict[str, MetricReport]:
        return {a: r for (s, a, mm), r in self.grid.items() if s == seed and mm == m}


def run_comparison(
    splits: dict[int, DatasetSplit],
    base_config: ModelConfig,
    train_config: TrainConfig,
    architectures: Iterable[str] = ARCHITECTURES,
    seeds: Iterable[int] = (42,),
    keep_runs: bool = False,
) -> ComparisonResult:
    """Train every architecture at every path length under the same seed and budget.

    ``splits`` maps a path length to the windows mined for it. Reports come
    from each run's best checkpoint.
    """
    out = ComparisonResult()
    for seed in seeds:
        for m, split in sorted(splits.items()):
            for arch in architectures:
                mc = base_config.replace(architecture=arch, m=m)
                tc = TrainConfig(**{**train_config.__dict__, "seed": seed, "checkpoint": None})
                res = train(split, mc, tc)
                report = res.best_report or evaluate(res.best_store, mc, split.test or split.train)
                out.grid[(seed, arch, m)] = report
                if keep_runs:
                    out.runs[(seed, arch, m)] = res
                log.info("seed=%d m=%d arch=%s acc=%.4f", seed, m, arch, report.accuracy)
    return out
