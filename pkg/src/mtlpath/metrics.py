"""Support-weighted classification metrics over path steps, ROC-AUC, comparison tables.

Each (sample, step) pair is one multi-class instance. Per-class scores are
averaged with class-support weights, so weighted recall is the fraction of
correct steps, i.e. accuracy. Sums are done in exact rational arithmetic and
rounded once, so that identity holds bit for bit.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.stats import rankdata

from .model import ARCHITECTURES
from .numerics import ContractError

DISPLAY_NAMES = {
    "rnn": "Standard RNN",
    "lstm": "LSTM",
    "seq2seq_rnn": "Seq2Seq + Standard RNN",
    "seq2seq_lstm": "Seq2Seq + LSTM",
    "seq2seq_rnn_attn": "Seq2Seq + Standard RNN + Attention",
    "seq2seq_lstm_attn": "Seq2Seq + LSTM + Attention",
    "multitask_lstm": "Multi-task LSTM",
}


class UndefinedMetricError(ValueError):
    pass


@dataclass
class ClassCounts:
    cls: int
    tp: int
    fp: int
    fn: int

    @property
    def support(self) -> int:
        return self.tp + self.fn


@dataclass
class MetricReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    support: int
    auc: float | None = None
    rep_penalty: float | None = None
    per_class: list[ClassCounts] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "auc": self.auc,
            "rep_penalty": self.rep_penalty,
            "support": self.support,
        }

    @property
    def zero_precision_classes(self) -> list[int]:
        """Classes that were never predicted (their precision is reported as 0)."""
        return [c.cls for c in self.per_class if c.tp + c.fp == 0]


def weighted_scores(counts: list[ClassCounts], total: int) -> tuple[float, float, float, float]:
    """(accuracy, precision, recall, f1) from per-class tallies, support-weighted."""
    correct = 0
    prec = rec = f1 = Fraction(0)
    for c in counts:
        correct += c.tp
        if c.support == 0:
            continue
        p = Fraction(c.tp, c.tp + c.fp) if c.tp + c.fp else Fraction(0)
        r = Fraction(c.tp, c.support)
        f = 2 * p * r / (p + r) if p + r else Fraction(0)
        w = Fraction(c.support, total)
        prec += w * p
        rec += w * r
        f1 += w * f
    return float(Fraction(correct, total)), float(prec), float(rec), float(f1)


def path_metrics(decoded, targets, num_classes: int) -> MetricReport:
    pred = np.asarray(decoded, dtype=np.int64).reshape(-1)
    true = np.asarray(targets, dtype=np.int64).reshape(-1)
    if np.shape(decoded) != np.shape(targets):
        raise ContractError(f"path_metrics: shapes differ {np.shape(decoded)} vs {np.shape(targets)}")
    if pred.size == 0:
        raise ContractError("path_metrics: no instances")
    if max(pred.max(), true.max()) >= num_classes or min(pred.min(), true.min()) < 0:
        raise ContractError(f"path_metrics: class id outside [0, {num_classes})")
    hit = pred == true
    tp = np.bincount(true[hit], minlength=num_classes)
    n_pred = np.bincount(pred, minlength=num_classes)
    n_true = np.bincount(true, minlength=num_classes)
    counts = [
        ClassCounts(c, int(tp[c]), int(n_pred[c] - tp[c]), int(n_true[c] - tp[c]))
        for c in range(num_classes)
        if n_pred[c] or n_true[c]
    ]
    acc, p, r, f = weighted_scores(counts, pred.size)
    return MetricReport(acc, p, r, f, int(pred.size), per_class=counts)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney form: P(score of a positive > score of a negative), ties count 1/2."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("roc_auc needs at least one positive and one negative label")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


COLUMNS = ("accuracy", "f1", "precision", "recall")


def _ordered(reports: dict) -> list[str]:
    known = [a for a in ARCHITECTURES if a in reports]
    return known + sorted(k for k in reports if k not in ARCHITECTURES)


def compare_table(reports: dict[str, MetricReport]) -> str:
    """Aligned text table, one row per architecture in canonical order."""
    if not reports:
        raise ContractError("compare_table: no reports")
    archs = _ordered(reports)
    with_auc = any(reports[a].auc is not None for a in archs)
    head = ["Model", "Accuracy", "F1 Score", "Precision", "Recall"] + (["AUC"] if with_auc else [])
    rows = []
    for a in archs:
        r = reports[a]
        row = [DISPLAY_NAMES.get(a, a)] + [f"{getattr(r, c):.4f}" for c in COLUMNS]
        if with_auc:
            row.append("-" if r.auc is None else f"{r.auc:.4f}")
        rows.append(row)
    widths = [max(len(x[i]) for x in [head] + rows) for i in range(len(head))]
    fmt = lambda cells: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))
    lines = [fmt(head), "  ".join("-" * w for w in widths)] + [fmt(r) for r in rows]
    return "\n".join(lines)


def compare_csv(reports: dict[str, MetricReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["architecture", *COLUMNS, "auc"])
    for a in _ordered(reports):
        r = reports[a]
        w.writerow([a] + [f"{getattr(r, c):.4f}" for c in COLUMNS] + ["" if r.auc is None else f"{r.auc:.4f}"])
    return buf.getvalue()


GRID_COLUMNS = ("seed", "architecture", "m", *COLUMNS, "auc", "rep_penalty")


def grid_csv(grid: dict[tuple[int, str, int], MetricReport]) -> str:
    """Long-format CSV of a (seed, architecture, m) -> report grid."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(GRID_COLUMNS)
    order = {a: i for i, a in enumerate(ARCHITECTURES)}
    for seed, arch, m in sorted(grid, key=lambda k: (k[0], order.get(k[1], 99), k[2])):
        r = grid[(seed, arch, m)]
        w.writerow(
            [seed, arch, m]
            + [f"{getattr(r, c):.4f}" for c in COLUMNS]
            + ["" if r.auc is None else f"{r.auc:.4f}", "" if r.rep_penalty is None else f"{r.rep_penalty:.4f}"]
        )
    return buf.getvalue()


def load_grid_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["seed"], r["m"] = int(r["seed"]), int(r["m"])
        for c in (*COLUMNS, "auc", "rep_penalty"):
            r[c] = float(r[c]) if r[c] != "" else None
    return rows
