"""Interaction-log ingestion, concept vocabulary, window mining, splitting and I/O."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import ContractError

log = logging.getLogger(__name__)


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class SchemaConfig:
    """Column names for each required field.

    ``concept`` names the column whose ids form the vocabulary. Point it at the
    skill column (``skill_id`` in ASSIST09) for skill granularity.
    """

    order_id: str = "order_id"
    user_id: str = "user_id"
    concept: str = "problem_id"
    correct: str = "correct"
    attempt_count: str = "attempt_count"
    ms_first_response: str = "ms_first_response"

    @classmethod
    def for_granularity(cls, granularity: str, **aliases) -> "SchemaConfig":
        if granularity == "problem":
            return cls(**aliases)
        if granularity == "skill":
            aliases.setdefault("concept", "skill_id")
            return cls(**aliases)
        raise ValueError(f"granularity must be 'problem' or 'skill', got {granularity!r}")

    def columns(self) -> dict[str, str]:
        return {
            "order_id": self.order_id,
            "user_id": self.user_id,
            "problem_id": self.concept,
            "correct": self.correct,
            "attempt_count": self.attempt_count,
            "ms_first_response": self.ms_first_response,
        }


@dataclass(frozen=True, order=True)
class InteractionRow:
    user_id: int
    order_id: int
    problem_id: int
    correct: int
    attempt_count: int
    ms_first_response: int


class InteractionLog(list):
    """Rows sorted by (user_id, order_id), plus how many input rows were rejected."""

    def __init__(self, rows=(), dropped: int = 0, duplicates: int = 0):
        super().__init__(rows)
        self.dropped = dropped
        self.duplicates = duplicates


def _parse_int(text: str) -> int:
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        # ASSIST09 exports some integer columns as "123.0"
        f = float(text)
        if not f.is_integer():
            raise
        return int(f)


def parse_csv(path, schema: SchemaConfig | None = None, encoding: str = "utf-8") -> InteractionLog:
    schema = schema or SchemaConfig()
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    cols = schema.columns()
    rows: list[InteractionRow] = []
    dropped = 0
    with path.open(newline="", encoding=encoding, errors="replace") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in cols.values() if c not in header]
        if missing:
            raise SchemaError(f"missing required column(s) {missing}; available columns: {header}")
        for rec in reader:
            try:
                vals = {k: _parse_int(rec[c] or "") for k, c in cols.items()}
            except (ValueError, TypeError):
                dropped += 1
                continue
            if vals["correct"] not in (0, 1) or vals["attempt_count"] < 1 or vals["ms_first_response"] < 0:
                dropped += 1
                continue
            rows.append(InteractionRow(**vals))
    # stable sort keeps file order among duplicate (user, order) keys
    rows.sort(key=lambda r: (r.user_id, r.order_id))
    out, dups = [], 0
    last = None
    for r in rows:
        key = (r.user_id, r.order_id)
        if key == last:
            dups += 1
            continue
        out.append(r)
        last = key
    if dropped:
        log.info("dropped %d malformed rows from %s", dropped, path)
    return InteractionLog(out, dropped=dropped, duplicates=dups)


class Vocabulary:
    """Dense bijection between concept ids and indices, in ascending id order."""

    def __init__(self, ids):
        self._ids = sorted(set(int(i) for i in ids))
        self._index = {pid: k for k, pid in enumerate(self._ids)}

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def size(self) -> int:
        return len(self._ids)

    def index_of(self, pid: int) -> int:
        return self._index[pid]

    def id_of(self, k: int) -> int:
        return self._ids[k]

    def ids(self) -> list[int]:
        return list(self._ids)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._ids == other._ids

    def save(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["problem_id", "index"])
            for k, pid in enumerate(self._ids):
                w.writerow([pid, k])

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        rows.sort(key=lambda r: int(r["index"]))
        if [int(r["index"]) for r in rows] != list(range(len(rows))):
            raise SchemaError(f"{path}: vocabulary indices are not dense")
        return cls(int(r["problem_id"]) for r in rows)


def build_vocab(rows) -> Vocabulary:
    if not rows:
        raise ContractError("build_vocab: no rows")
    return Vocabulary(r.problem_id for r in rows)


@dataclass
class SequenceSample:
    user_id: int
    input: list[int]
    target: list[int]
    correct: list[int]

    def to_record(self) -> dict:
        return {"user": self.user_id, "input": self.input, "target": self.target, "correct": self.correct}


class SampleList(list):
    """Mined windows plus the number of users too short to contribute any."""

    def __init__(self, samples=(), skipped_users: int = 0):
        super().__init__(samples)
        self.skipped_users = skipped_users


def group_by_user(rows) -> dict[int, list[InteractionRow]]:
    users: dict[int, list[InteractionRow]] = {}
    for r in rows:
        users.setdefault(r.user_id, []).append(r)
    for seq in users.values():
        seq.sort(key=lambda r: r.order_id)
    return users


def mine_windows(rows, vocab: Vocabulary, n: int, m: int, stride: int = 1) -> SampleList:
    if n < 1 or m < 1 or stride < 1:
        raise ContractError(f"mine_windows: need n, m, stride >= 1 (got {n}, {m}, {stride})")
    out: list[SequenceSample] = []
    skipped = 0
    for uid, seq in sorted(group_by_user(rows).items()):
        if len(seq) < n + m:
            skipped += 1
            continue
        ids = [vocab.index_of(r.problem_id) for r in seq]
        bits = [r.correct for r in seq]
        for i in range(0, len(seq) - n - m + 1, stride):
            out.append(SequenceSample(uid, ids[i : i + n], ids[i + n : i + n + m], bits[i + n : i + n + m]))
    if skipped:
        log.info("mine_windows: %d user(s) shorter than n+m=%d skipped", skipped, n + m)
    return SampleList(out, skipped_users=skipped)


@dataclass
class DatasetSplit:
    train: list[SequenceSample]
    test: list[SequenceSample]
    seed: int
    split_fraction: float
    train_users: list[int] = field(default_factory=list)
    test_users: list[int] = field(default_factory=list)


def split_by_user(samples, fraction: float = 0.8, seed: int = 42) -> DatasetSplit:
    """Shuffle users with a seeded generator and give the first ceil(fraction*U) to train.

    The train share is capped at U-1 so the test side is never empty.
    """
    if not 0 < fraction < 1:
        raise ContractError(f"split fraction must be in (0, 1), got {fraction}")
    users = sorted({s.user_id for s in samples})
    if len(users) < 2:
        raise ContractError(f"split_by_user needs at least 2 users, got {len(users)}")
    order = np.random.default_rng(seed).permutation(len(users))
    k = min(math.ceil(round(fraction * len(users), 9)), len(users) - 1)
    train_users = sorted(users[i] for i in order[:k])
    chosen = set(train_users)
    return DatasetSplit(
        train=[s for s in samples if s.user_id in chosen],
        test=[s for s in samples if s.user_id not in chosen],
        seed=seed,
        split_fraction=fraction,
        train_users=train_users,
        test_users=sorted(u for u in users if u not in chosen),
    )


def save_samples(samples, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_record(), separators=(",", ":")) + "\n")


def load_samples(path) -> list[SequenceSample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                s = SequenceSample(int(rec["user"]), list(rec["input"]), list(rec["target"]), list(rec["correct"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed sample record ({exc})") from None
            if len(s.correct) != len(s.target):
                raise ValueError(f"{path}:{lineno}: correct and target lengths differ")
            out.append(s)
    return out


def to_arrays(samples) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack samples into (inputs [N, n], targets [N, m], correct [N, m]) int arrays."""
    if not samples:
        raise ContractError("to_arrays: no samples")
    x = np.array([s.input for s in samples], dtype=np.int64)
    y = np.array([s.target for s in samples], dtype=np.int64)
    c = np.array([s.correct for s in samples], dtype=np.int64)
    return x, y, c
