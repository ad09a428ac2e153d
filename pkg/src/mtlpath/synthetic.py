"""Skill-chain student simulator for desk-scale experiments.

This is test plumbing, not a model of real students. Each simulated student
has a latent ability. Whether they answer a concept correctly depends on that
ability, the concept's difficulty and how often they practised it. The next
concept depends on the last two concepts and on whether the last answer was
correct: a correct answer advances along a chain, a wrong one sends the
student to a fixed remedial concept. Path targets and correctness labels
therefore share a hidden cause, which is what lets an auxiliary correctness
task inform path prediction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .dataio import DatasetSplit, InteractionRow, Vocabulary, mine_windows, split_by_user


@dataclass(frozen=True)
class ChainWorld:
    num_concepts: int
    difficulty: np.ndarray
    remedial: np.ndarray
    ability_scale: float = 2.0
    practice_gain: float = 0.3
    noise: float = 0.1

    @classmethod
    def make(cls, num_concepts: int, seed: int = 0, **kw) -> "ChainWorld":
        rng = np.random.default_rng([seed, 7])
        return cls(
            num_concepts,
            difficulty=rng.uniform(-1.0, 1.0, num_concepts),
            remedial=rng.permutation(num_concepts),
            **kw,
        )

    def advance(self, prev: int, last: int) -> int:
        return (last + 1 + prev % 3) % self.num_concepts

    def p_correct(self, ability: float, concept: int, practice: int) -> float:
        z = self.ability_scale * ability - self.difficulty[concept] + self.practice_gain * practice
        return 1.0 / (1.0 + np.exp(-z))


def simulate_user(world: ChainWorld, length: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """One student's (concept, correct) trajectory."""
    T = world.num_concepts
    ability = rng.normal()
    practice = np.zeros(T, dtype=np.int64)
    prev, cur = int(rng.integers(T)), int(rng.integers(T))
    out = []
    for _ in range(length):
        ok = int(rng.random() < world.p_correct(ability, cur, practice[cur]))
        practice[cur] += 1
        out.append((cur, ok))
        if rng.random() < world.noise:
            nxt = int(rng.integers(T))
        elif ok:
            nxt = world.advance(prev, cur)
        else:
            nxt = int(world.remedial[cur])
        prev, cur = cur, nxt
    return out


def simulate_rows(num_users: int, length: int, num_concepts: int, seed: int = 0, world: ChainWorld | None = None) -> list[InteractionRow]:
    """Interaction rows in the same shape the CSV reader produces."""
    world = world or ChainWorld.make(num_concepts, seed)
    rng = np.random.default_rng([seed, 11])
    rows = []
    for uid in range(num_users):
        for k, (concept, ok) in enumerate(simulate_user(world, length, rng)):
            rows.append(InteractionRow(uid, k, concept, ok, 1, 1000))
    return rows


def chain_dataset(
    num_users: int,
    num_concepts: int,
    n: int,
    m: int,
    length: int | None = None,
    seed: int = 0,
    fraction: float = 0.8,
) -> DatasetSplit:
    """Simulate, mine windows and split by user.

    With the default ``length = n + m`` every user yields exactly one window,
    so ``num_users`` windows come out, split ``fraction`` / ``1 - fraction``.
    """
    rows = simulate_rows(num_users, length or n + m, num_concepts, seed)
    # indices equal concept ids even if some concept never occurs
    vocab = Vocabulary(range(num_concepts))
    return split_by_user(mine_windows(rows, vocab, n, m), fraction, seed)


def write_log_csv(rows, path) -> None:
    """Write rows in the interaction-log CSV layout that ``parse_csv`` reads.

    The concept id doubles as the skill id, so either granularity works.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["order_id", "user_id", "problem_id", "correct", "attempt_count", "ms_first_response", "skill_id"])
        for k, r in enumerate(rows):
            # order ids are global, like in exported tutor logs
            w.writerow([k + 1, r.user_id, r.problem_id, r.correct, r.attempt_count, r.ms_first_response, r.problem_id])
