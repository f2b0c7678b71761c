"""Leave-one-out ranking evaluation: HR and NDCG at configurable cutoffs.

Each test user's single held-out positive is ranked against sampled negatives
(or the full catalog minus train positives). With one relevant item the ideal
DCG is 1, so NDCG collapses to 1/log2(rank + 1) inside the cutoff and 0
outside. The positive's rank uses the pessimistic-by-index tie rule: it is
placed after any equal-scored candidate with a lower item index.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .dataio import SplitTriple, sample_negatives

__all__ = ["EvaluationResult", "hit_at", "ndcg_at", "rank_of_positive", "evaluate_loo"]


def hit_at(rank: int, cutoff: int) -> int:
    """1 if the positive's 1-based rank falls within the cutoff (inclusive)."""
    if rank < 1:
        raise ValueError("rank is 1-based")
    return 1 if rank <= cutoff else 0


def ndcg_at(rank: int, cutoff: int) -> float:
    """Single-positive NDCG: 1/log2(rank + 1) inside the cutoff, else 0."""
    if rank < 1:
        raise ValueError("rank is 1-based")
    if rank > cutoff:
        return 0.0
    return 1.0 / math.log2(rank + 1.0)


def rank_of_positive(positive_score: float, positive_item: int,
                     negative_scores: np.ndarray, negative_items: np.ndarray) -> int:
    """1-based rank of the positive among the candidates.

    Higher scores rank first; on ties the candidate with the lower item index
    wins, so an equal-scored negative with a lower index pushes the positive
    down (deterministic and pessimistic for the model under test).
    """
    higher = int(np.sum(negative_scores > positive_score))
    tied_before = int(np.sum((negative_scores == positive_score)
                             & (negative_items < positive_item)))
    return 1 + higher + tied_before


@dataclass
class EvaluationResult:
    """Per-user ranking outcomes plus arithmetic-mean aggregates."""

    cutoffs: tuple[int, ...]
    users: np.ndarray
    ranks: np.ndarray
    seed: int
    n_negatives: int | None
    n_skipped: int = 0
    per_user: dict[str, np.ndarray] = field(default_factory=dict)
    aggregates: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.ranks = np.asarray(self.ranks, dtype=np.int64)
        if not self.per_user:
            for c in self.cutoffs:
                self.per_user[f"hr@{c}"] = np.array(
                    [hit_at(r, c) for r in self.ranks], dtype=np.float64)
                self.per_user[f"ndcg@{c}"] = np.array(
                    [ndcg_at(r, c) for r in self.ranks], dtype=np.float64)
        if not self.aggregates:
            for key, vals in self.per_user.items():
                self.aggregates[key] = float(vals.mean()) if vals.size else 0.0

    @property
    def n_evaluated_users(self) -> int:
        return int(self.users.size)

    def metric(self, name: str, cutoff: int) -> float:
        return self.aggregates[f"{name}@{cutoff}"]

    def save(self, prefix: str | Path) -> None:
        """Write per-user rows as CSV and the aggregate summary as JSON."""
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        columns = [f"{m}@{c}" for c in self.cutoffs for m in ("hr", "ndcg")]
        with open(prefix.with_suffix(".csv"), "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["user", "rank"] + columns)
            for row in range(self.n_evaluated_users):
                writer.writerow(
                    [int(self.users[row]), int(self.ranks[row])]
                    + [repr(float(self.per_user[c][row])) for c in columns])
        summary = {
            "cutoffs": list(self.cutoffs),
            "seed": self.seed,
            "n_negatives": self.n_negatives,
            "n_evaluated_users": self.n_evaluated_users,
            "n_skipped": self.n_skipped,
            "aggregates": {k: self.aggregates[k] for k in sorted(self.aggregates)},
        }
        prefix.with_suffix(".json").write_text(json.dumps(summary, indent=1),
                                               encoding="utf-8")


def _evaluate_user(model, split: SplitTriple, user: int, positive_item: int,
                   n_negatives: int | None, seed: int) -> int:
    """Rank one user's held-out positive; pure given the derived per-user seed."""
    if n_negatives is None:
        train_items = split.train.user_items(user)
        candidates = np.setdiff1d(np.arange(split.train.n_items), train_items)
        candidates = candidates[candidates != positive_item]
    else:
        candidates = sample_negatives(
            split.train, user, n_negatives, seed,
            exclude=(split.validation, split.test))
    negative_scores = np.asarray(model.score_items(user, candidates), dtype=np.float64)
    positive_score = float(np.asarray(
        model.score_items(user, np.array([positive_item]))).reshape(-1)[0])
    return rank_of_positive(positive_score, positive_item, negative_scores, candidates)


def evaluate_loo(model, split: SplitTriple, n_negatives: int | None = 99,
                 cutoffs: tuple[int, ...] = (1, 5, 10, 20), seed: int = 0,
                 target: str = "test", threads: int = 1) -> EvaluationResult:
    """Leave-one-out evaluation of any model exposing ``score_items``.

    ``n_negatives=None`` ranks against the full catalog minus the user's train
    positives (seed then has no effect). Per-user negative draws derive from
    (seed, user), so results do not depend on evaluation order or thread
    count. Users absent from the target partition are skipped and counted.
    """
    part = getattr(split, target)
    if part.n_entries == 0:
        raise ValueError(f"{target} split is empty")
    users = part.users
    positives = part.items
    n_skipped = split.train.n_users - np.unique(users).size

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            ranks = list(pool.map(
                lambda pair: _evaluate_user(model, split, int(pair[0]), int(pair[1]),
                                            n_negatives, seed),
                zip(users, positives)))
    else:
        ranks = [_evaluate_user(model, split, int(u), int(i), n_negatives, seed)
                 for u, i in zip(users, positives)]

    return EvaluationResult(
        cutoffs=tuple(cutoffs),
        users=users.copy(),
        ranks=np.asarray(ranks),
        seed=seed,
        n_negatives=n_negatives,
        n_skipped=n_skipped,
    )
