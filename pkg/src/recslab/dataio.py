"""Implicit-feedback dataset loading, leave-one-out splitting and negative sampling.

Input files are TSV/CSV with columns ``user, item[, value[, timestamp]]``;
lines starting with ``#`` are skipped. External identifiers are remapped to
dense 0-based indices, with the bijection kept in an :class:`IdMap`.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

__all__ = [
    "InteractionMatrix",
    "IdMap",
    "SplitTriple",
    "load_interactions",
    "save_interactions",
    "leave_one_out_split",
    "sample_negatives",
    "merge_matrices",
    "save_split",
    "load_split",
]

logger = logging.getLogger(__name__)


class ParseError(ValueError):
    """Malformed input row; carries the offending file and line number."""


@dataclass
class InteractionMatrix:
    """Sparse user x item implicit-feedback matrix.

    Entries are kept as parallel arrays sorted by (user, item) so that two
    matrices with the same content compare equal and serialize identically.
    ``tag`` records the partition the matrix belongs to ("train", "validation",
    "test", ...) so downstream code can assert it never trains on test data.
    """

    n_users: int
    n_items: int
    users: np.ndarray
    items: np.ndarray
    values: np.ndarray
    timestamps: np.ndarray | None = None
    tag: str = ""

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.timestamps is not None:
            self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        if not (self.users.shape == self.items.shape == self.values.shape):
            raise ValueError("entry arrays have mismatched lengths")
        if self.users.size:
            if self.users.min() < 0 or self.users.max() >= self.n_users:
                raise ValueError("user index out of range")
            if self.items.min() < 0 or self.items.max() >= self.n_items:
                raise ValueError("item index out of range")
        order = np.lexsort((self.items, self.users))
        self.users = self.users[order]
        self.items = self.items[order]
        self.values = self.values[order]
        if self.timestamps is not None:
            self.timestamps = self.timestamps[order]
        keys = self.users * self.n_items + self.items
        if keys.size and np.any(np.diff(keys) == 0):
            raise ValueError("duplicate (user, item) pair")
        self._csr = None

    @property
    def n_entries(self) -> int:
        return int(self.users.size)

    def to_csr(self) -> sp.csr_matrix:
        if self._csr is None:
            self._csr = sp.csr_matrix(
                (self.values, (self.users, self.items)),
                shape=(self.n_users, self.n_items),
            )
        return self._csr

    def user_items(self, user: int) -> np.ndarray:
        """Item indices the user interacted with, ascending."""
        csr = self.to_csr()
        return csr.indices[csr.indptr[user]:csr.indptr[user + 1]].astype(np.int64)

    def entry_set(self) -> set[tuple[int, int]]:
        return set(zip(self.users.tolist(), self.items.tolist()))

    def interaction_counts_per_item(self) -> np.ndarray:
        counts = np.zeros(self.n_items, dtype=np.int64)
        np.add.at(counts, self.items, 1)
        return counts

    def with_tag(self, tag: str) -> "InteractionMatrix":
        return InteractionMatrix(self.n_users, self.n_items, self.users, self.items,
                                 self.values, self.timestamps, tag=tag)


@dataclass
class IdMap:
    """Bijective external-id <-> internal-index maps for users and items."""

    user_to_index: dict[str, int] = field(default_factory=dict)
    item_to_index: dict[str, int] = field(default_factory=dict)

    @property
    def index_to_user(self) -> list[str]:
        out = [""] * len(self.user_to_index)
        for ext, idx in self.user_to_index.items():
            out[idx] = ext
        return out

    @property
    def index_to_item(self) -> list[str]:
        out = [""] * len(self.item_to_index)
        for ext, idx in self.item_to_index.items():
            out[idx] = ext
        return out

    def user_index(self, external: str) -> int:
        return self.user_to_index[external]

    def item_index(self, external: str) -> int:
        return self.item_to_index[external]

    def _intern(self, table: dict[str, int], external: str) -> int:
        idx = table.get(external)
        if idx is None:
            idx = len(table)
            table[external] = idx
        return idx

    def save(self, path: str | Path) -> None:
        payload = {"users": self.index_to_user, "items": self.index_to_item}
        Path(path).write_text(json.dumps(payload, indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "IdMap":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            user_to_index={ext: i for i, ext in enumerate(payload["users"])},
            item_to_index={ext: i for i, ext in enumerate(payload["items"])},
        )


@dataclass
class SplitTriple:
    """Leave-one-out partitions: at most one validation and one test entry per user."""

    train: InteractionMatrix
    validation: InteractionMatrix
    test: InteractionMatrix
    seed: int = 0
    policy: str = "random"


def _iter_rows(path: Path, fmt: str):
    """Yield (line_number, fields) for data rows, skipping comments and blanks."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        if fmt == "csv":
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row or (row[0].lstrip().startswith("#")):
                    continue
                yield lineno, [cell.strip() for cell in row]
        else:
            for lineno, line in enumerate(fh, start=1):
                stripped = line.strip()
                if not stripped or stripped.startswith("#"):
                    continue
                yield lineno, stripped.split()


def load_interactions(
    path: str | Path,
    fmt: str = "tsv",
    binarize: bool = True,
    min_value_threshold: float | None = None,
) -> tuple[InteractionMatrix, IdMap]:
    """Load a TSV/CSV interaction file into a deduplicated matrix plus its IdMap.

    Rows below ``min_value_threshold`` are dropped before deduplication.
    With ``binarize`` every retained entry gets value 1; duplicated
    (user, item) pairs collapse to a single entry (summed values when not
    binarizing, latest timestamp kept).
    """
    path = Path(path)
    if fmt not in ("tsv", "csv"):
        raise ValueError(f"unknown format {fmt!r}; expected 'tsv' or 'csv'")
    if not path.exists():
        raise FileNotFoundError(f"interaction file not found: {path}")

    idmap = IdMap()
    users: list[int] = []
    items: list[int] = []
    values: list[float] = []
    timestamps: list[int] = []
    saw_timestamp = False

    for lineno, fields in _iter_rows(path, fmt):
        if len(fields) < 2:
            raise ParseError(f"{path}:{lineno}: expected at least user and item columns")
        try:
            value = float(fields[2]) if len(fields) >= 3 else 1.0
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: bad value field {fields[2]!r}") from exc
        if value < 0:
            raise ParseError(f"{path}:{lineno}: negative interaction value {value}")
        if len(fields) >= 4:
            try:
                ts = int(float(fields[3]))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: bad timestamp field {fields[3]!r}") from exc
            saw_timestamp = True
        else:
            ts = 0
        if min_value_threshold is not None and value < min_value_threshold:
            continue
        users.append(idmap._intern(idmap.user_to_index, fields[0]))
        items.append(idmap._intern(idmap.item_to_index, fields[1]))
        values.append(value)
        timestamps.append(ts)

    if not users:
        raise ParseError(f"{path}: no interactions after filtering")

    u = np.asarray(users, dtype=np.int64)
    i = np.asarray(items, dtype=np.int64)
    v = np.asarray(values, dtype=np.float64)
    t = np.asarray(timestamps, dtype=np.int64)

    # Deduplicate (user, item) pairs: sum values, keep the latest timestamp.
    n_items = len(idmap.item_to_index)
    keys = u * n_items + i
    order = np.argsort(keys, kind="stable")
    u, i, v, t, keys = u[order], i[order], v[order], t[order], keys[order]
    uniq, first = np.unique(keys, return_index=True)
    v_sum = np.add.reduceat(v, first)
    t_max = np.maximum.reduceat(t, first)
    u, i = u[first], i[first]
    v = np.ones_like(v_sum) if binarize else v_sum

    matrix = InteractionMatrix(
        n_users=len(idmap.user_to_index),
        n_items=n_items,
        users=u,
        items=i,
        values=v,
        timestamps=t_max if saw_timestamp else None,
    )
    return matrix, idmap


def save_interactions(matrix: InteractionMatrix, path: str | Path,
                      idmap: IdMap | None = None) -> None:
    """Write a matrix back to the TSV schema (inverse of :func:`load_interactions`)."""
    path = Path(path)
    index_to_user = idmap.index_to_user if idmap is not None else None
    index_to_item = idmap.index_to_item if idmap is not None else None
    with open(path, "w", encoding="utf-8") as fh:
        for row in range(matrix.n_entries):
            user = matrix.users[row]
            item = matrix.items[row]
            ext_u = index_to_user[user] if index_to_user is not None else str(user)
            ext_i = index_to_item[item] if index_to_item is not None else str(item)
            cols = [ext_u, ext_i, repr(float(matrix.values[row]))]
            if matrix.timestamps is not None:
                cols.append(str(int(matrix.timestamps[row])))
            fh.write("\t".join(cols) + "\n")


def _subset(matrix: InteractionMatrix, mask: np.ndarray, tag: str) -> InteractionMatrix:
    return InteractionMatrix(
        matrix.n_users, matrix.n_items,
        matrix.users[mask], matrix.items[mask], matrix.values[mask],
        matrix.timestamps[mask] if matrix.timestamps is not None else None,
        tag=tag,
    )


def leave_one_out_split(matrix: InteractionMatrix, policy: str = "random",
                        seed: int = 0) -> SplitTriple:
    """Hold out one test and one validation interaction per qualifying user.

    Users with fewer than 3 interactions stay train-only (they keep their
    entries but are excluded from validation/test); their count is logged.
    ``latest_timestamp`` sends the newest interaction to test and the second
    newest to validation, with ties broken by item index; ``random`` draws the
    two held-out entries from a per-user generator derived from ``seed``.
    """
    if policy not in ("random", "latest_timestamp"):
        raise ValueError(f"unknown split policy {policy!r}")
    if policy == "latest_timestamp" and matrix.timestamps is None:
        raise ValueError("latest_timestamp policy requires timestamps")

    dest = np.zeros(matrix.n_entries, dtype=np.int8)  # 0 train, 1 validation, 2 test
    boundaries = np.searchsorted(matrix.users, np.arange(matrix.n_users + 1))
    n_cold = 0
    for user in range(matrix.n_users):
        lo, hi = boundaries[user], boundaries[user + 1]
        n_u = hi - lo
        if n_u == 0:
            continue
        if n_u < 3:
            n_cold += 1
            continue
        if policy == "latest_timestamp":
            ts = matrix.timestamps[lo:hi]
            order = np.lexsort((matrix.items[lo:hi], ts))
            test_pos, val_pos = order[-1], order[-2]
        else:
            rng = np.random.default_rng(np.random.SeedSequence((seed, user)))
            test_pos, val_pos = rng.choice(n_u, size=2, replace=False)
        dest[lo + test_pos] = 2
        dest[lo + val_pos] = 1

    if n_cold:
        logger.info("leave-one-out: %d users with < 3 interactions kept train-only", n_cold)

    return SplitTriple(
        train=_subset(matrix, dest == 0, "train"),
        validation=_subset(matrix, dest == 1, "validation"),
        test=_subset(matrix, dest == 2, "test"),
        seed=seed,
        policy=policy,
    )


def sample_negatives(matrix: InteractionMatrix, user: int, n: int, seed: int,
                     exclude: tuple[InteractionMatrix, ...] = ()) -> np.ndarray:
    """Draw ``n`` distinct items the user never interacted with, deterministically.

    Positives from ``matrix`` and every partition in ``exclude`` are removed
    from the candidate pool. The generator is derived from (seed, user), so
    per-user draws are reproducible regardless of evaluation order.
    """
    positives = set(matrix.user_items(user).tolist())
    for other in exclude:
        positives.update(other.user_items(user).tolist())
    candidates = np.setdiff1d(np.arange(matrix.n_items),
                              np.fromiter(positives, dtype=np.int64, count=len(positives)))
    if candidates.size < n:
        raise ValueError(
            f"user {user}: only {candidates.size} negative candidates, {n} requested")
    rng = np.random.default_rng(np.random.SeedSequence((seed, user)))
    return rng.choice(candidates, size=n, replace=False)


def merge_matrices(a: InteractionMatrix, b: InteractionMatrix) -> InteractionMatrix:
    """Union of two disjoint partitions (e.g., train + validation for retraining)."""
    if (a.n_users, a.n_items) != (b.n_users, b.n_items):
        raise ValueError("matrices have different shapes")
    ts = None
    if a.timestamps is not None and b.timestamps is not None:
        ts = np.concatenate([a.timestamps, b.timestamps])
    tag = "+".join(t for t in (a.tag, b.tag) if t)
    return InteractionMatrix(
        a.n_users, a.n_items,
        np.concatenate([a.users, b.users]),
        np.concatenate([a.items, b.items]),
        np.concatenate([a.values, b.values]),
        ts,
        tag=tag,
    )


def save_split(split: SplitTriple, out_dir: str | Path,
               idmap: IdMap | None = None) -> None:
    """Write train/validation/test TSV files plus a JSON sidecar with the recipe."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in ("train", "validation", "test"):
        save_interactions(getattr(split, name), out_dir / f"{name}.tsv", idmap)
    sidecar = {
        "seed": split.seed,
        "policy": split.policy,
        "n_users": split.train.n_users,
        "n_items": split.train.n_items,
        "counts": {
            "train": split.train.n_entries,
            "validation": split.validation.n_entries,
            "test": split.test.n_entries,
        },
    }
    (out_dir / "split.json").write_text(json.dumps(sidecar, indent=1), encoding="utf-8")


def load_split(in_dir: str | Path) -> SplitTriple:
    in_dir = Path(in_dir)
    sidecar = json.loads((in_dir / "split.json").read_text(encoding="utf-8"))
    n_users, n_items = sidecar["n_users"], sidecar["n_items"]

    def _load(name: str) -> InteractionMatrix:
        rows = []
        for lineno, fields in _iter_rows(in_dir / f"{name}.tsv", "tsv"):
            rows.append(fields)
        users = np.array([int(r[0]) for r in rows], dtype=np.int64)
        items = np.array([int(r[1]) for r in rows], dtype=np.int64)
        values = np.array([float(r[2]) for r in rows], dtype=np.float64)
        has_ts = rows and len(rows[0]) >= 4
        ts = np.array([int(r[3]) for r in rows], dtype=np.int64) if has_ts else None
        return InteractionMatrix(n_users, n_items, users, items, values, ts, tag=name)

    return SplitTriple(
        train=_load("train"),
        validation=_load("validation"),
        test=_load("test"),
        seed=sidecar["seed"],
        policy=sidecar["policy"],
    )
