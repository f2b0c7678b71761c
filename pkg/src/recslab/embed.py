"""Latent factor embeddings, outer-product interaction maps and factor permutations.

The interaction map of a (user, item) pair is the K x K outer product of their
embedding vectors. Its main diagonal is the element-wise product (whose sum is
the dot-product prediction); the off-diagonal cells are the cross-factor
correlations. Masks select one of those two components, or keep the full map.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

__all__ = [
    "MaskMode",
    "EmbeddingPair",
    "InteractionMap",
    "FactorPermutation",
    "dot_prediction",
    "outer_product",
    "mask_matrix",
    "apply_mask",
    "permute_factors",
    "save_embeddings",
    "load_embeddings",
]

EMBEDDING_MAGIC = b"EMB1"


class MaskMode(Enum):
    """Which component of a K x K interaction map is kept."""

    FULL = "full"
    ELEMENT_WISE = "element-wise"
    CORRELATIONS = "correlations"

    @classmethod
    def parse(cls, name: str) -> "MaskMode":
        for mode in cls:
            if name in (mode.value, mode.name, mode.name.lower()):
                return mode
        raise ValueError(f"unknown mask mode {name!r}; expected one of "
                         f"{[m.value for m in cls]}")


@dataclass
class EmbeddingPair:
    """User embeddings P (M x K) and item embeddings Q (N x K)."""

    P: np.ndarray
    Q: np.ndarray

    def __post_init__(self):
        self.P = np.ascontiguousarray(self.P, dtype=np.float64)
        self.Q = np.ascontiguousarray(self.Q, dtype=np.float64)
        if self.P.ndim != 2 or self.Q.ndim != 2:
            raise ValueError("P and Q must be 2-D matrices")
        if self.P.shape[1] != self.Q.shape[1]:
            raise ValueError(
                f"P and Q disagree on the latent dimension: "
                f"{self.P.shape[1]} vs {self.Q.shape[1]}")
        if not (np.isfinite(self.P).all() and np.isfinite(self.Q).all()):
            raise ValueError("embeddings contain non-finite values")

    @property
    def n_users(self) -> int:
        return self.P.shape[0]

    @property
    def n_items(self) -> int:
        return self.Q.shape[0]

    @property
    def k(self) -> int:
        return self.P.shape[1]

    def copy(self) -> "EmbeddingPair":
        return EmbeddingPair(self.P.copy(), self.Q.copy())


@dataclass
class InteractionMap:
    """Outer-product map E of one (user, item) pair, E[x, y] = p_x * q_y."""

    values: np.ndarray
    user: int = -1
    item: int = -1

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise ValueError("interaction map must be square")

    @property
    def k(self) -> int:
        return self.values.shape[0]


@dataclass
class FactorPermutation:
    """A bijection on the latent factor indices {0..K-1}."""

    perm: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.perm = np.asarray(self.perm, dtype=np.int64)
        k = self.perm.shape[0]
        if self.perm.ndim != 1 or not np.array_equal(np.sort(self.perm), np.arange(k)):
            raise ValueError("perm is not a bijection on {0..K-1}")

    @classmethod
    def random(cls, k: int, seed: int) -> "FactorPermutation":
        rng = np.random.default_rng(seed)
        return cls(rng.permutation(k), seed=seed)

    @classmethod
    def identity(cls, k: int) -> "FactorPermutation":
        return cls(np.arange(k), seed=0)

    def inverse(self) -> "FactorPermutation":
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(self.perm.shape[0])
        return FactorPermutation(inv, seed=self.seed)


def dot_prediction(p: np.ndarray, q: np.ndarray) -> float:
    """Predicted relevance: the dot product of two length-K factor vectors."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError(f"vector length mismatch: {p.shape} vs {q.shape}")
    return float(np.dot(p, q))


def outer_product(p: np.ndarray, q: np.ndarray, user: int = -1, item: int = -1) -> InteractionMap:
    """Interaction map E = p q^T, so E[x, y] = p[x] * q[y]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError(f"vector length mismatch: {p.shape} vs {q.shape}")
    return InteractionMap(np.outer(p, q), user=user, item=item)


def mask_matrix(k: int, mode: MaskMode) -> np.ndarray:
    """Multiplicative 0/1 mask selecting the cells a mode keeps.

    The same mask serves inference-time masking (applied to a trained model's
    input) and training-time masking (applied to every map seen during
    training), so both code paths share one tested definition.
    """
    if mode is MaskMode.FULL:
        return np.ones((k, k), dtype=np.float64)
    if mode is MaskMode.ELEMENT_WISE:
        return np.eye(k, dtype=np.float64)
    if mode is MaskMode.CORRELATIONS:
        return np.ones((k, k), dtype=np.float64) - np.eye(k, dtype=np.float64)
    raise ValueError(f"unknown mask mode {mode!r}")


def apply_mask(imap: InteractionMap, mode: MaskMode) -> InteractionMap:
    """Zero the cells outside the mode's support; FULL is the identity."""
    if mode is MaskMode.FULL:
        return InteractionMap(imap.values.copy(), user=imap.user, item=imap.item)
    masked = imap.values * mask_matrix(imap.k, mode)
    return InteractionMap(masked, user=imap.user, item=imap.item)


def permute_factors(pair: EmbeddingPair, perm: FactorPermutation) -> EmbeddingPair:
    """Reorder the latent factor columns of P and Q by the same permutation.

    Applying one permutation consistently to both matrices leaves every
    dot-product prediction unchanged (the sum in the prediction is over the
    same terms in a different order), so the factor model stays equivalent
    while every interaction map changes.
    """
    if perm.perm.shape[0] != pair.k:
        raise ValueError(
            f"permutation is over {perm.perm.shape[0]} factors, embeddings have {pair.k}")
    return EmbeddingPair(pair.P[:, perm.perm], pair.Q[:, perm.perm])


def save_embeddings(pair: EmbeddingPair, path: str | Path) -> None:
    """Write the documented binary checkpoint.

    Layout: magic bytes ``EMB1``, then M, N, K as 64-bit little-endian
    unsigned integers, then P and Q as row-major little-endian float64.
    """
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<QQQ", pair.n_users, pair.n_items, pair.k))
        fh.write(pair.P.astype("<f8").tobytes(order="C"))
        fh.write(pair.Q.astype("<f8").tobytes(order="C"))


def load_embeddings(path: str | Path) -> EmbeddingPair:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != EMBEDDING_MAGIC:
            raise ValueError(f"{path}: not an embedding checkpoint (bad magic {magic!r})")
        m, n, k = struct.unpack("<QQQ", fh.read(24))
        p = np.frombuffer(fh.read(8 * m * k), dtype="<f8").reshape(m, k)
        q = np.frombuffer(fh.read(8 * n * k), dtype="<f8").reshape(n, k)
    return EmbeddingPair(p.copy(), q.copy())
