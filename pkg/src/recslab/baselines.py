"""Non-neural baseline recommenders plus the MF-BPR pretrainer.

Every model exposes ``score(user)`` returning one finite value per catalog
item (train items become -inf when exclusion is requested), so evaluation,
hyperparameter search and the studies can treat all algorithms uniformly.
Ties in rankings are broken by ascending item index everywhere.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import svds

from .dataio import InteractionMatrix
from .embed import EmbeddingPair, load_embeddings, save_embeddings

__all__ = [
    "ScoringModel",
    "SimilarityMatrix",
    "TopPopularModel",
    "KNNModel",
    "FactorModel",
    "SLIMModel",
    "SlimColumn",
    "fit_top_popular",
    "cosine_similarity_shrunk",
    "knn_scores",
    "p3alpha_similarity",
    "rp3beta_rerank",
    "fit_p3alpha",
    "fit_rp3beta",
    "fit_puresvd",
    "slim_fit_column",
    "fit_slim",
    "fit_ials",
    "ials_solve_user",
    "bpr_step",
    "fit_mf_bpr",
    "save_model",
    "load_model",
]


# ---------------------------------------------------------------------------
# Uniform scoring interface


class ScoringModel:
    """Base class: a fitted model scoring all N items for a given user."""

    algorithm: str = "base"

    def __init__(self, train: InteractionMatrix, params: dict | None = None):
        self.train = train
        self.params = dict(params or {})

    @property
    def n_items(self) -> int:
        return self.train.n_items

    def _raw_scores(self, user: int) -> np.ndarray:
        raise NotImplementedError

    def score(self, user: int, exclude_seen: bool = False) -> np.ndarray:
        scores = np.asarray(self._raw_scores(user), dtype=np.float64).reshape(-1)
        if exclude_seen:
            scores = scores.copy()
            scores[self.train.user_items(user)] = -np.inf
        return scores

    def score_items(self, user: int, items: np.ndarray) -> np.ndarray:
        """Scores restricted to a candidate subset (no exclusion applied)."""
        return self.score(user)[np.asarray(items, dtype=np.int64)]


@dataclass
class SimilarityMatrix:
    """Sparse item x item (or user x user) similarity, top-k truncated per row."""

    weights: sp.csr_matrix
    axis: str = "item"
    params: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.weights.shape


def _topk_per_row(matrix: sp.csr_matrix, k: int) -> sp.csr_matrix:
    """Keep the k largest entries of each row; ties go to the lower column index."""
    matrix = matrix.tocsr()
    indptr = [0]
    indices = []
    data = []
    for row in range(matrix.shape[0]):
        cols = matrix.indices[matrix.indptr[row]:matrix.indptr[row + 1]]
        vals = matrix.data[matrix.indptr[row]:matrix.indptr[row + 1]]
        if cols.size > k:
            order = np.lexsort((cols, -vals))[:k]
            cols, vals = cols[order], vals[order]
        keep = np.argsort(cols)
        indices.append(cols[keep])
        data.append(vals[keep])
        indptr.append(indptr[-1] + cols[keep].size)
    return sp.csr_matrix(
        (np.concatenate(data) if data else np.array([]),
         np.concatenate(indices) if indices else np.array([]),
         np.asarray(indptr)),
        shape=matrix.shape,
    )


class TopPopularModel(ScoringModel):
    """Non-personalized: every user gets the item interaction counts."""

    algorithm = "top_popular"

    def __init__(self, train: InteractionMatrix):
        super().__init__(train)
        self.counts = train.interaction_counts_per_item().astype(np.float64)

    def _raw_scores(self, user: int) -> np.ndarray:
        return self.counts


def fit_top_popular(train: InteractionMatrix) -> TopPopularModel:
    return TopPopularModel(train)


class KNNModel(ScoringModel):
    """Neighborhood model scoring through a similarity matrix."""

    def __init__(self, train: InteractionMatrix, similarity: SimilarityMatrix,
                 algorithm: str = "item_knn"):
        super().__init__(train, similarity.params)
        self.similarity = similarity
        self.algorithm = algorithm

    def _raw_scores(self, user: int) -> np.ndarray:
        return knn_scores(self.similarity, self.train, user)


def knn_scores(model: SimilarityMatrix, train: InteractionMatrix, user: int) -> np.ndarray:
    """Profile-weighted similarity sums.

    Item-based: scores = user profile row x similarity matrix.
    User-based: scores = similarity row of the user x train matrix.
    """
    csr = train.to_csr()
    if model.axis == "item":
        return (csr.getrow(user) @ model.weights.T).toarray().reshape(-1)
    return (model.weights.getrow(user) @ csr).toarray().reshape(-1)


def cosine_similarity_shrunk(train: InteractionMatrix, shrink: float, top_k: int,
                             axis: str = "item") -> SimilarityMatrix:
    """Cosine similarity with shrinkage h: s_ij = v_i.v_j / (|v_i||v_j| + h).

    Self-similarity is zeroed and each row keeps its top_k values. An all-zero
    vector yields zero similarities (the shrunk denominator never divides 0/0
    into NaN).
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    if shrink < 0:
        raise ValueError("shrink must be non-negative")
    csr = train.to_csr()
    vectors = csr if axis == "user" else csr.T.tocsr()
    gram = (vectors @ vectors.T).tocoo()
    norms = np.sqrt(np.asarray(vectors.multiply(vectors).sum(axis=1)).reshape(-1))
    off_diag = gram.row != gram.col
    rows, cols, data = gram.row[off_diag], gram.col[off_diag], gram.data[off_diag]
    denom = norms[rows] * norms[cols] + shrink
    values = np.where(denom > 0, data / np.where(denom > 0, denom, 1.0), 0.0)
    sim = sp.coo_matrix((values, (rows, cols)), shape=gram.shape).tocsr()
    sim.eliminate_zeros()
    return SimilarityMatrix(
        _topk_per_row(sim, top_k), axis=axis,
        params={"shrink": shrink, "top_k": top_k, "axis": axis},
    )


def p3alpha_similarity(train: InteractionMatrix, alpha: float, top_k: int) -> SimilarityMatrix:
    """Three-step random-walk similarity on the bipartite user-item graph.

    s_ij = sum_u P(i->u)^alpha * P(u->j)^alpha with row-stochastic transition
    probabilities; alpha exponentiates each probability before the product.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    csr = train.to_csr()
    user_deg = np.asarray(csr.sum(axis=1)).reshape(-1)
    item_deg = np.asarray(csr.sum(axis=0)).reshape(-1)
    with np.errstate(divide="ignore"):
        inv_user = np.where(user_deg > 0, 1.0 / user_deg, 0.0)
        inv_item = np.where(item_deg > 0, 1.0 / item_deg, 0.0)
    # P(u->i): rows users; P(i->u): rows items.
    p_ui = (sp.diags(inv_user) @ csr).tocsr()
    p_iu = (sp.diags(inv_item) @ csr.T).tocsr()
    if alpha != 1.0:
        # exponentiate stored entries only; absent transitions stay zero
        p_ui.data = p_ui.data ** alpha
        p_iu.data = p_iu.data ** alpha
    sim = (p_iu @ p_ui).tocsr()
    return SimilarityMatrix(
        _topk_per_row(sim, top_k), axis="item",
        params={"alpha": alpha, "top_k": top_k},
    )


def rp3beta_rerank(p3: SimilarityMatrix, item_popularity: np.ndarray,
                   beta: float) -> SimilarityMatrix:
    """Popularity rerank: s'_ij = s_ij / popularity(j)^beta.

    beta = 0 returns the matrix unchanged; a zero-popularity item's column is
    zeroed (it cannot be recommended anyway).
    """
    pop = np.asarray(item_popularity, dtype=np.float64).reshape(-1)
    if pop.shape[0] != p3.shape[1]:
        raise ValueError("popularity vector does not align with the item dimension")
    params = dict(p3.params, beta=beta)
    if beta == 0.0:
        return SimilarityMatrix(p3.weights.copy(), axis=p3.axis, params=params)
    with np.errstate(divide="ignore"):
        discount = np.where(pop > 0, pop ** (-beta), 0.0)
    reranked = (p3.weights @ sp.diags(discount)).tocsr()
    reranked.eliminate_zeros()
    return SimilarityMatrix(reranked, axis=p3.axis, params=params)


def fit_p3alpha(train: InteractionMatrix, alpha: float, top_k: int) -> KNNModel:
    return KNNModel(train, p3alpha_similarity(train, alpha, top_k), algorithm="p3alpha")


def fit_rp3beta(train: InteractionMatrix, alpha: float, beta: float, top_k: int) -> KNNModel:
    # Rerank before truncation so the top_k reflects the discounted weights.
    raw = p3alpha_similarity(train, alpha, top_k=train.n_items)
    reranked = rp3beta_rerank(raw, train.interaction_counts_per_item(), beta)
    truncated = SimilarityMatrix(_topk_per_row(reranked.weights, top_k), axis="item",
                                 params=dict(reranked.params, top_k=top_k))
    return KNNModel(train, truncated, algorithm="rp3beta")


class FactorModel(ScoringModel):
    """Latent factor model scored as user_factors @ item_factors.T."""

    def __init__(self, train: InteractionMatrix, user_factors: np.ndarray,
                 item_factors: np.ndarray, algorithm: str = "factor",
                 params: dict | None = None):
        super().__init__(train, params)
        self.user_factors = np.asarray(user_factors, dtype=np.float64)
        self.item_factors = np.asarray(item_factors, dtype=np.float64)
        self.algorithm = algorithm

    def _raw_scores(self, user: int) -> np.ndarray:
        return self.user_factors[user] @ self.item_factors.T

    def score_items(self, user: int, items: np.ndarray) -> np.ndarray:
        items = np.asarray(items, dtype=np.int64)
        return self.item_factors[items] @ self.user_factors[user]

    def embedding_pair(self) -> EmbeddingPair:
        return EmbeddingPair(self.user_factors, self.item_factors)


def fit_puresvd(train: InteractionMatrix, rank: int) -> FactorModel:
    """Truncated SVD of the interaction matrix; scores reconstruct R ~ U_k S_k V_k^T."""
    min_dim = min(train.n_users, train.n_items)
    if not 1 <= rank <= min_dim:
        raise ValueError(f"rank must be in [1, {min_dim}], got {rank}")
    csr = train.to_csr()
    if rank < min_dim:
        # Deterministic ARPACK start vector; singular vector signs cancel in the product.
        v0 = np.full(min(csr.shape), 1.0 / math.sqrt(min(csr.shape)))
        u, s, vt = svds(csr.astype(np.float64), k=rank, v0=v0)
        order = np.argsort(-s)
        u, s, vt = u[:, order], s[order], vt[order]
    else:
        u, s, vt = np.linalg.svd(csr.toarray(), full_matrices=False)
        u, s, vt = u[:, :rank], s[:rank], vt[:rank]
    return FactorModel(train, u * s, vt.T, algorithm="pure_svd", params={"rank": rank})


# ---------------------------------------------------------------------------
# SLIM elastic net


@dataclass
class SlimColumn:
    """One fitted SLIM weight column (sparse, non-negative, zero self-weight)."""

    item: int
    indices: np.ndarray
    weights: np.ndarray
    converged: bool
    n_iter: int

    def dense(self, n_items: int) -> np.ndarray:
        out = np.zeros(n_items)
        out[self.indices] = self.weights
        return out


def _slim_cd(gram: np.ndarray, target: int, l1: float, l2: float,
             max_iter: int, tol: float) -> tuple[np.ndarray, bool, int]:
    """Cyclic coordinate descent on 0.5|y - Aw|^2 + l1*sum(w) + 0.5*l2*|w|^2, w >= 0."""
    n = gram.shape[0]
    diag = np.diag(gram)
    c = gram[:, target].copy()
    w = np.zeros(n)
    gw = np.zeros(n)  # gram @ w, maintained incrementally
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        max_delta = 0.0
        for k in range(n):
            if k == target:
                continue
            denom = diag[k] + l2
            if denom <= 0.0:
                continue
            rho = c[k] - gw[k] + diag[k] * w[k]
            new_w = max(0.0, (rho - l1) / denom)
            delta = new_w - w[k]
            if delta != 0.0:
                gw += delta * gram[:, k]
                w[k] = new_w
                max_delta = max(max_delta, abs(delta))
        if max_delta < tol:
            converged = True
            break
    return w, converged, it


def slim_fit_column(train: InteractionMatrix, target_item: int, l1: float, l2: float,
                    top_k: int, max_iter: int = 200, tol: float = 1e-7) -> SlimColumn:
    """Elastic-net regression of one item column on all the others.

    Solved by cyclic coordinate descent with a non-negativity constraint and a
    hard zero on the self-weight. Non-convergence within ``max_iter`` returns
    the current iterate flagged ``converged=False``.
    """
    if l1 < 0 or l2 < 0:
        raise ValueError("l1 and l2 must be non-negative")
    csr = train.to_csr()
    gram = np.asarray((csr.T @ csr).todense(), dtype=np.float64)
    return _slim_column_from_gram(gram, target_item, l1, l2, top_k, max_iter, tol)


def _slim_column_from_gram(gram: np.ndarray, target_item: int, l1: float, l2: float,
                           top_k: int, max_iter: int, tol: float) -> SlimColumn:
    w, converged, n_iter = _slim_cd(gram, target_item, l1, l2, max_iter, tol)
    nz = np.flatnonzero(w)
    if nz.size > top_k:
        order = np.lexsort((nz, -w[nz]))[:top_k]
        nz = np.sort(nz[order])
    return SlimColumn(target_item, nz, w[nz], converged, n_iter)


class SLIMModel(ScoringModel):
    algorithm = "slim"

    def __init__(self, train: InteractionMatrix, weights: sp.csr_matrix,
                 params: dict | None = None):
        super().__init__(train, params)
        self.weights = weights  # item x item, column j = regression weights for item j

    def _raw_scores(self, user: int) -> np.ndarray:
        return (self.train.to_csr().getrow(user) @ self.weights).toarray().reshape(-1)


def fit_slim(train: InteractionMatrix, l1: float, l2: float, top_k: int,
             max_iter: int = 200, tol: float = 1e-7) -> SLIMModel:
    """Fit all SLIM columns (independent elastic-net problems sharing one Gram)."""
    csr = train.to_csr()
    gram = np.asarray((csr.T @ csr).todense(), dtype=np.float64)
    cols = []
    for j in range(train.n_items):
        col = _slim_column_from_gram(gram, j, l1, l2, top_k, max_iter, tol)
        cols.append(col)
    rows = np.concatenate([c.indices for c in cols]) if cols else np.array([])
    col_idx = np.concatenate([np.full(c.indices.size, c.item) for c in cols]) if cols else np.array([])
    data = np.concatenate([c.weights for c in cols]) if cols else np.array([])
    weights = sp.csr_matrix((data, (rows, col_idx)), shape=(train.n_items, train.n_items))
    return SLIMModel(train, weights,
                     params={"l1": l1, "l2": l2, "top_k": top_k})


# ---------------------------------------------------------------------------
# iALS


def ials_solve_user(item_factors: np.ndarray, observed_items: np.ndarray,
                    observed_values: np.ndarray, confidence_alpha: float,
                    reg: float) -> np.ndarray:
    """Closed-form user update: solve (Y^T C_u Y + reg I) x = Y^T C_u p_u.

    C_u is diagonal with c = 1 + alpha*r on observed items and 1 elsewhere;
    the preference p is 1 on observed items and 0 elsewhere, so only observed
    rows contribute to the right-hand side.
    """
    n_factors = item_factors.shape[1]
    gram = item_factors.T @ item_factors
    y_obs = item_factors[observed_items]
    conf = 1.0 + confidence_alpha * observed_values
    a = gram + (y_obs.T * (conf - 1.0)) @ y_obs + reg * np.eye(n_factors)
    b = y_obs.T @ conf
    return np.linalg.solve(a, b)


def fit_ials(train: InteractionMatrix, factors: int, confidence_alpha: float,
             reg: float, iterations: int, seed: int = 0) -> FactorModel:
    """Implicit-feedback ALS with confidence weighting c = 1 + alpha*r.

    Alternates exact least-squares updates of the user and item matrices;
    every full sweep is guaranteed not to increase the weighted objective.
    """
    if factors < 1:
        raise ValueError("factors must be >= 1")
    if reg <= 0:
        raise ValueError("reg must be > 0 (the normal equations are singular otherwise)")
    rng = np.random.default_rng(seed)
    x = rng.uniform(-0.01, 0.01, size=(train.n_users, factors))
    y = rng.uniform(-0.01, 0.01, size=(train.n_items, factors))
    csr = train.to_csr()
    csc = csr.tocsc()

    for _ in range(iterations):
        for u in range(train.n_users):
            items = csr.indices[csr.indptr[u]:csr.indptr[u + 1]]
            vals = csr.data[csr.indptr[u]:csr.indptr[u + 1]]
            x[u] = ials_solve_user(y, items, vals, confidence_alpha, reg)
        for i in range(train.n_items):
            users = csc.indices[csc.indptr[i]:csc.indptr[i + 1]]
            vals = csc.data[csc.indptr[i]:csc.indptr[i + 1]]
            y[i] = ials_solve_user(x, users, vals, confidence_alpha, reg)

    return FactorModel(train, x, y, algorithm="ials",
                       params={"factors": factors, "confidence_alpha": confidence_alpha,
                               "reg": reg, "iterations": iterations, "seed": seed})


# ---------------------------------------------------------------------------
# MF-BPR


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _bpr_update(P: np.ndarray, Q: np.ndarray, u: int, i: int, j: int,
                lr: float, reg: float) -> None:
    """One in-place ascent step on ln sigma(r_ui - r_uj) - reg * norms."""
    p_u = P[u]
    q_i = Q[i]
    q_j = Q[j]
    x = float(p_u @ (q_i - q_j))
    coeff = 1.0 - _sigmoid(x)
    grad_p = coeff * (q_i - q_j) - 2.0 * reg * p_u
    grad_qi = coeff * p_u - 2.0 * reg * q_i
    grad_qj = -coeff * p_u - 2.0 * reg * q_j
    P[u] = p_u + lr * grad_p
    Q[i] = q_i + lr * grad_qi
    Q[j] = q_j + lr * grad_qj


def bpr_step(pair: EmbeddingPair, u: int, i: int, j: int, lr: float,
             reg: float) -> EmbeddingPair:
    """Functional single-triple update; the training loop uses the same math in place."""
    out = pair.copy()
    _bpr_update(out.P, out.Q, u, i, j, lr, reg)
    return out


def bpr_triple_objective(pair: EmbeddingPair, u: int, i: int, j: int, reg: float) -> float:
    """The per-triple objective whose exact gradient the update step follows."""
    x = float(pair.P[u] @ (pair.Q[i] - pair.Q[j]))
    penalty = reg * (pair.P[u] @ pair.P[u] + pair.Q[i] @ pair.Q[i] + pair.Q[j] @ pair.Q[j])
    return math.log(_sigmoid(x)) - penalty


def fit_mf_bpr(train: InteractionMatrix, factors: int, epochs: int, lr: float,
               reg: float, seed: int = 0, init_scale: float = 0.01) -> EmbeddingPair:
    """Pretrain embeddings with pairwise ranking SGD.

    Negatives are drawn uniformly from each user's non-interacted items and
    resampled every epoch. Deterministic given the seed (single-threaded).
    """
    rng = np.random.default_rng(seed)
    P = rng.uniform(-init_scale, init_scale, size=(train.n_users, factors))
    Q = rng.uniform(-init_scale, init_scale, size=(train.n_items, factors))
    users = train.users
    items = train.items
    csr = train.to_csr()
    n_entries = users.size

    for _ in range(epochs):
        order = rng.permutation(n_entries)
        negatives = rng.integers(0, train.n_items, size=n_entries)
        for idx in order:
            u = int(users[idx])
            i = int(items[idx])
            j = int(negatives[idx])
            positives = csr.indices[csr.indptr[u]:csr.indptr[u + 1]]
            while np.searchsorted(positives, j) < positives.size and \
                    positives[np.searchsorted(positives, j)] == j:
                j = int(rng.integers(0, train.n_items))
            _bpr_update(P, Q, u, i, j, lr, reg)

    return EmbeddingPair(P, Q)


def dot_product_model(train: InteractionMatrix, pair: EmbeddingPair,
                      algorithm: str = "mf_bpr") -> FactorModel:
    """Wrap an embedding pair as a plain dot-product scorer."""
    return FactorModel(train, pair.P, pair.Q, algorithm=algorithm)


# ---------------------------------------------------------------------------
# Checkpoints


def save_model(model: ScoringModel, prefix: str | Path) -> None:
    """Persist a fitted model: EMB1 binary for factor models, triplet TSV for
    similarity-shaped models, plus a JSON metadata sidecar either way."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    meta = {"algorithm": model.algorithm, "params": model.params,
            "n_users": model.train.n_users, "n_items": model.train.n_items}
    if isinstance(model, FactorModel):
        save_embeddings(model.embedding_pair(), prefix.with_suffix(".emb"))
        meta["kind"] = "factor"
    elif isinstance(model, (KNNModel, SLIMModel, TopPopularModel)):
        if isinstance(model, KNNModel):
            weights = model.similarity.weights.tocoo()
            meta["kind"] = "knn"
            meta["axis"] = model.similarity.axis
        elif isinstance(model, SLIMModel):
            weights = model.weights.tocoo()
            meta["kind"] = "slim"
        else:
            weights = sp.coo_matrix(model.counts.reshape(1, -1))
            meta["kind"] = "top_popular"
        with open(prefix.with_suffix(".sim.tsv"), "w", encoding="utf-8") as fh:
            for r, c, v in zip(weights.row, weights.col, weights.data):
                fh.write(f"{r}\t{c}\t{float(v)!r}\n")
        meta["shape"] = list(weights.shape)
    else:
        raise TypeError(f"cannot checkpoint model type {type(model).__name__}")
    prefix.with_suffix(".json").write_text(json.dumps(meta, indent=1), encoding="utf-8")


def load_model(prefix: str | Path, train: InteractionMatrix) -> ScoringModel:
    prefix = Path(prefix)
    meta = json.loads(prefix.with_suffix(".json").read_text(encoding="utf-8"))
    kind = meta["kind"]
    if kind == "factor":
        pair = load_embeddings(prefix.with_suffix(".emb"))
        return FactorModel(train, pair.P, pair.Q, algorithm=meta["algorithm"],
                           params=meta["params"])
    rows, cols, vals = [], [], []
    with open(prefix.with_suffix(".sim.tsv"), "r", encoding="utf-8") as fh:
        for line in fh:
            r, c, v = line.split("\t")
            rows.append(int(r))
            cols.append(int(c))
            vals.append(float(v))
    shape = tuple(meta["shape"])
    weights = sp.csr_matrix((vals, (rows, cols)), shape=shape)
    if kind == "knn":
        sim = SimilarityMatrix(weights, axis=meta["axis"], params=meta["params"])
        return KNNModel(train, sim, algorithm=meta["algorithm"])
    if kind == "slim":
        return SLIMModel(train, weights, params=meta["params"])
    if kind == "top_popular":
        model = TopPopularModel(train)
        model.counts = np.asarray(weights.todense()).reshape(-1)
        return model
    raise ValueError(f"unknown checkpoint kind {kind!r}")
