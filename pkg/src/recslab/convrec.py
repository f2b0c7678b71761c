"""Convolutional recommender over masked outer-product interaction maps.

A small CNN tower (stacked ReLU conv layers ending at 1x1 spatial size, then a
scalar linear head) scores each (user, item) pair from the masked K x K outer
product of their embeddings. Embeddings are either frozen (pretrained) or
trained jointly with the tower. Training maximizes the pairwise ranking
objective ln sigmoid(score(u,i) - score(u,j)) minus L2 penalties, by plain
SGD in double precision, so analytic gradients can be checked against finite
differences to tight tolerance.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import InteractionMatrix, SplitTriple
from .embed import EMBEDDING_MAGIC, EmbeddingPair, MaskMode, mask_matrix

__all__ = [
    "ConfigError",
    "ConvTowerConfig",
    "TrainConfig",
    "ConvRecModel",
    "TrainingTrace",
    "forward",
    "backward",
    "train",
    "save_conv_model",
    "load_conv_model",
]

CONV_MAGIC = b"CNV1"


class ConfigError(ValueError):
    """Tower geometry incompatible with the embedding size."""


@dataclass
class ConvTowerConfig:
    """Geometry and initialization of the conv tower.

    ``channels`` has one entry per layer. Each layer applies a
    kernel_size x kernel_size convolution with the given stride followed by
    ReLU; the spatial size must reach exactly 1x1 at the last layer, where a
    linear head of width ``channels[-1]`` produces the scalar score.
    """

    channels: tuple[int, ...] = (8, 8, 8)
    kernel_size: int = 2
    stride: int = 2
    init_scale: float | None = None  # None: 1/sqrt(fan_in) per layer
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if not self.channels or any(c < 1 for c in self.channels):
            raise ConfigError("channels must be a non-empty tuple of positive ints")
        if self.kernel_size < 1 or self.stride < 1:
            raise ConfigError("kernel_size and stride must be >= 1")

    def spatial_sizes(self, k: int) -> list[int]:
        """Output size after each layer, starting from a K x K map."""
        sizes = []
        size = k
        for depth in range(len(self.channels)):
            size = (size - self.kernel_size) // self.stride + 1
            if size < 1:
                raise ConfigError(
                    f"layer {depth}: spatial size drops below 1 for K={k} "
                    f"(kernel {self.kernel_size}, stride {self.stride})")
            sizes.append(size)
        if sizes[-1] != 1:
            raise ConfigError(
                f"tower must end at spatial size 1x1 before the head; "
                f"got {sizes[-1]} for K={k} with {len(self.channels)} layers")
        return sizes

    def to_dict(self) -> dict:
        return {"channels": list(self.channels), "kernel_size": self.kernel_size,
                "stride": self.stride, "init_scale": self.init_scale, "seed": self.seed}


@dataclass
class TrainConfig:
    """SGD and early-stopping settings for pairwise ranking training."""

    learning_rate: float = 0.01
    regularization: float | dict = 0.0
    batch_size: int = 128
    max_epochs: int = 50
    eval_interval: int = 1  # epochs between validation evaluations
    patience: int = 5       # consecutive non-improving evaluations before stopping
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")

    def reg(self, group: str) -> float:
        if isinstance(self.regularization, dict):
            return float(self.regularization.get(group, 0.0))
        return float(self.regularization)


def _im2col(x: np.ndarray, k: int, s: int):
    """B x C x H x W -> (B x P x (C*k*k) patch matrix, out_h, out_w)."""
    windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    windows = windows[:, :, ::s, ::s, :, :]
    b, c, out_h, out_w = windows.shape[:4]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b, out_h * out_w, c * k * k)
    return np.ascontiguousarray(cols), out_h, out_w


def _col2im(dcols: np.ndarray, x_shape, k: int, s: int, out_h: int, out_w: int):
    """Scatter-add patch gradients back to the input layout."""
    b, c, h, w = x_shape
    dx = np.zeros((b, c, h, w))
    dcols = dcols.reshape(b, out_h, out_w, c, k, k)
    for row in range(out_h):
        for col in range(out_w):
            dx[:, :, row * s:row * s + k, col * s:col * s + k] += dcols[:, row, col]
    return dx


class ConvRecModel:
    """Conv tower over interaction maps with frozen or learnable embeddings."""

    def __init__(self, pair: EmbeddingPair, config: ConvTowerConfig,
                 embedding_mode: str = "frozen", train: InteractionMatrix | None = None,
                 inference_mask: MaskMode = MaskMode.FULL):
        if embedding_mode not in ("frozen", "learnable"):
            raise ValueError("embedding_mode must be 'frozen' or 'learnable'")
        config.spatial_sizes(pair.k)  # geometry errors surface at build time
        self.pair = pair
        self.config = config
        self.embedding_mode = embedding_mode
        self.train_matrix = train
        self.inference_mask = inference_mask
        self.train_mask_used: MaskMode | None = None
        self.algorithm = "convrec"

        rng = np.random.default_rng(config.seed)
        k = config.kernel_size
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        in_channels = 1
        for out_channels in config.channels:
            fan_in = in_channels * k * k
            scale = config.init_scale if config.init_scale is not None \
                else 1.0 / math.sqrt(fan_in)
            self.weights.append(rng.uniform(-scale, scale,
                                            size=(out_channels, in_channels, k, k)))
            self.biases.append(np.zeros(out_channels))
            in_channels = out_channels
        head_scale = config.init_scale if config.init_scale is not None \
            else 1.0 / math.sqrt(in_channels)
        self.head_w = rng.uniform(-head_scale, head_scale, size=in_channels)
        self.head_b = 0.0

    @property
    def k(self) -> int:
        return self.pair.k

    # -- parameter snapshots -------------------------------------------------

    def parameters_copy(self) -> dict:
        return {
            "weights": [w.copy() for w in self.weights],
            "biases": [b.copy() for b in self.biases],
            "head_w": self.head_w.copy(),
            "head_b": self.head_b,
            "P": self.pair.P.copy(),
            "Q": self.pair.Q.copy(),
        }

    def load_parameters(self, params: dict) -> None:
        self.weights = [w.copy() for w in params["weights"]]
        self.biases = [b.copy() for b in params["biases"]]
        self.head_w = params["head_w"].copy()
        self.head_b = params["head_b"]
        self.pair = EmbeddingPair(params["P"].copy(), params["Q"].copy())

    # -- forward -------------------------------------------------------------

    def _masked_maps(self, users: np.ndarray, items: np.ndarray,
                     mask: MaskMode) -> np.ndarray:
        maps = np.einsum("bk,bl->bkl", self.pair.P[users], self.pair.Q[items])
        if mask is not MaskMode.FULL:
            maps = maps * mask_matrix(self.k, mask)
        return maps

    def forward_from_maps(self, maps: np.ndarray, keep_cache: bool = False):
        """Score a batch of (already masked) K x K maps."""
        x = maps.reshape(maps.shape[0], 1, self.k, self.k)
        cache = {"inputs": [], "cols": [], "pre": [], "shapes": []}
        for w, b in zip(self.weights, self.biases):
            cache["inputs"].append(x)
            cache["shapes"].append(x.shape)
            cols, out_h, out_w = _im2col(x, self.config.kernel_size, self.config.stride)
            cache["cols"].append((cols, out_h, out_w))
            w_flat = w.reshape(w.shape[0], -1)
            pre = cols @ w_flat.T + b  # B x P x C_out
            cache["pre"].append(pre)
            x = np.maximum(pre, 0.0).transpose(0, 2, 1).reshape(
                x.shape[0], w.shape[0], out_h, out_w)
        features = x.reshape(x.shape[0], -1)  # B x C_last (1x1 spatial)
        cache["features"] = features
        scores = features @ self.head_w + self.head_b
        if keep_cache:
            return scores, cache
        return scores

    def score_pairs(self, users: np.ndarray, items: np.ndarray,
                    mask: MaskMode | None = None) -> np.ndarray:
        mask = self.inference_mask if mask is None else mask
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        return self.forward_from_maps(self._masked_maps(users, items, mask))

    def score_items(self, user: int, items: np.ndarray) -> np.ndarray:
        items = np.asarray(items, dtype=np.int64)
        users = np.full(items.shape[0], user, dtype=np.int64)
        return self.score_pairs(users, items)

    def score(self, user: int, exclude_seen: bool = False) -> np.ndarray:
        scores = self.score_items(user, np.arange(self.pair.n_items))
        if exclude_seen:
            if self.train_matrix is None:
                raise ValueError("no train matrix attached; cannot exclude seen items")
            scores = scores.copy()
            scores[self.train_matrix.user_items(user)] = -np.inf
        return scores

    def with_inference_mask(self, mask: MaskMode) -> "ConvRecModel":
        """Shared-parameter view of the model scored under a different mask."""
        view = object.__new__(ConvRecModel)
        view.__dict__.update(self.__dict__)
        view.inference_mask = mask
        return view

    # -- backward ------------------------------------------------------------

    def _backward_from_cache(self, cache: dict, dscores: np.ndarray):
        """Gradients of sum(dscores * scores) w.r.t. parameters and input maps."""
        features = cache["features"]
        d_head_w = dscores @ features
        d_head_b = float(dscores.sum())
        dx_flat = np.outer(dscores, self.head_w)  # B x C_last
        batch = features.shape[0]
        dx = dx_flat.reshape(batch, -1, 1, 1)
        d_weights = [None] * len(self.weights)
        d_biases = [None] * len(self.biases)
        for layer in range(len(self.weights) - 1, -1, -1):
            cols, out_h, out_w = cache["cols"][layer]
            pre = cache["pre"][layer]
            dpre = dx.reshape(batch, -1, out_h * out_w).transpose(0, 2, 1)
            dpre = dpre * (pre > 0.0)
            w = self.weights[layer]
            d_weights[layer] = np.einsum("bpc,bpf->cf", dpre, cols).reshape(w.shape)
            d_biases[layer] = dpre.sum(axis=(0, 1))
            dcols = dpre @ w.reshape(w.shape[0], -1)
            dx = _col2im(dcols, cache["shapes"][layer], self.config.kernel_size,
                         self.config.stride, out_h, out_w)
        d_maps = dx.reshape(batch, self.k, self.k)
        return d_weights, d_biases, d_head_w, d_head_b, d_maps


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def forward(model: ConvRecModel, u: int, i: int,
            inference_mask: MaskMode = MaskMode.FULL) -> float:
    """Scalar score of one (user, item) pair under the given mask."""
    return float(model.score_pairs(np.array([u]), np.array([i]), inference_mask)[0])


def triple_objective(model: ConvRecModel, u: int, i: int, j: int,
                     train_mask: MaskMode, cfg: TrainConfig) -> float:
    """Per-triple objective: ln sigmoid(s_ui - s_uj) minus the L2 penalties.

    Penalties cover conv weights, the head weights and, in learnable mode,
    the three embedding rows of the triple; biases are not regularized.
    """
    s = model.score_pairs(np.array([u, u]), np.array([i, j]), train_mask)
    margin = float(s[0] - s[1])
    value = float(np.log(_sigmoid(np.array([margin]))[0]))
    value -= cfg.reg("conv") * sum(float((w ** 2).sum()) for w in model.weights)
    value -= cfg.reg("head") * float(model.head_w @ model.head_w)
    if model.embedding_mode == "learnable":
        p_u, q_i, q_j = model.pair.P[u], model.pair.Q[i], model.pair.Q[j]
        value -= cfg.reg("emb") * float(p_u @ p_u + q_i @ q_i + q_j @ q_j)
    return value


def backward(model: ConvRecModel, triple: tuple[int, int, int],
             train_mask: MaskMode, cfg: TrainConfig | None = None) -> dict:
    """Exact gradients of the per-triple objective for all trainable parameters.

    Frozen mode reports identically-zero embedding gradients; masked-out map
    cells propagate zero gradient to the embeddings by construction.
    """
    cfg = cfg or TrainConfig()
    u, i, j = triple
    users = np.array([u, u], dtype=np.int64)
    items = np.array([i, j], dtype=np.int64)
    maps = model._masked_maps(users, items, train_mask)
    scores, cache = model.forward_from_maps(maps, keep_cache=True)
    coeff = 1.0 - float(_sigmoid(np.array([scores[0] - scores[1]]))[0])
    dscores = np.array([coeff, -coeff])
    d_w, d_b, d_head_w, d_head_b, d_maps = model._backward_from_cache(cache, dscores)

    reg_conv = cfg.reg("conv")
    reg_head = cfg.reg("head")
    grads = {
        "conv_w": [dw - 2.0 * reg_conv * w for dw, w in zip(d_w, model.weights)],
        "conv_b": d_b,
        "head_w": d_head_w - 2.0 * reg_head * model.head_w,
        "head_b": d_head_b,
    }
    if model.embedding_mode == "learnable":
        mask = mask_matrix(model.k, train_mask)
        gi = d_maps[0] * mask
        gj = d_maps[1] * mask
        reg_emb = cfg.reg("emb")
        grads["p_u"] = gi @ model.pair.Q[i] + gj @ model.pair.Q[j] \
            - 2.0 * reg_emb * model.pair.P[u]
        grads["q_i"] = gi.T @ model.pair.P[u] - 2.0 * reg_emb * model.pair.Q[i]
        grads["q_j"] = gj.T @ model.pair.P[u] - 2.0 * reg_emb * model.pair.Q[j]
    else:
        grads["p_u"] = np.zeros(model.k)
        grads["q_i"] = np.zeros(model.k)
        grads["q_j"] = np.zeros(model.k)
    return grads


@dataclass
class TrainingTrace:
    """Per-evaluation metric history: epoch, eval_step, metric, best_so_far."""

    rows: list = field(default_factory=list)
    stopped_early: bool = False
    best_metric: float = -math.inf
    best_eval_step: int = 0

    def record(self, epoch: int, eval_step: int, metric: float) -> None:
        if metric > self.best_metric:
            self.best_metric = metric
            self.best_eval_step = eval_step
        self.rows.append((epoch, eval_step, metric, self.best_metric))

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "eval_step", "metric", "best_so_far"])
            for row in self.rows:
                writer.writerow([row[0], row[1], repr(float(row[2])), repr(float(row[3]))])


def _sample_epoch_triples(train: InteractionMatrix, rng: np.random.Generator):
    """Shuffled (u, i, j) triples: one uniform negative per positive, resampled
    each epoch by rejection against the user's positives."""
    order = rng.permutation(train.n_entries)
    users = train.users[order]
    items = train.items[order]
    negatives = rng.integers(0, train.n_items, size=train.n_entries)
    csr = train.to_csr()
    for idx in range(train.n_entries):
        u = int(users[idx])
        positives = csr.indices[csr.indptr[u]:csr.indptr[u + 1]]
        j = int(negatives[idx])
        while positives.searchsorted(j) < positives.size and \
                positives[positives.searchsorted(j)] == j:
            j = int(rng.integers(0, train.n_items))
        negatives[idx] = j
    return users, items, negatives


def train(model: ConvRecModel, split: SplitTriple, cfg: TrainConfig,
          train_mask: MaskMode, evaluator) -> tuple[ConvRecModel, TrainingTrace]:
    """Pairwise-ranking SGD with early stopping on a validation callback.

    ``evaluator(model)`` returns the validation metric to maximize. Training
    stops after ``cfg.patience`` consecutive non-improving evaluations (or at
    ``cfg.max_epochs``) and the best-evaluation checkpoint is restored before
    returning. Deterministic given ``cfg.seed`` (single-threaded).
    """
    rng = np.random.default_rng(cfg.seed)
    model.train_mask_used = train_mask
    if model.train_matrix is None:
        model.train_matrix = split.train
    frozen_embeddings = model.embedding_mode == "frozen"
    lr = cfg.learning_rate
    reg_conv, reg_head, reg_emb = cfg.reg("conv"), cfg.reg("head"), cfg.reg("emb")
    mask = mask_matrix(model.k, train_mask)

    trace = TrainingTrace()
    best_params = model.parameters_copy()
    non_improving = 0
    eval_step = 0

    for epoch in range(1, cfg.max_epochs + 1):
        users, items, negatives = _sample_epoch_triples(split.train, rng)
        for start in range(0, users.size, cfg.batch_size):
            u_b = users[start:start + cfg.batch_size]
            i_b = items[start:start + cfg.batch_size]
            j_b = negatives[start:start + cfg.batch_size]
            n_b = u_b.size

            batch_users = np.concatenate([u_b, u_b])
            batch_items = np.concatenate([i_b, j_b])
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                maps = model._masked_maps(batch_users, batch_items, train_mask)
                scores, cache = model.forward_from_maps(maps, keep_cache=True)
                margins = scores[:n_b] - scores[n_b:]
                loss = -float(np.mean(np.log(_sigmoid(margins))))
            if not math.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch} "
                    f"(learning_rate={cfg.learning_rate}); reduce the learning rate")

            coeff = (1.0 - _sigmoid(margins)) / n_b
            dscores = np.concatenate([coeff, -coeff])
            d_w, d_b, d_head_w, d_head_b, d_maps = \
                model._backward_from_cache(cache, dscores)

            for layer in range(len(model.weights)):
                model.weights[layer] += lr * (d_w[layer]
                                              - 2.0 * reg_conv * model.weights[layer])
                model.biases[layer] += lr * d_b[layer]
            model.head_w += lr * (d_head_w - 2.0 * reg_head * model.head_w)
            model.head_b += lr * d_head_b

            if not frozen_embeddings:
                d_maps = d_maps * mask
                d_pos = d_maps[:n_b]
                d_neg = d_maps[n_b:]
                P, Q = model.pair.P, model.pair.Q
                dP = np.zeros_like(P)
                dQ = np.zeros_like(Q)
                np.add.at(dP, u_b,
                          np.einsum("bkl,bl->bk", d_pos, Q[i_b])
                          + np.einsum("bkl,bl->bk", d_neg, Q[j_b])
                          - 2.0 * reg_emb / n_b * P[u_b])
                np.add.at(dQ, i_b, np.einsum("bkl,bk->bl", d_pos, P[u_b])
                          - 2.0 * reg_emb / n_b * Q[i_b])
                np.add.at(dQ, j_b, np.einsum("bkl,bk->bl", d_neg, P[u_b])
                          - 2.0 * reg_emb / n_b * Q[j_b])
                P += lr * dP
                Q += lr * dQ

        if epoch % cfg.eval_interval == 0:
            metric = float(evaluator(model))
            eval_step += 1
            improved = metric > trace.best_metric
            trace.record(epoch, eval_step, metric)
            if improved:
                best_params = model.parameters_copy()
                non_improving = 0
            else:
                non_improving += 1
                if non_improving >= cfg.patience:
                    trace.stopped_early = True
                    break

    model.load_parameters(best_params)
    return model, trace


# ---------------------------------------------------------------------------
# Checkpointing


def save_conv_model(model: ConvRecModel, prefix: str | Path) -> None:
    """Binary checkpoint (embeddings + layer tensors, little-endian) + JSON sidecar."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    with open(prefix.with_suffix(".cnv"), "wb") as fh:
        fh.write(CONV_MAGIC)
        fh.write(struct.pack("<Q", len(model.weights)))
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<QQQ", model.pair.n_users, model.pair.n_items, model.pair.k))
        fh.write(model.pair.P.astype("<f8").tobytes(order="C"))
        fh.write(model.pair.Q.astype("<f8").tobytes(order="C"))
        for w, b in zip(model.weights, model.biases):
            fh.write(struct.pack("<QQQQ", *w.shape))
            fh.write(w.astype("<f8").tobytes(order="C"))
            fh.write(struct.pack("<Q", b.shape[0]))
            fh.write(b.astype("<f8").tobytes(order="C"))
        fh.write(struct.pack("<Q", model.head_w.shape[0]))
        fh.write(model.head_w.astype("<f8").tobytes(order="C"))
        fh.write(struct.pack("<d", model.head_b))
    sidecar = {
        "tower": model.config.to_dict(),
        "embedding_mode": model.embedding_mode,
        "inference_mask": model.inference_mask.value,
        "train_mask_used": None if model.train_mask_used is None
        else model.train_mask_used.value,
    }
    prefix.with_suffix(".json").write_text(json.dumps(sidecar, indent=1), encoding="utf-8")


def load_conv_model(prefix: str | Path,
                    train: InteractionMatrix | None = None) -> ConvRecModel:
    prefix = Path(prefix)
    sidecar = json.loads(prefix.with_suffix(".json").read_text(encoding="utf-8"))
    with open(prefix.with_suffix(".cnv"), "rb") as fh:
        if fh.read(4) != CONV_MAGIC:
            raise ValueError(f"{prefix}: not a conv model checkpoint")
        (n_layers,) = struct.unpack("<Q", fh.read(8))
        if fh.read(4) != EMBEDDING_MAGIC:
            raise ValueError(f"{prefix}: embedded embedding block is corrupt")
        m, n, k = struct.unpack("<QQQ", fh.read(24))
        P = np.frombuffer(fh.read(8 * m * k), dtype="<f8").reshape(m, k).copy()
        Q = np.frombuffer(fh.read(8 * n * k), dtype="<f8").reshape(n, k).copy()
        weights, biases = [], []
        for _ in range(n_layers):
            shape = struct.unpack("<QQQQ", fh.read(32))
            count = int(np.prod(shape))
            weights.append(np.frombuffer(fh.read(8 * count), dtype="<f8")
                           .reshape(shape).copy())
            (blen,) = struct.unpack("<Q", fh.read(8))
            biases.append(np.frombuffer(fh.read(8 * blen), dtype="<f8").copy())
        (hlen,) = struct.unpack("<Q", fh.read(8))
        head_w = np.frombuffer(fh.read(8 * hlen), dtype="<f8").copy()
        (head_b,) = struct.unpack("<d", fh.read(8))

    config = ConvTowerConfig(
        channels=tuple(sidecar["tower"]["channels"]),
        kernel_size=sidecar["tower"]["kernel_size"],
        stride=sidecar["tower"]["stride"],
        init_scale=sidecar["tower"]["init_scale"],
        seed=sidecar["tower"]["seed"],
    )
    model = ConvRecModel(EmbeddingPair(P, Q), config,
                         embedding_mode=sidecar["embedding_mode"], train=train,
                         inference_mask=MaskMode.parse(sidecar["inference_mask"]))
    model.weights = weights
    model.biases = biases
    model.head_w = head_w
    model.head_b = head_b
    if sidecar["train_mask_used"]:
        model.train_mask_used = MaskMode.parse(sidecar["train_mask_used"])
    return model
