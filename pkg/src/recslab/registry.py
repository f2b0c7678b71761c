"""Algorithm registry: uniform fit entry points and default search spaces.

The default ranges are reconstructions in the spirit of common tuning
practice for these algorithm families (the exact ranges used elsewhere are
not published); experiment configs can and usually should declare narrower
spaces. Structural hyperparameters are clamped to the dataset dimensions so
a sampled configuration can never hard-fail on a small matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from . import baselines
from .dataio import InteractionMatrix
from .hpo import HyperparameterSpace, IntDim, RealDim

__all__ = ["AlgorithmSpec", "ALGORITHMS", "get_algorithm"]


@dataclass
class AlgorithmSpec:
    name: str
    fit: Callable[[InteractionMatrix, dict, int], object]
    default_space: HyperparameterSpace


def _clamp_top_k(train: InteractionMatrix, value: int) -> int:
    return max(1, min(int(value), train.n_items))


def _fit_top_popular(train, config, seed):
    return baselines.fit_top_popular(train)


def _fit_item_knn(train, config, seed):
    sim = baselines.cosine_similarity_shrunk(
        train, shrink=float(config["shrink"]),
        top_k=_clamp_top_k(train, config["top_k"]), axis="item")
    return baselines.KNNModel(train, sim, algorithm="item_knn")


def _fit_user_knn(train, config, seed):
    sim = baselines.cosine_similarity_shrunk(
        train, shrink=float(config["shrink"]),
        top_k=max(1, min(int(config["top_k"]), train.n_users)), axis="user")
    return baselines.KNNModel(train, sim, algorithm="user_knn")


def _fit_p3alpha(train, config, seed):
    return baselines.fit_p3alpha(train, alpha=float(config["alpha"]),
                                 top_k=_clamp_top_k(train, config["top_k"]))


def _fit_rp3beta(train, config, seed):
    return baselines.fit_rp3beta(train, alpha=float(config["alpha"]),
                                 beta=float(config["beta"]),
                                 top_k=_clamp_top_k(train, config["top_k"]))


def _fit_pure_svd(train, config, seed):
    rank = max(1, min(int(config["rank"]), min(train.n_users, train.n_items)))
    return baselines.fit_puresvd(train, rank=rank)


def _fit_slim(train, config, seed):
    return baselines.fit_slim(train, l1=float(config["l1"]), l2=float(config["l2"]),
                              top_k=_clamp_top_k(train, config["top_k"]))


def _fit_ials(train, config, seed):
    return baselines.fit_ials(
        train, factors=int(config["factors"]),
        confidence_alpha=float(config["confidence_alpha"]),
        reg=float(config["reg"]), iterations=int(config.get("iterations", 10)),
        seed=seed)


def _fit_mf_bpr(train, config, seed):
    pair = baselines.fit_mf_bpr(
        train, factors=int(config["factors"]), epochs=int(config.get("epochs", 30)),
        lr=float(config["lr"]), reg=float(config["reg"]), seed=seed)
    return baselines.dot_product_model(train, pair)


ALGORITHMS: dict[str, AlgorithmSpec] = {
    "top_popular": AlgorithmSpec(
        "top_popular", _fit_top_popular, HyperparameterSpace(())),
    "item_knn": AlgorithmSpec(
        "item_knn", _fit_item_knn,
        HyperparameterSpace((IntDim("top_k", 5, 800), IntDim("shrink", 0, 1000)))),
    "user_knn": AlgorithmSpec(
        "user_knn", _fit_user_knn,
        HyperparameterSpace((IntDim("top_k", 5, 800), IntDim("shrink", 0, 1000)))),
    "p3alpha": AlgorithmSpec(
        "p3alpha", _fit_p3alpha,
        HyperparameterSpace((IntDim("top_k", 5, 800), RealDim("alpha", 0.0, 2.0)))),
    "rp3beta": AlgorithmSpec(
        "rp3beta", _fit_rp3beta,
        HyperparameterSpace((IntDim("top_k", 5, 800), RealDim("alpha", 0.0, 2.0),
                             RealDim("beta", 0.0, 2.5)))),
    "pure_svd": AlgorithmSpec(
        "pure_svd", _fit_pure_svd,
        HyperparameterSpace((IntDim("rank", 1, 350, log=False),))),
    "slim": AlgorithmSpec(
        "slim", _fit_slim,
        HyperparameterSpace((RealDim("l1", 1e-5, 1.0, log=True),
                             RealDim("l2", 1e-5, 1.0, log=True),
                             IntDim("top_k", 5, 800)))),
    "ials": AlgorithmSpec(
        "ials", _fit_ials,
        HyperparameterSpace((IntDim("factors", 16, 512, log=True),
                             RealDim("confidence_alpha", 0.1, 50.0, log=True),
                             RealDim("reg", 1e-4, 1e-1, log=True)))),
    "mf_bpr": AlgorithmSpec(
        "mf_bpr", _fit_mf_bpr,
        HyperparameterSpace((IntDim("factors", 8, 256, log=True),
                             RealDim("lr", 1e-3, 0.5, log=True),
                             RealDim("reg", 1e-5, 1e-1, log=True)))),
}


def get_algorithm(name: str) -> AlgorithmSpec:
    try:
        return ALGORITHMS[name]
    except KeyError:
        raise ValueError(f"unknown algorithm {name!r}; available: "
                         f"{sorted(ALGORITHMS)}") from None
