"""Bayesian hyperparameter search and the tune-then-retrain protocol.

The search maximizes a black-box objective over a declared space: the first
``n_random_init`` configurations are sampled uniformly, the remainder by
expected improvement under a Gaussian-process surrogate fitted on the unit
hypercube (integers rounded, log dimensions warped, categoricals one-hot).
``tune_and_retrain`` optimizes a validation metric and refits the best
configuration on train + validation before test evaluation.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm as _norm
from sklearn.gaussian_process import GaussianProcessRegressor
from sklearn.gaussian_process.kernels import Matern

from .dataio import SplitTriple, merge_matrices
from .evaluation import evaluate_loo

__all__ = [
    "RealDim",
    "IntDim",
    "CatDim",
    "HyperparameterSpace",
    "TrialRecord",
    "SearchTrace",
    "bayesian_search",
    "tune_and_retrain",
    "space_from_config",
]


@dataclass
class RealDim:
    name: str
    low: float
    high: float
    log: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.low) and math.isfinite(self.high)):
            raise ValueError(f"{self.name}: bounds must be finite")
        if self.low >= self.high:
            raise ValueError(f"{self.name}: low must be < high")
        if self.log and self.low <= 0:
            raise ValueError(f"{self.name}: log dimensions need positive bounds")

    @property
    def width(self) -> int:
        return 1

    def from_unit(self, u: np.ndarray):
        t = float(u[0])
        if self.log:
            return float(math.exp(math.log(self.low)
                                  + t * (math.log(self.high) - math.log(self.low))))
        return float(self.low + t * (self.high - self.low))

    def to_unit(self, value) -> np.ndarray:
        if self.log:
            t = (math.log(value) - math.log(self.low)) / \
                (math.log(self.high) - math.log(self.low))
        else:
            t = (value - self.low) / (self.high - self.low)
        return np.array([min(max(t, 0.0), 1.0)])


@dataclass
class IntDim(RealDim):
    def from_unit(self, u: np.ndarray):
        return int(round(super().from_unit(u)))


@dataclass
class CatDim:
    name: str
    choices: tuple

    def __post_init__(self):
        self.choices = tuple(self.choices)
        if not self.choices:
            raise ValueError(f"{self.name}: needs at least one choice")

    @property
    def width(self) -> int:
        return len(self.choices)

    def from_unit(self, u: np.ndarray):
        return self.choices[int(np.argmax(u))]

    def to_unit(self, value) -> np.ndarray:
        out = np.zeros(len(self.choices))
        out[self.choices.index(value)] = 1.0
        return out


@dataclass
class HyperparameterSpace:
    dimensions: tuple

    def __post_init__(self):
        self.dimensions = tuple(self.dimensions)
        names = [d.name for d in self.dimensions]
        if len(set(names)) != len(names):
            raise ValueError("duplicate dimension names")

    @property
    def n_unit(self) -> int:
        return sum(d.width for d in self.dimensions)

    def from_unit(self, u: np.ndarray) -> dict:
        config = {}
        offset = 0
        for dim in self.dimensions:
            config[dim.name] = dim.from_unit(u[offset:offset + dim.width])
            offset += dim.width
        return config

    def to_unit(self, config: dict) -> np.ndarray:
        parts = [dim.to_unit(config[dim.name]) for dim in self.dimensions]
        return np.concatenate(parts) if parts else np.zeros(0)

    def sample(self, rng: np.random.Generator) -> dict:
        return self.from_unit(rng.uniform(size=self.n_unit))


@dataclass
class TrialRecord:
    config: dict
    value: float
    phase: str  # "random_init" | "model_based"
    failed: bool = False


@dataclass
class SearchTrace:
    entries: list = field(default_factory=list)
    seed: int = 0

    def add(self, record: TrialRecord) -> None:
        self.entries.append(record)

    @property
    def best(self) -> TrialRecord:
        valid = [e for e in self.entries if not e.failed]
        if not valid:
            return self.entries[0]
        return max(valid, key=lambda e: e.value)

    @property
    def best_config(self) -> dict:
        return self.best.config

    @property
    def best_value(self) -> float:
        return self.best.value

    def save(self, prefix: str | Path) -> None:
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        keys = sorted({k for e in self.entries for k in e.config})
        with open(prefix.with_suffix(".csv"), "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["trial", "phase", "value", "failed"] + keys)
            for t, e in enumerate(self.entries):
                writer.writerow([t, e.phase, repr(e.value), int(e.failed)]
                                + [repr(e.config.get(k)) for k in keys])
        summary = {
            "seed": self.seed,
            "n_trials": len(self.entries),
            "best_value": self.best_value,
            "best_config": self.best_config,
            "n_failed": sum(e.failed for e in self.entries),
        }
        prefix.with_suffix(".json").write_text(json.dumps(summary, indent=1),
                                               encoding="utf-8")


def _expected_improvement(mu: np.ndarray, sigma: np.ndarray, best: float,
                          xi: float = 0.01) -> np.ndarray:
    improvement = mu - best - xi
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sigma > 0, improvement / np.where(sigma > 0, sigma, 1.0), 0.0)
        ei = np.where(sigma > 0,
                      improvement * _norm.cdf(z) + sigma * _norm.pdf(z),
                      0.0)
    return ei


def bayesian_search(space: HyperparameterSpace, objective, n_calls: int = 50,
                    n_random_init: int = 15, seed: int = 0,
                    n_candidates: int = 2048) -> SearchTrace:
    """Maximize ``objective(config)`` with GP-EI after a uniform warm start.

    Non-finite objective values (and raising objectives) are recorded as
    failed trials and fed to the surrogate as the worst value seen so far, so
    the search continues. Deterministic given the seed.
    """
    if n_random_init > n_calls:
        raise ValueError("n_random_init cannot exceed n_calls")
    rng = np.random.default_rng(seed)
    trace = SearchTrace(seed=seed)
    x_observed: list[np.ndarray] = []
    y_observed: list[float] = []

    def run_trial(unit: np.ndarray, phase: str) -> None:
        config = space.from_unit(unit)
        try:
            value = float(objective(config))
        except Exception:
            value = float("nan")
        failed = not math.isfinite(value)
        trace.add(TrialRecord(config=config, value=value, phase=phase, failed=failed))
        finite = [v for v in y_observed if math.isfinite(v)]
        surrogate_y = value if not failed else (min(finite) - 1.0 if finite else -1.0)
        x_observed.append(space.to_unit(config))
        y_observed.append(surrogate_y)

    n_init = min(n_random_init, n_calls)
    for _ in range(n_init):
        run_trial(rng.uniform(size=space.n_unit), "random_init")

    for _ in range(n_calls - n_init):
        if space.n_unit == 0:
            run_trial(np.zeros(0), "model_based")
            continue
        gp = GaussianProcessRegressor(
            kernel=Matern(nu=2.5, length_scale=np.full(space.n_unit, 0.25),
                          length_scale_bounds=(1e-5, 1e5)),
            alpha=1e-10,
            normalize_y=True,
            n_restarts_optimizer=2,
            random_state=int(rng.integers(2 ** 31 - 1)),
        )
        with warnings.catch_warnings():
            # flat or near-duplicate observations push the kernel to its
            # bounds; that is expected on plateau objectives
            warnings.simplefilter("ignore")
            gp.fit(np.vstack(x_observed), np.asarray(y_observed))
        candidates = rng.uniform(size=(n_candidates, space.n_unit))
        mu, sigma = gp.predict(candidates, return_std=True)
        ei = _expected_improvement(mu, sigma, max(y_observed))
        run_trial(candidates[int(np.argmax(ei))], "model_based")

    return trace


def tune_and_retrain(fit, space: HyperparameterSpace, split: SplitTriple,
                     metric: tuple[str, int] = ("ndcg", 10), n_calls: int = 50,
                     n_random_init: int = 15, seed: int = 0,
                     n_negatives: int | None = 99, fit_seed: int = 0):
    """Search on the validation metric, then refit the winner on train + validation.

    ``fit(train_matrix, config, seed)`` must return a scoring model. The
    objective trains on the train partition only; the returned model is
    refitted on the union of train and validation (never on test, asserted via
    partition tags).
    """
    metric_name, cutoff = metric

    def objective(config: dict) -> float:
        model = fit(split.train, config, fit_seed)
        result = evaluate_loo(model, split, n_negatives=n_negatives,
                              cutoffs=(cutoff,), seed=seed, target="validation")
        return result.metric(metric_name, cutoff)

    trace = bayesian_search(space, objective, n_calls=n_calls,
                            n_random_init=n_random_init, seed=seed)
    retrain_matrix = merge_matrices(split.train, split.validation)
    assert "test" not in retrain_matrix.tag, "refusing to train on the test partition"
    final_model = fit(retrain_matrix, trace.best_config, fit_seed)
    return final_model, trace


def space_from_config(entries: list[dict]) -> HyperparameterSpace:
    """Build a space from the JSON experiment-config encoding."""
    dims = []
    for entry in entries:
        kind = entry.get("type")
        if kind == "real":
            dims.append(RealDim(entry["name"], float(entry["low"]),
                                float(entry["high"]), bool(entry.get("log", False))))
        elif kind == "int":
            dims.append(IntDim(entry["name"], float(entry["low"]),
                               float(entry["high"]), bool(entry.get("log", False))))
        elif kind == "cat":
            dims.append(CatDim(entry["name"], tuple(entry["choices"])))
        else:
            raise ValueError(f"unknown dimension type {kind!r}")
    return HyperparameterSpace(tuple(dims))
