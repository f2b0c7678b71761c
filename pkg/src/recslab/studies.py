"""Experiment orchestration: permutation study, the two ablation studies and
the tuned baseline comparison.

Every study produces a :class:`StudyReport` holding per-run metric records,
per-mode mean and standard deviation, significance decisions from the stats
pipeline, and the full configuration snapshot with all seeds, so a report can
be reproduced bit for bit from its own metadata.
"""

from __future__ import annotations

import csv
import json
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .baselines import dot_product_model, fit_mf_bpr
from .convrec import ConvRecModel, ConvTowerConfig, TrainConfig, train
from .dataio import InteractionMatrix, SplitTriple, leave_one_out_split
from .embed import EmbeddingPair, FactorPermutation, MaskMode, permute_factors
from .evaluation import evaluate_loo
from .hpo import HyperparameterSpace, tune_and_retrain
from .registry import get_algorithm
from .stats import DecisionRecord, PairedSamples, significance_pipeline

__all__ = [
    "ConvRecipe",
    "PretrainRecipe",
    "StudyReport",
    "run_permutation_study",
    "run_ablation_1",
    "run_ablation_2",
    "run_baseline_comparison",
]

MASK_ORDER = (MaskMode.FULL, MaskMode.ELEMENT_WISE, MaskMode.CORRELATIONS)


@dataclass
class PretrainRecipe:
    """MF-BPR pretraining settings for the frozen-embedding studies."""

    factors: int = 8
    epochs: int = 30
    learning_rate: float = 0.05
    regularization: float = 0.01
    seed: int = 0

    def fit(self, train_matrix: InteractionMatrix) -> EmbeddingPair:
        return fit_mf_bpr(train_matrix, factors=self.factors, epochs=self.epochs,
                          lr=self.learning_rate, reg=self.regularization,
                          seed=self.seed)


@dataclass
class ConvRecipe:
    """How to build and train one conv model inside a study."""

    channels: tuple[int, ...] = (8, 8, 8)
    kernel_size: int = 2
    stride: int = 2
    tower_init_scale: float | None = None
    embedding_mode: str = "frozen"
    latent_dim: int = 8            # used to init embeddings in learnable mode
    embedding_init_scale: float = 0.01
    learning_rate: float = 0.05
    regularization: float | dict = 0.0
    batch_size: int = 128
    max_epochs: int = 30
    eval_interval: int = 1
    patience: int = 5
    validation_negatives: int | None = 99

    def tower(self, seed: int) -> ConvTowerConfig:
        return ConvTowerConfig(channels=self.channels, kernel_size=self.kernel_size,
                               stride=self.stride, init_scale=self.tower_init_scale,
                               seed=seed)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate,
                           regularization=self.regularization,
                           batch_size=self.batch_size, max_epochs=self.max_epochs,
                           eval_interval=self.eval_interval, patience=self.patience,
                           seed=seed)

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["channels"] = list(self.channels)
        return payload


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(tuple(int(p) for p in parts))
               .generate_state(1)[0])


def _train_conv(recipe: ConvRecipe, split: SplitTriple, pair: EmbeddingPair,
                train_mask: MaskMode, cutoff: int, seed: int) -> ConvRecModel:
    """Build and train one conv model; validation metric is NDCG at the cutoff,
    evaluated under the same mask the model is trained with."""
    model = ConvRecModel(pair.copy(), recipe.tower(_derived_seed(seed, 1)),
                         embedding_mode=recipe.embedding_mode, train=split.train,
                         inference_mask=train_mask)

    def validation_metric(m: ConvRecModel) -> float:
        result = evaluate_loo(m, split, n_negatives=recipe.validation_negatives,
                              cutoffs=(cutoff,), seed=_derived_seed(seed, 2),
                              target="validation")
        return result.metric("ndcg", cutoff)

    trained, _ = train(model, split, recipe.train_config(_derived_seed(seed, 3)),
                       train_mask, validation_metric)
    return trained


def _random_pair(n_users: int, n_items: int, latent_dim: int, scale: float,
                 seed: int) -> EmbeddingPair:
    rng = np.random.default_rng(seed)
    return EmbeddingPair(rng.uniform(-scale, scale, size=(n_users, latent_dim)),
                         rng.uniform(-scale, scale, size=(n_items, latent_dim)))


@dataclass
class StudyReport:
    """Structured study output: records, aggregates, decisions, provenance."""

    kind: str
    records: list = field(default_factory=list)   # {model, mode, metric, run, value}
    decisions: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seeds: list = field(default_factory=list)

    def add_run(self, model: str, mode: str, metric: str, run: int, value: float):
        self.records.append({"model": model, "mode": mode, "metric": metric,
                             "run": run, "value": float(value)})

    def values(self, model: str, mode: str, metric: str) -> list[float]:
        return [r["value"] for r in self.records
                if r["model"] == model and r["mode"] == mode and r["metric"] == metric]

    def rows(self) -> list[dict]:
        """Per (model, mode, metric) aggregate: mean, std, single-run flag."""
        seen = []
        for r in self.records:
            key = (r["model"], r["mode"], r["metric"])
            if key not in seen:
                seen.append(key)
        out = []
        for model, mode, metric in seen:
            vals = self.values(model, mode, metric)
            single = len(vals) < 2
            out.append({
                "model": model, "mode": mode, "metric": metric,
                "n_runs": len(vals),
                "mean": float(np.mean(vals)),
                "std": 0.0 if single else float(np.std(vals, ddof=1)),
                "single_run": single,
            })
        return out

    def add_decision(self, comparison: str, metric: str, record) -> None:
        payload = record.to_dict()
        payload["comparison"] = comparison
        payload["metric"] = metric
        self.decisions.append(payload)

    def decision(self, comparison: str, metric: str) -> dict:
        for d in self.decisions:
            if d["comparison"] == comparison and d["metric"] == metric:
                return d
        raise KeyError(f"no decision for {comparison!r} on {metric!r}")

    # -- serialization -------------------------------------------------------

    def to_markdown(self, highlight_best_per_metric: bool = False) -> str:
        rows = self.rows()
        metrics = []
        for r in rows:
            if r["metric"] not in metrics:
                metrics.append(r["metric"])
        combos = []
        for r in rows:
            key = (r["model"], r["mode"])
            if key not in combos:
                combos.append(key)
        by_key = {(r["model"], r["mode"], r["metric"]): r for r in rows}
        best = {}
        if highlight_best_per_metric:
            for metric in metrics:
                candidates = [r for r in rows if r["metric"] == metric]
                best[metric] = max(c["mean"] for c in candidates)

        lines = [f"# Study report: {self.kind}", ""]
        header = "| model | mode | " + " | ".join(metrics) + " |"
        sep = "|" + "---|" * (2 + len(metrics))
        lines += [header, sep]
        for model, mode in combos:
            cells = []
            for metric in metrics:
                r = by_key.get((model, mode, metric))
                if r is None:
                    cells.append("failed")
                    continue
                text = f"{r['mean']:.4f} ± {r['std']:.4f}"
                if r["single_run"]:
                    text += " (single run)"
                if highlight_best_per_metric and r["mean"] == best[metric]:
                    text = f"**{text}**"
                cells.append(text)
            lines.append(f"| {model} | {mode} | " + " | ".join(cells) + " |")
        for name in self.config.get("failures", {}):
            lines.append(f"| {name} | failed | "
                         + " | ".join(["failed"] * len(metrics)) + " |")
        if self.decisions:
            lines += ["", "## Significance decisions", ""]
            for d in self.decisions:
                verdict = "significant" if d["significant"] else "not significant"
                if d["test_used"] == "not_applicable":
                    verdict = "not applicable"
                lines.append(f"- {d['comparison']} on {d['metric']}: {verdict} "
                             f"(test={d['test_used']}, p={d['p']!r}, "
                             f"alpha={d['alpha']})")
        lines += ["", "## Configuration", "", "```json",
                  json.dumps({"config": self.config, "seeds": self.seeds},
                             indent=1, sort_keys=True),
                  "```", ""]
        return "\n".join(lines)

    def save(self, out_dir: str | Path,
             highlight_best_per_metric: bool = False) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "report.csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["model", "mode", "metric", "run", "value"])
            for r in self.records:
                writer.writerow([r["model"], r["mode"], r["metric"], r["run"],
                                 repr(r["value"])])
        (out_dir / "report.md").write_text(
            self.to_markdown(highlight_best_per_metric), encoding="utf-8")
        payload = {
            "kind": self.kind,
            "rows": self.rows(),
            "records": self.records,
            "decisions": self.decisions,
            "config": self.config,
            "seeds": self.seeds,
        }
        (out_dir / "report.json").write_text(json.dumps(payload, indent=1),
                                             encoding="utf-8")


def _record_result(report: StudyReport, model: str, mode: str, run: int,
                   result, cutoff: int) -> None:
    report.add_run(model, mode, f"hr@{cutoff}", run, result.metric("hr", cutoff))
    report.add_run(model, mode, f"ndcg@{cutoff}", run, result.metric("ndcg", cutoff))


def _paired_decisions(report: StudyReport, model: str, baseline_mode: str,
                      other_modes: list[str], cutoff: int, alpha: float) -> None:
    for metric in (f"hr@{cutoff}", f"ndcg@{cutoff}"):
        base_values = report.values(model, baseline_mode, metric)
        for mode in other_modes:
            other_values = report.values(model, mode, metric)
            if len(base_values) < 3:
                decision = DecisionRecord(
                    test_used="not_applicable", statistic=float("nan"),
                    p=float("nan"), significant=False, alpha=alpha,
                    reason=f"only {len(base_values)} repeats; paired tests "
                           f"need at least 3",
                    labels=(f"{model} {baseline_mode}", f"{model} {mode}"))
            else:
                samples = PairedSamples(
                    np.asarray(base_values), np.asarray(other_values),
                    label_a=f"{model} {baseline_mode}", label_b=f"{model} {mode}")
                decision = significance_pipeline(samples, alpha=alpha)
            report.add_decision(f"{baseline_mode} vs {mode}", metric, decision)


def run_permutation_study(pair: EmbeddingPair, split: SplitTriple,
                          n_permutations: int = 20, cutoff: int = 10,
                          n_negatives: int | None = 99, seed: int = 0,
                          conv_recipe: ConvRecipe | None = None) -> StudyReport:
    """Evaluate consistent factor permutations of a pretrained model.

    For every permutation the plain dot-product model is evaluated (its
    metrics must not move: the prediction is permutation invariant) and, when
    a recipe is given, a conv model is trained on the permuted maps and
    evaluated as well.
    """
    report = StudyReport(
        kind="permutation",
        config={"n_permutations": n_permutations, "cutoff": cutoff,
                "n_negatives": n_negatives,
                "conv_recipe": conv_recipe.to_dict() if conv_recipe else None},
        seeds=[seed],
    )
    eval_seed = _derived_seed(seed, 101)
    for run in range(n_permutations):
        perm = FactorPermutation.random(pair.k, seed=_derived_seed(seed, run, 7))
        permuted = permute_factors(pair, perm)
        dot_model = dot_product_model(split.train, permuted)
        result = evaluate_loo(dot_model, split, n_negatives=n_negatives,
                              cutoffs=(cutoff,), seed=eval_seed)
        _record_result(report, "mf_bpr", "dot-product", run, result, cutoff)
        if conv_recipe is not None:
            conv = _train_conv(conv_recipe, split, permuted, MaskMode.FULL,
                               cutoff, _derived_seed(seed, run, 13))
            conv_result = evaluate_loo(conv, split, n_negatives=n_negatives,
                                       cutoffs=(cutoff,), seed=eval_seed)
            _record_result(report, "convrec", "full", run, conv_result, cutoff)
    return report


def _repeat_context(recipe: ConvRecipe, matrix: InteractionMatrix | None,
                    split: SplitTriple | None, pretrained: EmbeddingPair | None,
                    run: int, seed: int,
                    split_policy: str = "random") -> tuple[SplitTriple, EmbeddingPair]:
    """Per-repeat (split, embeddings): frozen mode permutes the pretrained
    embeddings over a fixed split; learnable mode redraws the split and a
    fresh random initialization."""
    if recipe.embedding_mode == "frozen":
        if pretrained is None or split is None:
            raise ValueError("frozen-mode studies need a pretrained pair and a split")
        perm = FactorPermutation.random(pretrained.k, seed=_derived_seed(seed, run, 7))
        return split, permute_factors(pretrained, perm)
    if matrix is None:
        raise ValueError("learnable-mode studies need the full interaction matrix")
    run_split = leave_one_out_split(matrix, policy=split_policy,
                                    seed=_derived_seed(seed, run, 11))
    pair = _random_pair(matrix.n_users, matrix.n_items, recipe.latent_dim,
                        recipe.embedding_init_scale, _derived_seed(seed, run, 17))
    return run_split, pair


def run_ablation_1(recipe: ConvRecipe, n_repeats: int = 20, cutoff: int = 10,
                   n_negatives: int | None = 99, seed: int = 0, alpha: float = 0.05,
                   split: SplitTriple | None = None,
                   pretrained: EmbeddingPair | None = None,
                   matrix: InteractionMatrix | None = None) -> StudyReport:
    """Train on the full map, then score under each mask component.

    Per repeat one model is trained with the FULL mask and evaluated under all
    three inference masks on the same negatives, giving paired per-repeat
    samples for the significance pipeline (full vs each component).
    """
    report = StudyReport(
        kind="ablation1",
        config={"n_repeats": n_repeats, "cutoff": cutoff, "n_negatives": n_negatives,
                "alpha": alpha, "recipe": recipe.to_dict()},
        seeds=[seed],
    )
    for run in range(n_repeats):
        run_split, pair = _repeat_context(recipe, matrix, split, pretrained, run, seed)
        model = _train_conv(recipe, run_split, pair, MaskMode.FULL, cutoff,
                            _derived_seed(seed, run, 13))
        eval_seed = _derived_seed(seed, run, 19)
        for mask in MASK_ORDER:
            view = model.with_inference_mask(mask)
            result = evaluate_loo(view, run_split, n_negatives=n_negatives,
                                  cutoffs=(cutoff,), seed=eval_seed)
            _record_result(report, "convrec", mask.value, run, result, cutoff)
    _paired_decisions(report, "convrec", MaskMode.FULL.value,
                      [MaskMode.ELEMENT_WISE.value, MaskMode.CORRELATIONS.value],
                      cutoff, alpha)
    return report


def run_ablation_2(recipe: ConvRecipe, n_repeats: int = 20, cutoff: int = 10,
                   n_negatives: int | None = 99, seed: int = 0, alpha: float = 0.05,
                   split: SplitTriple | None = None,
                   pretrained: EmbeddingPair | None = None,
                   matrix: InteractionMatrix | None = None) -> StudyReport:
    """Train separate models from scratch on each mask component.

    Every repeat trains three models (full, element-wise, correlations), each
    evaluated under its own training mask; repeats share embeddings/splits so
    the mask comparison stays paired.
    """
    report = StudyReport(
        kind="ablation2",
        config={"n_repeats": n_repeats, "cutoff": cutoff, "n_negatives": n_negatives,
                "alpha": alpha, "recipe": recipe.to_dict()},
        seeds=[seed],
    )
    for run in range(n_repeats):
        run_split, pair = _repeat_context(recipe, matrix, split, pretrained, run, seed)
        eval_seed = _derived_seed(seed, run, 19)
        for mask in MASK_ORDER:
            model = _train_conv(recipe, run_split, pair, mask, cutoff,
                                _derived_seed(seed, run, 13))
            result = evaluate_loo(model, run_split, n_negatives=n_negatives,
                                  cutoffs=(cutoff,), seed=eval_seed)
            _record_result(report, "convrec", mask.value, run, result, cutoff)
    _paired_decisions(report, "convrec", MaskMode.FULL.value,
                      [MaskMode.ELEMENT_WISE.value, MaskMode.CORRELATIONS.value],
                      cutoff, alpha)
    return report


def run_baseline_comparison(algorithms: list[str], split: SplitTriple,
                            spaces: dict[str, HyperparameterSpace] | None = None,
                            cutoffs: tuple[int, ...] = (5, 10, 20),
                            n_calls: int = 50, n_random_init: int = 15,
                            n_negatives: int | None = 99,
                            seed: int = 0) -> StudyReport:
    """Tune each algorithm on validation, retrain on train+validation, report
    test metrics per cutoff. A failing algorithm marks its row and the study
    continues; TopPopular is always included as the non-personalized floor."""
    spaces = dict(spaces or {})
    names = list(algorithms)
    if "top_popular" not in names:
        names.insert(0, "top_popular")
    report = StudyReport(
        kind="baseline_comparison",
        config={"algorithms": names, "cutoffs": list(cutoffs),
                "n_calls": n_calls, "n_random_init": n_random_init,
                "n_negatives": n_negatives},
        seeds=[seed],
    )
    for name in names:
        spec = get_algorithm(name)
        space = spaces.get(name, spec.default_space)
        try:
            model, trace = tune_and_retrain(
                spec.fit, space, split, metric=("ndcg", max(cutoffs)),
                n_calls=n_calls, n_random_init=n_random_init,
                seed=_derived_seed(seed, zlib.crc32(name.encode())),
                n_negatives=n_negatives)
            result = evaluate_loo(model, split, n_negatives=n_negatives,
                                  cutoffs=cutoffs, seed=_derived_seed(seed, 23))
            for cutoff in cutoffs:
                _record_result(report, name, "tuned", 0, result, cutoff)
            report.config.setdefault("best_configs", {})[name] = trace.best_config
        except Exception as exc:  # a broken algorithm must not sink the study
            report.config.setdefault("failures", {})[name] = repr(exc)
    return report
