"""Command line frontend: config-driven experiment execution.

Each subcommand takes a single JSON config document (schema-checked before
any computation; unknown keys are rejected), plus a few override flags.
Exit codes: 0 success, 1 user error (bad config, missing file), 2 internal
error. All outputs (CSV, JSON, markdown, PGM) are deterministic given the
config and seeds with ``--threads 1``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from pathlib import Path

import numpy as np

from . import baselines
from .dataio import (
    SplitTriple,
    leave_one_out_split,
    load_interactions,
    load_split,
    merge_matrices,
    save_split,
)
from .embed import FactorPermutation, outer_product
from .evaluation import evaluate_loo
from .heatmap import render_heatmap
from .hpo import space_from_config, tune_and_retrain
from .registry import get_algorithm
from .studies import (
    ConvRecipe,
    PretrainRecipe,
    run_ablation_1,
    run_ablation_2,
    run_baseline_comparison,
    run_permutation_study,
)
from .synthetic import generate_synthetic

__all__ = ["main", "cli_dispatch"]


class ConfigError(ValueError):
    """Config fails schema validation; message lists the offending keys."""


class UserError(ValueError):
    """Anything the operator can fix: bad paths, bad values, bad configs."""


# ---------------------------------------------------------------------------
# Config schema helpers


def _check_keys(obj: dict, context: str, required: tuple[str, ...],
                optional: tuple[str, ...] = ()) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{context}: expected an object")
    allowed = set(required) | set(optional)
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ConfigError(f"{context}: unknown keys {unknown}")
    missing = sorted(set(required) - set(obj))
    if missing:
        raise ConfigError(f"{context}: missing required keys {missing}")


_SYNTHETIC_KEYS = ("n_users", "n_items", "latent_dim", "factor_correlation",
                   "popularity_skew", "interactions_per_user", "noise", "seed",
                   "with_timestamps")
_RECIPE_KEYS = ("channels", "kernel_size", "stride", "tower_init_scale",
                "embedding_mode", "latent_dim", "embedding_init_scale",
                "learning_rate", "regularization", "batch_size", "max_epochs",
                "eval_interval", "patience", "validation_negatives")
_PRETRAIN_KEYS = ("factors", "epochs", "learning_rate", "regularization", "seed")


def _load_config(path: str) -> dict:
    config_path = Path(path)
    if not config_path.exists():
        raise UserError(f"config file not found: {config_path}")
    try:
        return json.loads(config_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{config_path}: invalid JSON ({exc})") from exc


def _resolve_matrix(section: dict, context: str = "dataset"):
    _check_keys(section, context, (), ("path", "format", "binarize",
                                       "min_value_threshold", "synthetic"))
    if ("path" in section) == ("synthetic" in section):
        raise ConfigError(f"{context}: give exactly one of 'path' or 'synthetic'")
    if "synthetic" in section:
        _check_keys(section["synthetic"], f"{context}.synthetic",
                    ("n_users", "n_items"), _SYNTHETIC_KEYS)
        return generate_synthetic(**section["synthetic"]), None
    matrix, idmap = load_interactions(
        section["path"],
        fmt=section.get("format", "tsv"),
        binarize=section.get("binarize", True),
        min_value_threshold=section.get("min_value_threshold"),
    )
    return matrix, idmap


def _resolve_split(config: dict, seed_override: int | None) -> SplitTriple:
    if "split_dir" in config:
        return load_split(config["split_dir"])
    if "dataset" not in config or "split" not in config:
        raise ConfigError("config needs either 'split_dir' or 'dataset' + 'split'")
    _check_keys(config["split"], "split", (), ("policy", "seed"))
    matrix, _ = _resolve_matrix(config["dataset"])
    seed = seed_override if seed_override is not None \
        else config["split"].get("seed", 0)
    policy = config["split"].get("policy",
                                 "latest_timestamp" if matrix.timestamps is not None
                                 else "random")
    return leave_one_out_split(matrix, policy=policy, seed=seed)


def _recipe_from_config(section: dict) -> ConvRecipe:
    _check_keys(section, "recipe", (), _RECIPE_KEYS)
    payload = dict(section)
    if "channels" in payload:
        payload["channels"] = tuple(payload["channels"])
    return ConvRecipe(**payload)


def _pretrain_from_config(section: dict) -> PretrainRecipe:
    _check_keys(section, "pretrain", (), _PRETRAIN_KEYS)
    return PretrainRecipe(**section)


def _out_dir(config: dict, args, key: str = "output_dir") -> Path:
    out = args.out or config.get(key)
    if out is None:
        raise ConfigError(f"config: missing required keys ['{key}'] "
                          f"(or pass --out)")
    root = os.environ.get("RECSLAB_OUT_ROOT")
    return Path(root) / out if root else Path(out)


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    return int(os.environ.get("RECSLAB_THREADS", "1"))


def _experiment_snapshot(config: dict) -> dict:
    """Config as recorded in reports: output location is not part of the
    experiment, and keeping it would break bitwise reproducibility across
    output directories."""
    return {k: v for k, v in config.items()
            if k not in ("output_dir", "output_prefix")}


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_prepare_data(args) -> int:
    config = _load_config(args.config)
    _check_keys(config, "config", ("dataset", "split"), ("output_dir",))
    _check_keys(config["split"], "split", (), ("policy", "seed"))
    matrix, idmap = _resolve_matrix(config["dataset"])
    seed = args.seed if args.seed is not None else config["split"].get("seed", 0)
    policy = config["split"].get("policy",
                                 "latest_timestamp" if matrix.timestamps is not None
                                 else "random")
    split = leave_one_out_split(matrix, policy=policy, seed=seed)
    out = _out_dir(config, args)
    save_split(split, out)
    if idmap is not None:
        idmap.save(out / "idmap.json")
    print(f"wrote split to {out} "
          f"(train={split.train.n_entries}, validation={split.validation.n_entries}, "
          f"test={split.test.n_entries})")
    return 0


def _cmd_fit(args) -> int:
    config = _load_config(args.config)
    _check_keys(config, "config", ("algorithm",),
                ("split_dir", "dataset", "split", "train_on", "output_prefix"))
    _check_keys(config["algorithm"], "algorithm", ("name",), ("params", "seed"))
    split = _resolve_split(config, args.seed)
    train_on = config.get("train_on", "train")
    if train_on == "train":
        matrix = split.train
    elif train_on == "train+validation":
        matrix = merge_matrices(split.train, split.validation)
    else:
        raise ConfigError("train_on must be 'train' or 'train+validation'")
    spec = get_algorithm(config["algorithm"]["name"])
    seed = config["algorithm"].get("seed", 0)
    model = spec.fit(matrix, config["algorithm"].get("params", {}), seed)
    prefix = _out_dir(config, args, key="output_prefix")
    baselines.save_model(model, prefix)
    print(f"fitted {spec.name} on {train_on}; checkpoint at {prefix}")
    return 0


def _cmd_evaluate(args) -> int:
    config = _load_config(args.config)
    _check_keys(config, "config", ("model_prefix",),
                ("split_dir", "dataset", "split", "evaluation", "output_prefix"))
    eval_cfg = config.get("evaluation", {})
    _check_keys(eval_cfg, "evaluation", (), ("cutoffs", "n_negatives", "seed"))
    split = _resolve_split(config, None)
    model = baselines.load_model(config["model_prefix"], split.train)
    seed = args.seed if args.seed is not None else eval_cfg.get("seed", 0)
    result = evaluate_loo(
        model, split,
        n_negatives=eval_cfg.get("n_negatives", 99),
        cutoffs=tuple(eval_cfg.get("cutoffs", (1, 5, 10, 20))),
        seed=seed,
        threads=_threads(args),
    )
    prefix = _out_dir(config, args, key="output_prefix")
    prefix.parent.mkdir(parents=True, exist_ok=True)
    result.save(prefix)
    print(f"evaluated {model.algorithm} on {result.n_evaluated_users} users; "
          f"results at {prefix}.csv / {prefix}.json")
    for key in sorted(result.aggregates):
        print(f"  {key} = {result.aggregates[key]:.4f}")
    return 0


def _cmd_hpo(args) -> int:
    config = _load_config(args.config)
    _check_keys(config, "config", ("algorithm",),
                ("split_dir", "dataset", "split", "space", "budget", "metric",
                 "evaluation", "seed", "output_dir"))
    _check_keys(config["algorithm"], "algorithm", ("name",), ("seed",))
    budget = config.get("budget", {})
    _check_keys(budget, "budget", (), ("n_calls", "n_random_init"))
    metric_cfg = config.get("metric", {})
    _check_keys(metric_cfg, "metric", (), ("name", "cutoff"))
    eval_cfg = config.get("evaluation", {})
    _check_keys(eval_cfg, "evaluation", (), ("cutoffs", "n_negatives", "seed"))

    split = _resolve_split(config, None)
    spec = get_algorithm(config["algorithm"]["name"])
    space = space_from_config(config["space"]) if "space" in config \
        else spec.default_space
    seed = args.seed if args.seed is not None else config.get("seed", 0)
    model, trace = tune_and_retrain(
        spec.fit, space, split,
        metric=(metric_cfg.get("name", "ndcg"), metric_cfg.get("cutoff", 10)),
        n_calls=budget.get("n_calls", 50),
        n_random_init=budget.get("n_random_init", 15),
        seed=seed,
        n_negatives=eval_cfg.get("n_negatives", 99),
        fit_seed=config["algorithm"].get("seed", 0),
    )
    out = _out_dir(config, args)
    out.mkdir(parents=True, exist_ok=True)
    trace.save(out / "trace")
    baselines.save_model(model, out / "model")
    result = evaluate_loo(model, split,
                          n_negatives=eval_cfg.get("n_negatives", 99),
                          cutoffs=tuple(eval_cfg.get("cutoffs", (1, 5, 10, 20))),
                          seed=eval_cfg.get("seed", 0),
                          threads=_threads(args))
    result.save(out / "test_results")
    print(f"best validation value {trace.best_value:.4f} with {trace.best_config}")
    for key in sorted(result.aggregates):
        print(f"  test {key} = {result.aggregates[key]:.4f}")
    return 0


def _study_common(config: dict, args):
    study_cfg = config.get("study", {})
    _check_keys(study_cfg, "study",
                (), ("n_permutations", "n_repeats", "cutoff", "n_negatives",
                     "alpha", "seed"))
    seed = args.seed if args.seed is not None else study_cfg.get("seed", 0)
    return study_cfg, seed


def _cmd_perm_study(args) -> int:
    config = _load_config(args.config)
    _check_keys(config, "config", ("pretrain",),
                ("split_dir", "dataset", "split", "study", "conv", "output_dir"))
    study_cfg, seed = _study_common(config, args)
    split = _resolve_split(config, None)
    pair = _pretrain_from_config(config["pretrain"]).fit(split.train)
    conv_recipe = _recipe_from_config(config["conv"]) if config.get("conv") else None
    report = run_permutation_study(
        pair, split,
        n_permutations=study_cfg.get("n_permutations", 20),
        cutoff=study_cfg.get("cutoff", 10),
        n_negatives=study_cfg.get("n_negatives", 99),
        seed=seed,
        conv_recipe=conv_recipe,
    )
    report.config["experiment"] = _experiment_snapshot(config)
    out = _out_dir(config, args)
    report.save(out)
    print(f"permutation study written to {out}")
    _print_rows(report)
    return 0


def _run_ablation(args, runner) -> int:
    config = _load_config(args.config)
    _check_keys(config, "config", ("recipe",),
                ("split_dir", "dataset", "split", "pretrain", "study",
                 "output_dir"))
    study_cfg, seed = _study_common(config, args)
    recipe = _recipe_from_config(config["recipe"])
    kwargs = dict(
        n_repeats=study_cfg.get("n_repeats", 20),
        cutoff=study_cfg.get("cutoff", 10),
        n_negatives=study_cfg.get("n_negatives", 99),
        seed=seed,
        alpha=study_cfg.get("alpha", 0.05),
    )
    if recipe.embedding_mode == "frozen":
        if "pretrain" not in config:
            raise ConfigError("config: frozen-mode ablations need a 'pretrain' section")
        split = _resolve_split(config, None)
        pair = _pretrain_from_config(config["pretrain"]).fit(split.train)
        report = runner(recipe, split=split, pretrained=pair, **kwargs)
    else:
        if "dataset" not in config:
            raise ConfigError("config: learnable-mode ablations need a 'dataset' "
                              "section (splits are redrawn per repeat)")
        matrix, _ = _resolve_matrix(config["dataset"])
        report = runner(recipe, matrix=matrix, **kwargs)
    report.config["experiment"] = _experiment_snapshot(config)
    out = _out_dir(config, args)
    report.save(out)
    print(f"{report.kind} written to {out}")
    _print_rows(report)
    for decision in report.decisions:
        verdict = "not applicable" if decision["test_used"] == "not_applicable" \
            else ("significant" if decision["significant"] else "not significant")
        print(f"  {decision['comparison']} [{decision['metric']}]: {verdict} "
              f"(test={decision['test_used']}, p={decision['p']})")
    return 0


def _cmd_ablation1(args) -> int:
    return _run_ablation(args, run_ablation_1)


def _cmd_ablation2(args) -> int:
    return _run_ablation(args, run_ablation_2)


def _cmd_compare_baselines(args) -> int:
    config = _load_config(args.config)
    _check_keys(config, "config", ("algorithms",),
                ("split_dir", "dataset", "split", "spaces", "budget",
                 "evaluation", "seed", "output_dir"))
    budget = config.get("budget", {})
    _check_keys(budget, "budget", (), ("n_calls", "n_random_init"))
    eval_cfg = config.get("evaluation", {})
    _check_keys(eval_cfg, "evaluation", (), ("cutoffs", "n_negatives"))
    split = _resolve_split(config, None)
    spaces = {name: space_from_config(dims)
              for name, dims in config.get("spaces", {}).items()}
    seed = args.seed if args.seed is not None else config.get("seed", 0)
    report = run_baseline_comparison(
        config["algorithms"], split, spaces=spaces,
        cutoffs=tuple(eval_cfg.get("cutoffs", (5, 10, 20))),
        n_calls=budget.get("n_calls", 50),
        n_random_init=budget.get("n_random_init", 15),
        n_negatives=eval_cfg.get("n_negatives", 99),
        seed=seed,
    )
    report.config["experiment"] = _experiment_snapshot(config)
    out = _out_dir(config, args)
    report.save(out, highlight_best_per_metric=True)
    print(f"baseline comparison written to {out}")
    _print_rows(report)
    return 0


def _cmd_heatmap(args) -> int:
    out = Path(args.out) if args.out else None
    if args.input is None and args.demo_outer is None:
        raise UserError("heatmap needs --input CSV or --demo-outer K")
    if out is None:
        raise UserError("heatmap needs --out")
    if args.input is not None:
        path = Path(args.input)
        if not path.exists():
            raise UserError(f"input file not found: {path}")
        grid = np.loadtxt(path, delimiter=",", ndmin=2)
        target = out if out.suffix == ".pgm" else out / "heatmap.pgm"
        render_heatmap(grid, target)
        print(f"heatmap written to {target}")
        return 0
    k = args.demo_outer
    seed = args.seed if args.seed is not None else 0
    rng = np.random.default_rng(seed)
    u = rng.uniform(size=k)
    v = rng.uniform(size=k)
    perm = FactorPermutation.random(k, seed=seed + 1)
    out.mkdir(parents=True, exist_ok=True)
    render_heatmap(u, out / "u.pgm")
    render_heatmap(v, out / "v.pgm")
    render_heatmap(outer_product(u, v).values, out / "map.pgm")
    render_heatmap(u[perm.perm], out / "u_permuted.pgm")
    render_heatmap(v[perm.perm], out / "v_permuted.pgm")
    render_heatmap(outer_product(u[perm.perm], v[perm.perm]).values,
                   out / "map_permuted.pgm")
    print(f"demo heatmaps written to {out}")
    return 0


def _print_rows(report) -> None:
    for row in report.rows():
        flag = " (single run)" if row["single_run"] else ""
        print(f"  {row['model']} [{row['mode']}] {row['metric']}: "
              f"{row['mean']:.4f} ± {row['std']:.4f}{flag}")


# ---------------------------------------------------------------------------
# Dispatch


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="recslab",
        description="Evaluation laboratory for convolution-over-interaction-map "
                    "recommenders and non-neural baselines.")
    sub = parser.add_subparsers(dest="command", metavar="command")

    def add(name, fn, help_text, needs_config=True):
        p = sub.add_parser(name, help=help_text)
        if needs_config:
            p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads for evaluation (1 = fully deterministic)")
        p.add_argument("--out", default=None, help="override the output location")
        p.set_defaults(fn=fn)
        return p

    add("prepare-data", _cmd_prepare_data, "load/generate a dataset and write splits")
    add("fit", _cmd_fit, "fit one algorithm and save its checkpoint")
    add("evaluate", _cmd_evaluate, "evaluate a saved model on a split")
    add("hpo", _cmd_hpo, "Bayesian hyperparameter search + retrain")
    add("perm-study", _cmd_perm_study, "factor-permutation study")
    add("ablation1", _cmd_ablation1, "train on full map, infer on components")
    add("ablation2", _cmd_ablation2, "train from scratch on components")
    add("compare-baselines", _cmd_compare_baselines,
        "tuned baseline comparison table")
    heatmap_p = add("heatmap", _cmd_heatmap, "render PGM heatmaps",
                    needs_config=False)
    heatmap_p.add_argument("--input", default=None,
                           help="CSV matrix to render")
    heatmap_p.add_argument("--demo-outer", type=int, default=None,
                           help="emit outer-product demo grids for K factors")
    return parser


def cli_dispatch(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    if getattr(args, "fn", None) is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.fn(args)
    except (ConfigError, UserError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


def main() -> None:
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
