"""Acceptance suite: one test per release criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines. The heavyweight structural study (criterion 8) takes a few minutes;
everything else is fast. Stated runtime budgets are asserted.
"""

import json
import math
import time

import numpy as np
import pytest
import scipy.stats

from recslab.baselines import (
    fit_mf_bpr,
    fit_puresvd,
    ials_solve_user,
    slim_fit_column,
)
from recslab.cli import cli_dispatch
from recslab.convrec import ConvRecModel, ConvTowerConfig, TrainConfig, backward, train, triple_objective
from recslab.dataio import InteractionMatrix, SplitTriple, leave_one_out_split
from recslab.embed import EmbeddingPair, MaskMode, apply_mask, outer_product
from recslab.evaluation import evaluate_loo, hit_at, ndcg_at
from recslab.hpo import HyperparameterSpace, RealDim, bayesian_search
from recslab.stats import (
    PairedSamples,
    paired_t_test,
    significance_pipeline,
    wilcoxon_signed_rank,
)
from recslab.studies import ConvRecipe, run_ablation_1, run_permutation_study
from recslab.synthetic import generate_synthetic


def _report(number: int, text: str) -> None:
    print(f"\n[ACCEPTANCE] criterion {number}: PASS — {text}")


def benchmark_500(seed=42):
    matrix = generate_synthetic(n_users=500, n_items=500, latent_dim=8,
                                factor_correlation=0.3, popularity_skew=1.0,
                                interactions_per_user=12, noise=0.1, seed=seed)
    return matrix, leave_one_out_split(matrix, seed=seed)


def test_criterion_1_permutation_invariance():
    start = time.monotonic()
    _, split = benchmark_500()
    pair = fit_mf_bpr(split.train, factors=8, epochs=30, lr=0.05, reg=0.01, seed=7)
    report = run_permutation_study(pair, split, n_permutations=20, cutoff=10,
                                   n_negatives=99, seed=5)
    for metric in ("hr@10", "ndcg@10"):
        values = report.values("mf_bpr", "dot-product", metric)
        assert len(values) == 20
        assert float(np.std(values, ddof=0)) <= 1e-9, metric
    elapsed = time.monotonic() - start
    assert elapsed < 120.0, f"took {elapsed:.1f}s, budget is 2 minutes"
    _report(1, f"20 permutations, HR/NDCG std <= 1e-9, {elapsed:.1f}s")


def test_criterion_2_exact_map_identity():
    rng = np.random.default_rng(0)
    for trial in range(1000):
        k = int(rng.integers(2, 17))
        p = rng.normal(size=k)
        q = rng.normal(size=k)
        emap = outer_product(p, q)
        assert np.array_equal(np.diag(emap.values), p * q)
        recomposed = (apply_mask(emap, MaskMode.ELEMENT_WISE).values
                      + apply_mask(emap, MaskMode.CORRELATIONS).values)
        assert np.array_equal(recomposed, emap.values)
    _report(2, "diag == elementwise product bitwise; masks partition E, 1000 vectors")


def test_criterion_3_gradient_fidelity():
    start = time.monotonic()
    rng = np.random.default_rng(3)
    pair = EmbeddingPair(rng.normal(size=(5, 4)), rng.normal(size=(6, 4)))
    cfg = TrainConfig(regularization={"conv": 0.02, "head": 0.03, "emb": 0.01})
    worst = 0.0
    for mode in ("frozen", "learnable"):
        for mask in MaskMode:
            model = ConvRecModel(pair.copy(),
                                 ConvTowerConfig(channels=(3, 2), seed=11),
                                 embedding_mode=mode)
            for layer in range(len(model.biases)):
                model.biases[layer] = rng.normal(scale=0.3,
                                                 size=model.biases[layer].shape)
            u, i, j = 1, 2, 4
            grads = backward(model, (u, i, j), mask, cfg)
            h = 1e-6

            def fd_for(array):
                out = np.zeros_like(array)
                flat_out = out.reshape(-1)
                flat = array.reshape(-1)
                for idx in range(flat.size):
                    orig = flat[idx]
                    flat[idx] = orig + h
                    up = triple_objective(model, u, i, j, mask, cfg)
                    flat[idx] = orig - h
                    down = triple_objective(model, u, i, j, mask, cfg)
                    flat[idx] = orig
                    flat_out[idx] = (up - down) / (2 * h)
                return out

            groups = []
            for layer in range(len(model.weights)):
                groups.append((grads["conv_w"][layer], fd_for(model.weights[layer])))
                groups.append((grads["conv_b"][layer], fd_for(model.biases[layer])))
            groups.append((grads["head_w"], fd_for(model.head_w)))
            if mode == "learnable":
                groups.append((grads["p_u"], fd_for(model.pair.P[u])))
                groups.append((grads["q_i"], fd_for(model.pair.Q[i])))
                groups.append((grads["q_j"], fd_for(model.pair.Q[j])))
            for analytic, numeric in groups:
                rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-8)
                worst = max(worst, float(rel.max()))
    assert worst < 1e-4, f"worst relative error {worst:.2e}"
    elapsed = time.monotonic() - start
    assert elapsed < 60.0, f"took {elapsed:.1f}s, budget is 1 minute"
    _report(3, f"all parameter groups, all masks, both modes; "
               f"max rel err {worst:.2e}, {elapsed:.1f}s")


def test_criterion_4_oracle_equivalence():
    start = time.monotonic()
    rng = np.random.default_rng(4)

    # iALS half-step vs dense weighted least-squares solve
    n_items, factors = 20, 5
    y = rng.normal(size=(n_items, factors))
    observed = np.sort(rng.choice(n_items, size=8, replace=False))
    values = rng.uniform(1, 4, size=8)
    alpha, reg = 6.0, 0.2
    conf = np.ones(n_items)
    conf[observed] = 1.0 + alpha * values
    pref = np.zeros(n_items)
    pref[observed] = 1.0
    dense = np.linalg.solve(y.T @ np.diag(conf) @ y + reg * np.eye(factors),
                            y.T @ np.diag(conf) @ pref)
    ours = ials_solve_user(y, observed, values, alpha, reg)
    assert np.abs(ours - dense).max() < 1e-8

    # PureSVD rank-k vs reference dense truncation (Frobenius)
    entries = sorted({(int(rng.integers(12)), int(rng.integers(9)))
                      for _ in range(60)})
    matrix = InteractionMatrix(12, 9, np.array([e[0] for e in entries]),
                               np.array([e[1] for e in entries]),
                               np.ones(len(entries)))
    dense_r = matrix.to_csr().toarray()
    u_ref, s_ref, vt_ref = np.linalg.svd(dense_r, full_matrices=False)
    for rank in (1, 3, 5):
        model = fit_puresvd(matrix, rank=rank)
        ours_err = np.linalg.norm(model.user_factors @ model.item_factors.T - dense_r)
        ref_err = np.linalg.norm(u_ref[:, :rank] * s_ref[:rank] @ vt_ref[:rank] - dense_r)
        assert abs(ours_err - ref_err) < 1e-8

    # SLIM coordinate descent vs projected-gradient oracle on 8 items
    entries = sorted({(int(rng.integers(14)), int(rng.integers(8)))
                      for _ in range(45)})
    slim_matrix = InteractionMatrix(14, 8, np.array([e[0] for e in entries]),
                                    np.array([e[1] for e in entries]),
                                    np.ones(len(entries)))
    dense_s = slim_matrix.to_csr().toarray()
    l1, l2 = 0.05, 0.1

    def objective(w, target):
        resid = dense_s[:, target] - dense_s @ w
        return 0.5 * resid @ resid + l1 * w.sum() + 0.5 * l2 * w @ w

    lipschitz = np.linalg.eigvalsh(dense_s.T @ dense_s).max() + l2
    for target in range(8):
        col = slim_fit_column(slim_matrix, target, l1, l2, top_k=8,
                              max_iter=3000, tol=1e-12)
        w_pg = np.zeros(8)
        for _ in range(30000):
            grad = -dense_s.T @ (dense_s[:, target] - dense_s @ w_pg) + l1 + l2 * w_pg
            w_pg = np.maximum(0.0, w_pg - grad / lipschitz)
            w_pg[target] = 0.0
        assert objective(col.dense(8), target) <= objective(w_pg, target) + 1e-6

    elapsed = time.monotonic() - start
    assert elapsed < 60.0, f"took {elapsed:.1f}s, budget is 1 minute"
    _report(4, f"iALS 1e-8, PureSVD 1e-8, SLIM within 1e-6 of oracle, {elapsed:.1f}s")


def test_criterion_5_metric_correctness():
    assert ndcg_at(3, 10) == pytest.approx(0.5)
    assert hit_at(10, 10) == 1
    assert hit_at(11, 10) == 0
    assert hit_at(1, 1) == 1
    assert ndcg_at(1, 1) == 1.0
    assert ndcg_at(11, 10) == 0.0

    # Hand-built 3-user instance, constant scores: candidates per user are the
    # catalog minus train items minus the positive; item 5 (the positive) is
    # tied with three lower-indexed negatives, so its rank is 4 for every user.
    def make(n_users, n_items, entries, tag):
        users = np.array([e[0] for e in entries], dtype=np.int64)
        items = np.array([e[1] for e in entries], dtype=np.int64)
        return InteractionMatrix(n_users, n_items, users, items,
                                 np.ones(len(entries)), tag=tag)

    split = SplitTriple(
        train=make(3, 6, [(0, 0), (0, 1), (1, 1), (1, 2), (2, 2), (2, 3)], "train"),
        validation=make(3, 6, [(0, 4), (1, 4), (2, 4)], "validation"),
        test=make(3, 6, [(0, 5), (1, 5), (2, 5)], "test"),
        seed=0,
    )

    class Constant:
        def score_items(self, user, items):
            return np.zeros(len(items))

    result = evaluate_loo(Constant(), split, n_negatives=None, cutoffs=(1, 3, 10))
    assert result.ranks.tolist() == [4, 4, 4]
    assert result.metric("hr", 3) == 0.0
    assert result.metric("hr", 10) == 1.0
    assert result.metric("ndcg", 10) == pytest.approx(1.0 / math.log2(5))
    _report(5, "ndcg_at(3,10)=0.5, hit boundaries, 3-user instance hand-verified")


def test_criterion_6_hpo_convergence():
    start = time.monotonic()
    space = HyperparameterSpace((RealDim("x", 0.0, 1.0),))
    hits = 0
    for seed in range(10):
        trace = bayesian_search(space, lambda c: -(c["x"] - 0.3) ** 2,
                                n_calls=50, n_random_init=15, seed=seed)
        if abs(trace.best_config["x"] - 0.3) < 0.05:
            hits += 1
    assert hits == 10, f"only {hits}/10 seeds within 0.05 of the optimum"
    _report(6, f"10/10 seeds within 0.05 of x*=0.3, {time.monotonic()-start:.1f}s")


def test_criterion_7_statistics():
    # exact Wilcoxon for n=5 all-positive differences
    w, p = wilcoxon_signed_rank(PairedSamples(np.array([1.0, 2, 3, 4, 5]),
                                              np.zeros(5)))
    assert w == 0.0
    assert p == pytest.approx(0.0625, abs=1e-15)

    # t statistic for {1,2,3,4,5} against the direct formula
    t, _ = paired_t_test(PairedSamples(np.array([1.0, 2, 3, 4, 5]), np.zeros(5)))
    d = np.array([1.0, 2, 3, 4, 5])
    direct = d.mean() / (d.std(ddof=1) / math.sqrt(5))
    assert abs(t - direct) < 1e-10

    # pipeline selects t on normal-quantile differences, Wilcoxon on exponential
    normal_d = scipy.stats.norm.ppf((np.arange(1, 26) - 0.5) / 25)
    record = significance_pipeline(PairedSamples(normal_d, np.zeros(25)))
    assert record.test_used == "paired_t"
    expo_d = scipy.stats.expon.ppf((np.arange(1, 41) - 0.5) / 40)
    record = significance_pipeline(PairedSamples(expo_d, np.zeros(40)))
    assert record.test_used == "wilcoxon"
    _report(7, "Wilcoxon exact 0.0625, t matches formula, pipeline branches correctly")


def test_criterion_8_ablation_structural_mirror():
    start = time.monotonic()
    _, split = benchmark_500(seed=42)
    pair = fit_mf_bpr(split.train, factors=8, epochs=60, lr=0.05, reg=0.01, seed=7)
    recipe = ConvRecipe(channels=(16, 16, 16), kernel_size=2, stride=2,
                        tower_init_scale=0.15, embedding_mode="frozen",
                        latent_dim=8, learning_rate=0.05, batch_size=128,
                        max_epochs=40, patience=5, validation_negatives=99,
                        regularization={"conv": 0.01, "head": 0.01})
    report = run_ablation_1(recipe, n_repeats=20, cutoff=10, n_negatives=99,
                            seed=23, split=split, pretrained=pair)
    for metric in ("hr@10", "ndcg@10"):
        ew = report.decision("full vs element-wise", metric)
        assert not ew["significant"], \
            f"full vs element-wise unexpectedly significant on {metric} " \
            f"(p={ew['p']})"
        corr = report.decision("full vs correlations", metric)
        assert corr["significant"], \
            f"full vs correlations not significant on {metric} (p={corr['p']})"
        full_mean = np.mean(report.values("convrec", "full", metric))
        corr_mean = np.mean(report.values("convrec", "correlations", metric))
        assert corr_mean < full_mean, f"correlations not worse on {metric}"
    elapsed = time.monotonic() - start
    assert elapsed < 1800.0, f"took {elapsed:.1f}s, budget is 30 minutes"
    _report(8, f"full~element-wise n.s., correlations significantly worse, "
               f"{elapsed:.0f}s for 20 repeats")


def test_criterion_9_early_stopping():
    rng = np.random.default_rng(9)
    entries = sorted({(int(rng.integers(8)), int(rng.integers(10)))
                      for _ in range(40)})
    users = np.array([e[0] for e in entries])
    items = np.array([e[1] for e in entries])
    matrix = InteractionMatrix(8, 10, users, items, np.ones(len(entries)))
    split = leave_one_out_split(matrix, seed=1)
    pair = EmbeddingPair(rng.normal(size=(8, 4)), rng.normal(size=(10, 4)))
    model = ConvRecModel(pair, ConvTowerConfig(channels=(2, 2), seed=2))

    snapshots = []

    def scripted(m):
        snapshots.append(m.parameters_copy())
        return 0.5  # never improves after the first evaluation

    cfg = TrainConfig(max_epochs=100, patience=5, eval_interval=1,
                      learning_rate=0.01, seed=3)
    trained, trace = train(model, split, cfg, MaskMode.FULL, scripted)
    assert trace.stopped_early
    assert len(trace.rows) == 6  # first eval + exactly 5 non-improving steps
    assert trace.best_eval_step == 1
    np.testing.assert_array_equal(trained.head_w, snapshots[0]["head_w"])
    for layer in range(len(trained.weights)):
        np.testing.assert_array_equal(trained.weights[layer],
                                      snapshots[0]["weights"][layer])
    _report(9, "stops after exactly 5 non-improving evaluations, best restored")


def test_criterion_10_reproducibility(tmp_path):
    config = {
        "dataset": {"synthetic": {"n_users": 40, "n_items": 30, "latent_dim": 4,
                                  "interactions_per_user": 8, "noise": 0.05,
                                  "seed": 3}},
        "split": {"seed": 3},
        "pretrain": {"factors": 4, "epochs": 6, "learning_rate": 0.05,
                     "regularization": 0.01, "seed": 1},
        "conv": {"channels": [4, 4], "embedding_mode": "frozen", "latent_dim": 4,
                 "max_epochs": 3, "validation_negatives": None},
        "study": {"n_permutations": 2, "cutoff": 10, "n_negatives": 9, "seed": 6},
    }
    outputs = []
    for name in ("one", "two"):
        payload = dict(config, output_dir=str(tmp_path / name))
        config_path = tmp_path / f"{name}.json"
        config_path.write_text(json.dumps(payload), encoding="utf-8")
        code = cli_dispatch(["perm-study", "--config", str(config_path),
                             "--threads", "1"])
        assert code == 0
        outputs.append({f: (tmp_path / name / f).read_bytes()
                        for f in ("report.csv", "report.md", "report.json")})
    assert outputs[0] == outputs[1]
    _report(10, "identical config+seed+threads=1 gives bitwise-identical reports")
