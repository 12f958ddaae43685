"""Acceptance suite: one test per release criterion, each printing a pass line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines. Every tolerance and runtime bound is asserted here, not eyeballed.
"""

import json
import math
import random
import time

import numpy as np
from sklearn.metrics import adjusted_rand_score

from kcforge import (
    AFMData,
    AFMParams,
    BigramScorer,
    CachedScorer,
    FitConfig,
    ScoreRequest,
    agglomerate,
    assemble,
    build_q_matrix,
    compare,
    congruity_matrix,
    cut,
    fit,
    load_kc_model,
    load_question_bank,
    nll_and_gradient,
    opportunities,
    rmse,
)
from kcforge.cli import main as cli_main
from tests.conftest import ContextBlindScorer, CountingScorer, make_bank
from tests.synthgen import generate_afm_dataset, shuffle_labels
from tests.test_afm import numerical_gradient
from tests.test_cli import data_path
from tests.test_clustering import merge_member_sets, naive_upgma, planted_distance


def report(n: int, message: str, elapsed: float | None = None) -> None:
    suffix = f" [{elapsed:.2f}s]" if elapsed is not None else ""
    print(f"PASS criterion {n}: {message}{suffix}")


def test_criterion_1_mock_scorer_exactness(trained_mock):
    start = time.perf_counter()
    untrained = BigramScorer()
    result = untrained.score(ScoreRequest("", "ab"))
    assert abs(result.logprob - 2 * math.log(1.0 / 257.0)) <= 1e-12

    rng = random.Random(20240517)
    alphabet = "abcdefgh ijklmnop qrstuvwx yz.?!\né→汉"
    checked = 0
    for _ in range(1000):
        x = "".join(rng.choice(alphabet) for _ in range(rng.randrange(0, 48)))
        y = "".join(rng.choice(alphabet) for _ in range(rng.randrange(0, 48)))
        whole = trained_mock.score(ScoreRequest("", x + y)).logprob
        parts = (trained_mock.score(ScoreRequest("", x)).logprob
                 + trained_mock.score(ScoreRequest(x, y)).logprob)
        assert whole == parts, (x, y)
        checked += 1
    elapsed = time.perf_counter() - start
    assert elapsed < 1.0
    report(1, f"mock scores 'ab' at 2*ln(1/257) within 1e-12; chain rule exact on "
              f"{checked} random pairs", elapsed)


def test_criterion_2_pmi_zero_law(trained_mock):
    start = time.perf_counter()
    blind = ContextBlindScorer(trained_mock)
    matrix = congruity_matrix(make_bank(10), blind)
    off = ~np.eye(10, dtype=bool)
    worst = float(np.max(np.abs(matrix.values[off])))
    assert worst <= 1e-12
    elapsed = time.perf_counter() - start
    assert elapsed < 1.0
    report(2, f"context-independent scorer yields |congruity| <= 1e-12 "
              f"(worst {worst:.1e}) on a 10-question bank", elapsed)


def test_criterion_3_congruity_determinism_and_economy(tmp_path, trained_mock):
    bank = make_bank(20)
    counting = CountingScorer(trained_mock)
    matrix = congruity_matrix(bank, counting)
    assert counting.unconditional_calls == 20
    assert counting.conditional_calls == 380

    rng = np.random.default_rng(9)
    perm = rng.permutation(20)
    permuted_bank = type(bank)(tuple(bank.questions[i] for i in perm))
    permuted = congruity_matrix(permuted_bank, trained_mock)
    for a in bank.ids:
        for b in bank.ids:
            if a != b:
                assert matrix.value(a, b) == permuted.value(a, b)

    cache_file = tmp_path / "scores.cache"
    congruity_matrix(bank, CachedScorer(CountingScorer(trained_mock), cache_file))
    cold = CountingScorer(trained_mock)
    rerun = congruity_matrix(bank, CachedScorer(cold, cache_file))
    assert cold.total_calls == 0
    assert np.array_equal(matrix.values, rerun.values, equal_nan=True)
    report(3, "20 unconditional + 380 conditional calls; permutation exact; "
              "warm-cache rerun issues 0 backend calls")


def test_criterion_4_clustering_oracle_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(31337)
    trials = 0
    for _ in range(200):
        n = int(rng.integers(2, 8))
        a = rng.uniform(0.05, 1.0, size=(n, n))
        values = (a + a.T) / 2.0
        np.fill_diagonal(values, 0.0)
        from kcforge import DistanceMatrix

        dist = DistanceMatrix(tuple(f"r{i}" for i in range(n)), values)
        expected = naive_upgma(dist.ids, dist.values)
        actual = merge_member_sets(agglomerate(dist))
        for (ea, eb, eh), (aa, ab, ah) in zip(expected, actual):
            assert {ea, eb} == {aa, ab}
            assert abs(ah - eh) <= 1e-9
        trials += 1

    for sizes in ([3, 3], [4, 3, 5]):
        dist, truth = planted_distance(sizes)
        part = cut(agglomerate(dist), len(sizes))
        labels = [part.label_of[qid] for qid in dist.ids]
        assert adjusted_rand_score(truth, labels) == 1.0
    elapsed = time.perf_counter() - start
    assert elapsed < 10.0
    report(4, f"UPGMA matches the naive oracle on {trials} random matrices (n<=7); "
              f"planted 2- and 3-block recovery at ARI=1.0", elapsed)


def test_criterion_5_afm_gradient_check():
    start = time.perf_counter()
    rng = np.random.default_rng(2718)
    worst = 0.0
    for _ in range(50):
        n_students = int(rng.integers(2, 31))
        n_kcs = int(rng.integers(1, 11))
        n_rows = int(rng.integers(5, 301))
        students = tuple(f"s{i}" for i in range(n_students))
        labels = tuple(f"k{i}" for i in range(n_kcs))
        rows, kcs, ts = [], [], []
        for r in range(n_rows):
            for k in rng.choice(n_kcs, size=int(rng.integers(1, min(n_kcs, 3) + 1)),
                                replace=False):
                rows.append(r)
                kcs.append(int(k))
                ts.append(float(rng.integers(0, 8)))
        data = AFMData(
            student_ids=students,
            kc_labels=labels,
            student_idx=rng.integers(0, n_students, size=n_rows).astype(np.int64),
            y=rng.integers(0, 2, size=n_rows).astype(np.float64),
            row_idx=np.array(rows, dtype=np.int64),
            kc_idx=np.array(kcs, dtype=np.int64),
            t=np.array(ts, dtype=np.float64),
        )
        params = AFMParams(
            student_ids=students, kc_labels=labels,
            theta=rng.normal(scale=0.8, size=n_students),
            beta=rng.normal(scale=0.8, size=n_kcs),
            gamma=rng.uniform(0, 0.8, size=n_kcs),
        )
        lam = float(rng.uniform(0, 0.5))
        _, grad = nll_and_gradient(params, data, lam)
        numeric = numerical_gradient(params, data, lam, step=1e-5)
        for name in ("theta", "beta", "gamma"):
            analytic = getattr(grad, name)
            scale = np.maximum(np.maximum(np.abs(numeric[name]), np.abs(analytic)), 1e-8)
            worst = max(worst, float(np.max(np.abs(analytic - numeric[name]) / scale)))
    assert worst <= 1e-4
    elapsed = time.perf_counter() - start
    assert elapsed < 30.0
    report(5, f"analytic gradient matches central differences on 50 instances "
              f"(max rel err {worst:.1e})", elapsed)


def test_criterion_6_afm_optimizer_quality():
    from kcforge import KCModel, Question, QuestionBank, StepLog, StudentStep
    from kcforge.afm import _fit_assembled

    bank = QuestionBank((Question("q1", "only question"),))
    q = build_q_matrix(KCModel("m", {"q1": frozenset({"A"})}), bank)
    log = StepLog(tuple(
        StudentStep("s1", "q1", i, y) for i, y in enumerate([1, 0, 1, 1])
    ))
    opp = opportunities(log, q)
    cfg = FitConfig(lambda_theta=0.1)
    fitted = fit(log, q, opp, cfg)
    data = assemble(log, q, opp)
    fitted_obj = nll_and_gradient(fitted, data, cfg.lambda_theta)[0]

    grid = np.arange(-3.0, 3.0 + 1e-9, 0.05)
    gamma_grid = np.arange(0.0, 3.0 + 1e-9, 0.05)
    t = np.array([0.0, 1.0, 2.0, 3.0])
    y = np.array([1.0, 0.0, 1.0, 1.0])
    th, be, ga = np.meshgrid(grid, grid, gamma_grid, indexing="ij")
    z = th[..., None] + be[..., None] + ga[..., None] * t
    p = np.clip(1.0 / (1.0 + np.exp(-z)), 1e-12, 1 - 1e-12)
    objective = -(y * np.log(p) + (1 - y) * np.log(1 - p)).sum(axis=-1)
    objective += 0.5 * cfg.lambda_theta * th**2
    oracle_min = float(objective.min())
    assert fitted_obj <= oracle_min + 1e-2

    rng = np.random.default_rng(6)
    for _ in range(5):
        n_rows = 40
        data_r = AFMData(
            student_ids=tuple(f"s{i}" for i in range(4)),
            kc_labels=("a", "b"),
            student_idx=rng.integers(0, 4, size=n_rows).astype(np.int64),
            y=rng.integers(0, 2, size=n_rows).astype(np.float64),
            row_idx=np.arange(n_rows, dtype=np.int64),
            kc_idx=rng.integers(0, 2, size=n_rows).astype(np.int64),
            t=rng.integers(0, 5, size=n_rows).astype(np.float64),
        )
        params = _fit_assembled(data_r, cfg)
        assert np.all(params.gamma >= 0.0)
        history = params.objective_history
        assert all(b <= a for a, b in zip(history, history[1:]))
    report(6, f"fitted objective {fitted_obj:.6f} <= grid oracle {oracle_min:.6f} + 1e-2; "
              "gamma >= 0; objective monotone")


def test_criterion_7_methodology_reproduction_at_desk_scale():
    start = time.perf_counter()
    wins = 0
    margins = []
    for seed in range(10):
        bank, log, true_model = generate_afm_dataset(
            seed, n_students=200, n_questions=50, n_kcs=5
        )
        shuffled = shuffle_labels(true_model, seed + 5000)
        reports = compare([true_model, shuffled], log, bank, folds=10,
                          cfg=FitConfig(seed=seed))
        by_name = {r.model_name: r for r in reports}
        true_rmse = by_name[true_model.name].cv_rmse
        shuffled_rmse = by_name[shuffled.name].cv_rmse
        margins.append(shuffled_rmse - true_rmse)
        if true_rmse < shuffled_rmse:
            wins += 1
    elapsed = time.perf_counter() - start
    assert wins >= 9, margins
    assert elapsed < 60.0
    report(7, f"true KC model beats label-shuffled model in {wins}/10 seeds "
              f"(mean margin {np.mean(margins):.4f} RMSE)", elapsed)


def test_criterion_8_end_to_end_pipeline(tmp_path):
    start = time.perf_counter()
    out = tmp_path / "run"
    args = ["pipeline", "--config", data_path("pipeline12.yaml"), "--out", str(out)]
    assert cli_main(args) == 0

    bank = load_question_bank(data_path("bank12.yaml"))
    model = load_kc_model(out / "kc_model.csv", bank)
    assert len(model.labels) == 3
    groups = {}
    for qid, labels in model.assignment.items():
        groups.setdefault(next(iter(labels)), set()).add(qid)
    expected = [{"a1", "a2", "a3", "a4"}, {"i1", "i2", "i3", "i4"},
                {"q1", "q2", "q3", "q4"}]
    assert sorted(groups.values(), key=min) == expected

    names = ["congruity.csv", "kc_model.csv", "dendrogram.txt", "report.csv",
             "manifest.json"]
    before = {n: (out / n).read_bytes() for n in names}
    assert cli_main(args + ["--force"]) == 0
    after = {n: (out / n).read_bytes() for n in names}
    assert before == after

    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["model_id"].startswith("mock-bigram:")
    elapsed = time.perf_counter() - start
    assert elapsed < 10.0
    report(8, "pipeline selects k=3, groups the three vocabularies exactly, "
              "and a forced rerun is byte-identical", elapsed)


def test_criterion_9_rmse_and_information_criteria_arithmetic():
    value = rmse([0.8, 0.6, 0.3, 0.9], [1, 1, 0, 1])
    assert abs(value - 0.27386127875258304) <= 1e-12
    assert abs(value - math.sqrt(0.075)) <= 1e-12

    bank, log, model = generate_afm_dataset(3, n_students=12, n_questions=8, n_kcs=3)
    from kcforge import cross_validate

    rep = cross_validate(log, model, bank, folds=4, cfg=FitConfig(seed=1))
    n = len(log.rows)
    assert rep.n_params == len(log.student_index) + 2 * rep.n_kcs
    assert rep.aic == 2 * rep.n_params - 2 * rep.log_likelihood
    assert rep.bic == rep.n_params * math.log(n) - 2 * rep.log_likelihood
    report(9, "rmse([0.8,0.6,0.3,0.9],[1,1,0,1]) = 0.2738612788... within 1e-12; "
              "AIC/BIC recompute exactly from reported LL, p, n")
