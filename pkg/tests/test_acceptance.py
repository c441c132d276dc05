"""Acceptance criteria: one test per criterion, each printing a PASS/FAIL line."""

import itertools
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, achievable_fixture, sign_mixed_fixture
from taskbasis.arithmetic import MergeSpec, merge_ta, negate, trim_count, trim_elect_merge
from taskbasis.bases import (
    AeConfig,
    achievability_certificate,
    ae_loss_gram,
    finite_difference_check,
    fit_ae,
    fit_pca,
    fit_rand_proj,
    fit_rand_select,
)
from taskbasis.online import run_stream
from taskbasis.testbed import (
    generate_suite,
    measure_constants,
    random_simplex,
    verify_addition_bound,
    verify_negation_bound,
    verify_ood_bound,
)
from taskbasis.vecstore import TaskVectorMatrix, gram, spectral_bounds

CLUSTERED = "clustered:4:0.9:0.0"


def record(n, ok, detail, elapsed, limit):
    ok = bool(ok) and elapsed < limit
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail} ({elapsed:.2f}s, limit {limit:g}s)"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def truncation_error(X, M):
    s = np.linalg.svd(X, compute_uv=False)
    return float(np.sum(s[M:] ** 2))


def test_criterion_1_gram_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(50):
        T, d = int(rng.integers(1, 11)), int(rng.integers(1, 513))
        M = int(rng.integers(1, T + 1))
        X = rng.standard_normal((d, T)) * 10.0 ** rng.uniform(-3, 3)
        W_e, W_d = rng.standard_normal((T, M)), rng.standard_normal((M, T))
        R = X @ W_e @ W_d - X
        err = abs(ae_loss_gram(gram(TaskVectorMatrix(X)), W_e, W_d) - float(np.sum(R * R)))
        worst = max(worst, err / (1.0 + float(np.sum(X * X))))
    elapsed = time.perf_counter() - start
    assert record(1, worst <= 1e-9, f"worst scaled error {worst:.2e} over 50 instances", elapsed, 5)


def test_criterion_2_spectral_optimality():
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    worst_pca, worst_ae_margin = 0.0, np.inf
    for f in range(20):
        T, d = int(rng.integers(3, 11)), int(rng.integers(16, 513))
        M = int(rng.integers(1, T))
        X = rng.standard_normal((d, T)) @ rng.standard_normal((T, T))
        Xc = X - X.mean(axis=1, keepdims=True)
        centered = truncation_error(Xc, M)
        pca = fit_pca(TaskVectorMatrix(X), M)
        # centered data has rank T-1, so at M = T-1 the exact tail is zero and only roundoff remains
        energy = float(np.sum(Xc * Xc))
        scale = centered if centered > 1e-12 * energy else energy
        worst_pca = max(worst_pca, abs(pca.loss - centered) / scale)
        ae = fit_ae(TaskVectorMatrix(X), AeConfig(M=M, seed=f))
        # the uncentered truncation error is the sharper floor for a linear rank-M fit
        floor = max(centered, truncation_error(X, M))
        worst_ae_margin = min(worst_ae_margin, ae.loss - floor)
    elapsed = time.perf_counter() - start
    ok = worst_pca <= 1e-8 and worst_ae_margin >= -1e-9
    assert record(2, ok, f"PCA rel error {worst_pca:.2e}; min AE loss - floor {worst_ae_margin:.3e}", elapsed, 30)


def test_criterion_3_achievability():
    start = time.perf_counter()
    cfg = dict(anneal=(500, 0.8), decoder_mode="ols_refit")
    good = achievable_fixture()
    g = gram(good)
    cert = achievability_certificate(g, 2)
    gap = fit_ae(good, AeConfig(M=2, **cfg)).loss - spectral_bounds(g, 2).frobenius_lb
    bad = sign_mixed_fixture()
    gb = gram(bad)
    cert_bad = achievability_certificate(gb, 1)
    gap_bad = fit_ae(bad, AeConfig(M=1, **cfg)).loss - spectral_bounds(gb, 1).frobenius_lb
    elapsed = time.perf_counter() - start
    ok = cert.achievable and gap <= 1e-3 and not cert_bad.achievable and gap_bad > 1e-2
    detail = (f"positive fixture gap {gap:.2e} (witness found: {cert.achievable}); "
              f"sign-mixed gap {gap_bad:.3e} (witness found: {cert_bad.achievable})")
    assert record(3, ok, detail, elapsed, 60)


def test_criterion_4_gradients():
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(20):
        T = int(rng.integers(2, 9))
        M = int(rng.integers(1, T + 1))
        G = gram(TaskVectorMatrix(rng.standard_normal((int(rng.integers(T, 64)), T)))).entries
        tau = float(rng.uniform(0.5, 5.0))
        worst = max(worst, finite_difference_check(G, rng.standard_normal((T, M)),
                                                   rng.standard_normal((M, T)), tau))
    elapsed = time.perf_counter() - start
    assert record(4, worst <= 1e-5, f"max relative error {worst:.2e} over 20 configurations", elapsed, 10)


def test_criterion_5_theorem_suite():
    start = time.perf_counter()
    failures, checked, reached, residual_ok, na = 0, 0, 0, 0, 0
    for p, profile in enumerate(["orthogonal", CLUSTERED, "planted_target:0.8"]):
        suite = generate_suite(profile, d=256, T=8, seed=11, target_gamma=0.8)
        rng = np.random.default_rng(50 + p)
        k = measure_constants(suite)
        model = fit_ae(suite.matrix(), AeConfig(M=4, anneal=(500, 0.8), decoder_mode="ols_refit"))
        reports = []
        for _ in range(100):
            reports.append(verify_addition_bound(suite, random_simplex(suite.T, rng), constants=k))
            reports.append(verify_addition_bound(suite, random_simplex(model.M, rng), basis=model, constants=k))
            j, a = int(rng.integers(suite.T)), float(rng.uniform())
            reports.append(verify_negation_bound(suite, j, a))
            neg = verify_negation_bound(suite, j, a, basis=model)
            reports.append(neg)
            if neg.details["reached_spectral_bound"]:
                reached += 1
                residual_ok += neg.details["residual_within_spectral"]
        reports += [verify_ood_bound(suite), verify_ood_bound(suite, basis=model)]
        for r in reports:
            if not r.applicable:
                na += 1
                continue
            checked += 1
            failures += not r.passed
    elapsed = time.perf_counter() - start
    ok = failures == 0 and residual_ok == reached
    detail = (f"{checked} bound reports, {failures} violations, {na} not applicable; "
              f"spectral residual check {residual_ok}/{reached} negation draws at the bound")
    assert record(5, ok, detail, elapsed, 120)


def ties_oracle(V, k):
    d, n = V.shape
    out = np.zeros(d)
    kept = np.zeros_like(V)
    for j in range(n):
        col = V[:, j]
        for i in range(d):
            a = abs(col[i])
            rank = sum(1 for r in range(d) if abs(col[r]) > a) + sum(1 for r in range(i) if abs(col[r]) == a)
            if rank < k:
                kept[i, j] = col[i]
    for i in range(d):
        pos = sum(x for x in kept[i] if x > 0)
        neg = -sum(x for x in kept[i] if x < 0)
        sign = 1 if pos >= neg else -1
        out[i] = sum(x for x in kept[i] if x * sign > 0)
    return out


def test_criterion_6_ties_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(6)
    agree = mismatch = rejected = 0
    for d, T, frac in itertools.product(range(1, 9), range(1, 5), (0.25, 0.5, 1.0)):
        k = int(np.floor(frac * d + 0.5))
        if k < 1:
            with pytest.raises(ValueError, match="trim fraction too small"):
                trim_count(d, frac)
            rejected += 1
            continue
        fixtures = []
        if d * T <= 6:  # every matrix over {-1, 0, 1}
            fixtures += [np.array(v, float).reshape(d, T) for v in itertools.product((-1, 0, 1), repeat=d * T)]
        fixtures += [rng.integers(-3, 4, size=(d, T)).astype(float) for _ in range(40)]
        for V in fixtures:
            if np.array_equal(trim_elect_merge(V, frac), ties_oracle(V, k)):
                agree += 1
            else:
                mismatch += 1
    elapsed = time.perf_counter() - start
    detail = f"{agree} fixtures agree, {mismatch} mismatches, {rejected} (d, topk) pairs rejected as too small"
    assert record(6, mismatch == 0 and agree > 0, detail, elapsed, 5)


def test_criterion_7_online_contract():
    start = time.perf_counter()
    suite = generate_suite(CLUSTERED, d=1024, T=8, seed=7)
    m = suite.matrix()
    losses = [t.loss for t in suite.tasks]
    a = run_stream(m, 4, task_losses=losses, seed=3)
    b = run_stream(m, 4, task_losses=losses, seed=3)
    spec = MergeSpec("ta", alpha_grid=(0.3,))
    prefix_ok = all(
        a.thetas[t].tobytes()
        == merge_ta(TaskVectorMatrix(m.columns[:, : t + 1], theta0=m.theta0), lambda th: 0.0, spec).theta.tobytes()
        for t in range(4))
    sizes = [s["buffer_size"] for s in a.steps]
    elapsed = time.perf_counter() - start
    ok = max(sizes) <= 4 and a.compaction_count == 4 and prefix_ok and a.deterministic_view() == b.deterministic_view()
    detail = (f"buffer sizes {sizes}, {a.compaction_count} compactions, prefix bitwise {prefix_ok}, "
              f"replay identical {a.deterministic_view() == b.deterministic_view()}")
    assert record(7, ok, detail, elapsed, 30)


def test_criterion_8_method_ordering():
    start = time.perf_counter()
    scores = {"AE": [], "RandSelect": [], "PCA": []}
    for seed in range(5):
        suite = generate_suite(CLUSTERED, d=1024, T=8, seed=seed)
        m, ev = suite.matrix(), suite.evaluator()
        models = {"AE": fit_ae(m, AeConfig(M=4, seed=seed)), "RandSelect": fit_rand_select(m, 4, seed=seed),
                  "PCA": fit_pca(m, 4)}
        for name, model in models.items():
            scores[name].append(suite.mean_score(merge_ta(model, ev, MergeSpec()).theta))
    mean = {k: float(np.mean(v)) for k, v in scores.items()}
    std = {k: float(np.std(v, ddof=1)) for k, v in scores.items()}
    elapsed = time.perf_counter() - start
    ok = mean["AE"] >= mean["RandSelect"] >= mean["PCA"]
    detail = ", ".join(f"{k} {mean[k]:.4f} +- {std[k]:.4f}" for k in scores)
    assert record(8, ok, detail, elapsed, 120)


def test_criterion_9_online_variance():
    start = time.perf_counter()
    suite = generate_suite(CLUSTERED, d=1024, T=8, seed=7)
    m = suite.matrix()
    std = {}
    for comp in ("ae", "rand_select"):
        finals = []
        for o in range(5):
            order = np.random.default_rng(100 + o).permutation(m.T)
            stream = TaskVectorMatrix(m.columns[:, order], theta0=m.theta0)
            rep = run_stream(stream, 4, compaction=comp, task_losses=[suite.tasks[i].loss for i in order], seed=o)
            finals.append(float(np.mean(rep.final_scores())))
        std[comp] = float(np.std(finals, ddof=1))
    elapsed = time.perf_counter() - start
    detail = f"final-score std over 5 orders: AE {std['ae']:.5f}, RandSelect {std['rand_select']:.5f}"
    assert record(9, std["ae"] < std["rand_select"], detail, elapsed, 120)


def test_criterion_10_negation():
    start = time.perf_counter()
    suite = generate_suite(CLUSTERED, d=1024, T=8, seed=7)
    m = suite.matrix()
    ae = fit_ae(m, AeConfig(M=4))
    rp = fit_rand_proj(m, 4, seed=0)
    ae_ok = rp_flat = 0
    for j in range(m.T):
        out = negate(ae, j, suite.task_evaluator(j), suite.control_evaluator())
        p = out.provenance
        inc = p["target_loss"] - p["target_loss_theta0"]
        within = p["control_score"] >= p["control_floor"] * p["control_score_theta0"] - 1e-12
        ae_ok += inc > 0 and within
        q = negate(rp, j, suite.task_evaluator(j), suite.control_evaluator()).provenance
        rp_flat += (q["target_loss"] - q["target_loss_theta0"]) <= 0.1 * inc
    elapsed = time.perf_counter() - start
    detail = f"AE forgets with control in floor on {ae_ok}/8 targets; RandProj flat on {rp_flat}/8"
    assert record(10, ae_ok == 8 and rp_flat >= 6, detail, elapsed, 60)
