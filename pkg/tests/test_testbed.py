import itertools

import numpy as np
import pytest

from taskbasis.bases import AeConfig, fit_ae, fit_pca, fit_rand_select
from taskbasis.arithmetic import reconstruct
from taskbasis.testbed import (
    Profile,
    QuadraticTask,
    QuadraticTaskSuite,
    generate_suite,
    load_suite,
    measure_constants,
    random_simplex,
    save_suite,
    verify_addition_bound,
    verify_negation_bound,
    verify_ood_bound,
)
from taskbasis.vecstore import gram, spectral_bounds


def cosines(V):
    n = np.linalg.norm(V, axis=0)
    return (V.T @ V) / np.outer(n, n)


def two_task_suite(v1, v2):
    v1, v2 = np.asarray(v1, float), np.asarray(v2, float)
    theta0 = np.zeros(v1.size)
    H = np.ones(v1.size)
    return QuadraticTaskSuite(theta0, (QuadraticTask(v1, H, name="a"), QuadraticTask(v2, H, name="b")))


# ---- quadratic tasks ----------------------------------------------------------------


def test_quadratic_task_basics():
    rng = np.random.default_rng(0)
    t = QuadraticTask(rng.standard_normal(12), rng.uniform(0.1, 1, 12), rng.standard_normal((12, 2)))
    assert t.loss(t.minimizer) == 0.0 and np.all(t.grad(t.minimizer) == 0.0)
    theta = rng.standard_normal(12)
    delta = theta - t.minimizer
    brute = 0.5 * sum(delta[a] * t.dense_hessian()[a, b] * delta[b] for a in range(12) for b in range(12))
    assert t.loss(theta) == pytest.approx(brute, rel=1e-12)
    assert t.loss(theta) >= 0
    with pytest.raises(ValueError):
        QuadraticTask(np.zeros(3), np.array([1.0, -1.0, 1.0]))


def test_smoothness_diagonal():
    t = QuadraticTask(np.zeros(5), np.array([2.0, 0.5, 0.3, 0.2, 0.1]))
    assert t.smoothness() == pytest.approx(2.0, abs=1e-6)


# ---- generation -------------------------------------------------------------------------


def test_orthogonal_profile():
    s = generate_suite("orthogonal", d=128, T=8, seed=1)
    assert measure_constants(s).epsilon <= 0.02
    for t in s.tasks:
        assert 0.5 - 1e-9 <= t.smoothness() <= 2.0 + 1e-9
    norms = np.linalg.norm(s.matrix().columns, axis=0)
    assert np.all((norms >= 0.5) & (norms <= 1.0))


def test_clustered_profile():
    s = generate_suite("clustered:2:0.9:0.0", d=128, T=8, seed=1)
    K = cosines(s.matrix().columns)
    labels = np.array(s.profile["clusters"])
    for i, j in itertools.combinations(range(8), 2):
        if labels[i] == labels[j]:
            assert K[i, j] >= 0.88
        else:
            assert abs(K[i, j]) <= 0.02


def test_planted_target_gamma():
    s = generate_suite("planted_target:0.8", d=128, T=8, seed=1)
    k = measure_constants(s, s.target)
    assert 0.78 <= k.gamma <= 0.82


def test_generation_determinism_and_errors():
    a, b = generate_suite("orthogonal", d=64, T=4, seed=9), generate_suite("orthogonal", d=64, T=4, seed=9)
    assert np.array_equal(a.matrix().columns, b.matrix().columns)
    with pytest.raises(ValueError, match="infeasible cosine structure"):
        generate_suite(Profile("clustered", k=4, cos_in=0.9, cos_out=-0.9), d=64, T=4)
    with pytest.raises(ValueError):
        generate_suite("orthogonal", d=4, T=8)
    with pytest.raises(ValueError):
        Profile.parse("orthogonal:3")
    with pytest.raises(ValueError):
        Profile.parse("spiral")


# ---- constants ----------------------------------------------------------------------------


def test_constants_identical_unit_vectors():
    e = np.eye(4)[0]
    k = measure_constants(two_task_suite(e, e))
    assert k.epsilon == pytest.approx(1.0) and k.C == pytest.approx(1.0)


def test_constants_match_all_pairs_oracle():
    s = generate_suite("clustered:3:0.7:0.1", d=512, T=8, seed=7)
    V = s.matrix().columns
    C = max(sum(float(x) ** 2 for x in V[:, i]) for i in range(8))
    eps = 0.0
    for i, j in itertools.permutations(range(8), 2):
        dot = sum(float(a) * float(b) for a, b in zip(V[:, i], V[:, j]))
        ni = sum(float(a) ** 2 for a in V[:, i]) ** 0.5
        nj = sum(float(b) ** 2 for b in V[:, j]) ** 0.5
        eps = max(eps, abs(dot) / (ni * nj))
    k = measure_constants(s)
    assert k.C == pytest.approx(C, rel=1e-10) and k.epsilon == pytest.approx(eps, rel=1e-10)


def test_constants_scaling_and_duplicates():
    s = generate_suite("orthogonal", d=64, T=4, seed=2)
    k = measure_constants(s)
    scaled = QuadraticTaskSuite(s.theta0, tuple(QuadraticTask(s.theta0 + 3 * (t.minimizer - s.theta0), t.diag,
                                                              t.lowrank, t.name) for t in s.tasks))
    assert measure_constants(scaled).C == pytest.approx(9 * k.C, rel=1e-12)
    dup = QuadraticTaskSuite(s.theta0, s.tasks + (QuadraticTask(s.tasks[0].minimizer, s.tasks[0].diag, None, "dup"),))
    assert measure_constants(dup).epsilon >= k.epsilon


def test_rho_in_unit_interval():
    s = generate_suite("orthogonal", d=64, T=6, seed=2, target_gamma=0.7)
    model = fit_ae(s.matrix(), AeConfig(M=3, steps=200))
    k = measure_constants(s, s.target, model)
    assert 0 < k.rho <= 1


# ---- addition bound -------------------------------------------------------------------------


def test_addition_single_task_zero_gap():
    s = generate_suite("orthogonal", d=32, T=1, seed=0)
    r = verify_addition_bound(s, np.array([1.0]))
    assert r.passed and abs(r.records[0]["gap"]) <= 1e-12


def test_addition_uniform_orthogonal_positive_slack():
    s = generate_suite("orthogonal", d=128, T=8, seed=3)
    r = verify_addition_bound(s, np.full(8, 1 / 8))
    assert r.passed and all(rec["slack"] > 0 for rec in r.records)


def test_addition_clustered_bound_value():
    s = generate_suite("clustered:2:0.9:0.0", d=128, T=8, seed=3)
    k = measure_constants(s)
    assert k.epsilon == pytest.approx(0.9, abs=1e-9)
    r = verify_addition_bound(s, np.full(8, 1 / 8), constants=k)
    assert r.passed
    for rec in r.records:
        assert rec["bound"] == pytest.approx(k.L[rec["task"]] * k.C * 1.9, rel=1e-12)


def test_addition_rejects_off_simplex_and_nonconvex_basis():
    s = generate_suite("orthogonal", d=32, T=4, seed=0)
    with pytest.raises(ValueError, match="simplex"):
        verify_addition_bound(s, np.array([0.5, 0.5, 0.5, -0.5]))
    with pytest.raises(ValueError, match="convex"):
        verify_addition_bound(s, np.full(2, 0.5), basis=fit_pca(s.matrix(), 2))


def test_addition_basis_variant():
    s = generate_suite("orthogonal", d=64, T=6, seed=4)
    model = fit_rand_select(s.matrix(), 3, seed=1)
    r = verify_addition_bound(s, np.array([0.2, 0.3, 0.5]), basis=model)
    assert r.kind == "addition_basis" and r.passed and r.details["min_task_coefficient"] >= 0


# ---- OOD bound ----------------------------------------------------------------------------------


def test_ood_target_equal_to_source():
    s = generate_suite("orthogonal", d=64, T=4, seed=5, target_gamma=1.0)
    r = verify_ood_bound(s)
    assert r.details["gamma"] == pytest.approx(1.0) and abs(r.records[0]["gap"]) <= 1e-12 and r.passed


def test_ood_planted_target_passes():
    s = generate_suite("planted_target:0.8", d=128, T=8, seed=6)
    r = verify_ood_bound(s)
    assert r.applicable and r.passed and r.records[0]["slack"] >= 0


def test_ood_annealed_basis_near_raw():
    s = generate_suite("planted_target:0.8", d=128, T=8, seed=6)
    model = fit_ae(s.matrix(), AeConfig(M=4, anneal=(500, 0.8), decoder_mode="ols_refit"))
    r = verify_ood_bound(s, basis=model)
    k = measure_constants(s, s.target)
    assert r.details["rho_hat"] >= 0.95
    assert r.records[0]["bound"] - r.details["raw_bound"] <= 0.05 * k.L_target * k.C
    assert r.passed


def test_ood_not_applicable_without_alignment():
    s = generate_suite("orthogonal", d=64, T=4, seed=5)
    far = QuadraticTask(s.theta0 - s.matrix().columns.sum(axis=1), np.ones(64), name="far")
    r = verify_ood_bound(s, far)
    assert not r.applicable and r.passed is None


# ---- negation bound --------------------------------------------------------------------------------


def test_negation_orthogonal_positive_slack():
    s = generate_suite("orthogonal", d=128, T=8, seed=8)
    r = verify_negation_bound(s, 0, 1.0)
    assert r.passed and all(rec["slack"] > 0 for rec in r.records) and len(r.records) == 7


def test_negation_exact_reconstruction():
    s = generate_suite("orthogonal", d=64, T=4, seed=8)
    model = fit_pca(s.matrix(), 4, center=False)
    raw = verify_negation_bound(s, 1, 0.7)
    via = verify_negation_bound(s, 1, 0.7, basis=model)
    assert via.details["residual_norm2"] <= 1e-12
    k = measure_constants(s)
    for a, b in zip(raw.records, via.records):
        i = a["task"]
        assert b["gap"] == pytest.approx(a["gap"], abs=1e-10)
        core = k.L[i] * k.C * (2.5 + 2 * k.epsilon)
        assert b["bound"] == pytest.approx(core + k.L[i] * via.details["residual_norm2"], rel=1e-12)


def test_negation_residual_matches_reconstruction():
    s = generate_suite("clustered:4:0.9:0.0", d=128, T=8, seed=9)
    model = fit_ae(s.matrix(), AeConfig(M=4, anneal=(500, 0.8), decoder_mode="ols_refit"))
    lam = spectral_bounds(gram(s.matrix()), 4).spectral_lb
    for j in range(8):
        r = verify_negation_bound(s, j, 1.0, basis=model)
        e = reconstruct(model).column(j) - s.matrix().column(j)
        assert r.details["residual_norm2"] == pytest.approx(float(e @ e), abs=1e-10)
        assert r.passed
        if r.details["reached_spectral_bound"]:
            assert r.details["residual_norm2"] <= lam + 1e-8


def test_negation_errors():
    s = generate_suite("orthogonal", d=32, T=3, seed=0)
    with pytest.raises(IndexError):
        verify_negation_bound(s, 3, 0.5)
    with pytest.raises(ValueError):
        verify_negation_bound(s, 0, 1.5)


# ---- reports and serialization ------------------------------------------------------------------------


def test_report_exports():
    s = generate_suite("orthogonal", d=32, T=3, seed=0)
    r = verify_addition_bound(s, random_simplex(3, np.random.default_rng(0)))
    text = r.to_csv()
    assert text.splitlines()[0].startswith("kind,") and len(text.splitlines()) == 4
    assert r.to_dict()["kind"] == "addition"


def test_suite_roundtrip(tmp_path):
    s = generate_suite("planted_target:0.8", d=64, T=5, seed=3)
    save_suite(s, tmp_path / "suite")
    back = load_suite(tmp_path / "suite")
    assert np.array_equal(back.matrix().columns, s.matrix().columns)
    assert np.array_equal(back.theta0, s.theta0)
    theta = np.random.default_rng(0).standard_normal(64)
    for a, b in zip(s.all_tasks(), back.all_tasks()):
        # minimizers are rebuilt as theta0 + tau, which can move the last bit
        assert a.name == b.name and a.loss(theta) == pytest.approx(b.loss(theta), rel=1e-14)
    assert back.profile == s.profile
