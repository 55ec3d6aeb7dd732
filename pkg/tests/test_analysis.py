import csv
import io
import math

import numpy as np
import pytest

from matkaczmarz import analysis, matcore, problems
from matkaczmarz.errors import DomainError, InconsistentSystemError
from matkaczmarz.rng import RngStream
from matkaczmarz.solvers import Method, SolutionRRN, SolveConfig, SolverState, select_grbk, solve, update_row


def gen(shape_a, shape_b, seed, rank_a=None, rank_b=None):
    rng = np.random.default_rng(seed)

    def mat(shape, r):
        if r is None:
            return rng.standard_normal(shape)
        return rng.standard_normal((shape[0], r)) @ rng.standard_normal((r, shape[1]))

    A, B = mat(shape_a, rank_a), mat(shape_b, rank_b)
    X = rng.standard_normal((shape_a[1], shape_b[0]))
    return A, B, X, A @ X @ B


# ------------------------------------------------------------ reference solutions

def test_reference_identity():
    C = np.random.default_rng(0).standard_normal((4, 3))
    ref = analysis.reference_solution(np.eye(4), np.eye(3), C)
    np.testing.assert_allclose(ref.X_star, C, atol=1e-14)
    assert ref.case == "unique_full_rank"


def test_reference_unique_recovers_generator():
    A, B, X, C = gen((6, 3), (3, 6), 1)
    ref = analysis.reference_solution(A, B, C)
    assert ref.case == "unique_full_rank"
    assert np.linalg.norm(ref.X_star - X) <= 1e-8 * np.linalg.norm(X)


@pytest.mark.parametrize("shape_a, shape_b, rank_a, rank_b, case", [
    ((6, 3), (3, 6), None, None, "unique_full_rank"),
    ((3, 7), (8, 4), None, None, "least_norm_full_row_col"),
    ((5, 4), (4, 6), 2, None, "least_norm_general"),
    ((6, 6), (5, 5), 3, 2, "least_norm_general"),
])
def test_reference_cases_agree_with_pinv(shape_a, shape_b, rank_a, rank_b, case):
    A, B, _, C = gen(shape_a, shape_b, 2, rank_a, rank_b)
    ref = analysis.reference_solution(A, B, C)
    assert ref.case == case
    oracle = np.linalg.pinv(A) @ C @ np.linalg.pinv(B)
    assert np.linalg.norm(ref.X_star - oracle) <= 1e-8 * np.linalg.norm(oracle)
    assert ref.residual_check <= 1e-8 * (1 + np.linalg.norm(C))


def test_reference_is_least_norm():
    A, B, _, C = gen((5, 4), (4, 6), 3, rank_a=2)
    Xs = analysis.reference_solution(A, B, C).X_star
    Ap, Bp = matcore.pseudoinverse(A), matcore.pseudoinverse(B)
    rng = np.random.default_rng(4)
    for _ in range(20):
        Y = rng.standard_normal(Xs.shape)
        N = Y - Ap @ A @ Y @ B @ Bp
        XM = Xs + N
        assert np.linalg.norm(A @ XM @ B - C) <= 1e-8 * (1 + np.linalg.norm(C))
        assert math.isclose(np.linalg.norm(XM) ** 2, np.linalg.norm(Xs) ** 2 + np.linalg.norm(N) ** 2,
                            rel_tol=1e-9)
        assert np.linalg.norm(XM) >= np.linalg.norm(Xs)


def test_reference_rejects_inconsistent():
    A = np.vstack([np.eye(2), np.eye(2)])
    C = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 0.0], [0.0, 1.0]])
    with pytest.raises(InconsistentSystemError):
        analysis.reference_solution(A, np.eye(2), C)


# ------------------------------------------------------------ bk limit and rrn

def test_bk_limit_zero_start_is_reference():
    A, B, _, C = gen((8, 6), (5, 7), 5, rank_a=3, rank_b=4)
    lim = analysis.bk_limit(A, B, C, np.zeros((6, 5)))
    ref = analysis.reference_solution(A, B, C).X_star
    assert np.linalg.norm(lim - ref) <= 1e-10 * max(1.0, np.linalg.norm(ref))


def test_bk_limit_of_exact_solution_is_itself():
    A, B, X, C = gen((8, 6), (5, 7), 6, rank_a=3, rank_b=4)
    assert np.linalg.norm(analysis.bk_limit(A, B, C, X) - X) <= 1e-10 * np.linalg.norm(X)


def test_bk_limit_example_start_solves_system():
    A, B, _, C = gen((8, 6), (5, 7), 7, rank_a=3)
    X0 = 1e-5 * np.eye(6, 5)
    lim = analysis.bk_limit(A, B, C, X0)
    assert np.linalg.norm(A @ lim @ B - C) <= 1e-8 * (1 + np.linalg.norm(C))


def test_rrn_examples():
    ref = np.random.default_rng(8).standard_normal((3, 4))
    assert analysis.rrn(ref, ref) == 0.0
    assert analysis.rrn(2 * ref, ref) == pytest.approx(1.0, rel=1e-15)
    assert analysis.rrn(np.zeros_like(ref), ref) == 1.0
    with pytest.raises(DomainError):
        analysis.rrn(ref, np.zeros_like(ref))


# ------------------------------------------------------------ convergence factors

def test_rho_hand_value():
    f = analysis.ConvergenceFactors(np.diag([1.0, 2.0]), np.eye(2), 0.5)
    assert f.rho == pytest.approx(0.85, abs=1e-15)


def test_factors_omega_empty_and_theta_half():
    A, B, _, C = gen((10, 4), (4, 9), 9)
    alpha = 1.0 / np.linalg.norm(B, 2) ** 2
    f = analysis.ConvergenceFactors(A, B, alpha)
    b = f.at(C)
    assert not b.omega_k and b.gamma_k == f.a_fro_sq
    assert b.rho_k <= b.rho
    assert b.rho_k_theta == b.rho_k
    for v in (b.rho, b.rho_k, b.rho_tilde_k, b.rho_0):
        assert 0.0 < v < 1.0


def test_factors_with_zero_rows_in_residual():
    A, B, _, C = gen((10, 4), (4, 9), 10)
    alpha = 1.0 / np.linalg.norm(B, 2) ** 2
    R = C.copy()
    R[[1, 6]] = 0.0
    b = analysis.factor_bounds(A, B, alpha, 0.8, R)
    assert b.omega_k == frozenset({1, 6})
    a_sq = matcore.row_sq_norms(A)
    assert b.gamma_k == pytest.approx(a_sq.sum() - a_sq[[1, 6]].sum(), rel=1e-14)
    assert b.rho_k_theta <= b.rho_k <= b.rho
    assert b.rho_tilde_k <= b.rho_k_theta


def test_factors_rank_deficient_note():
    A, B, _, _ = gen((8, 6), (5, 7), 11, rank_a=3)
    f = analysis.ConvergenceFactors(A, B, 1.0 / np.linalg.norm(B, 2) ** 2)
    assert any("rank 3" in n for n in f.notes)
    assert f.sigma_a > 1e-8


def test_factor_against_kronecker_form():
    # rho and rho_0 through the explicit Kronecker matrix
    A, B, _, C = gen((5, 3), (3, 4), 12)
    alpha = 0.7 / np.linalg.norm(B, 2) ** 2
    f = analysis.ConvergenceFactors(A, B, alpha)
    K = matcore.kron(B.T, A)
    s = np.linalg.svd(K, compute_uv=False)
    kappa_sq = np.linalg.norm(K) ** 2 / s[-1] ** 2
    gain = 2 * alpha - alpha ** 2 * np.linalg.norm(B, 2) ** 2
    assert f.rho == pytest.approx(1 - gain / np.linalg.norm(A) ** 2 * s[-1] ** 2, rel=1e-12)
    assert f.rho_0 == pytest.approx(1 - gain * np.linalg.norm(B) ** 2 / kappa_sq, rel=1e-12)
    # closed form of rho_k: 1 - gain * (||K||^2/(2 gamma) + ||B||^2/2) / kappa^2, gamma = ||A||^2
    phi = np.linalg.norm(K) ** 2 / (2 * np.linalg.norm(A) ** 2) + np.linalg.norm(B) ** 2 / 2
    assert f.at(C).rho_k == pytest.approx(1 - gain * phi / kappa_sq, rel=1e-12)


def test_grbk_empirical_contraction_below_factor():
    A, B, _, C = gen((20, 8), (8, 25), 13)
    ref = analysis.reference_solution(A, B, C).X_star
    alpha = 1.0 / np.linalg.norm(B, 2) ** 2
    f = analysis.ConvergenceFactors(A, B, alpha)
    X0 = np.zeros((8, 8))
    means, rhos = [], []
    root = RngStream(14)
    states = [SolverState(A, B, C, X0) for _ in range(200)]
    streams = [root.substream(t) for t in range(200)]
    for _k in range(10):
        ratios = []
        for s, stream in zip(states, streams):
            rhos.append(f.at(s.R).rho_k)
            e0 = np.linalg.norm(s.X - ref) ** 2
            update_row(s, select_grbk(s, stream), alpha)
            ratios.append(np.linalg.norm(s.X - ref) ** 2 / e0)
        means.append(np.mean(ratios))
    assert max(means) <= max(rhos) + 0.05


# ------------------------------------------------------------ benchmark

def small_problems():
    spec = problems.ProblemSpec({"kind": "gaussian", "rows": 20, "cols": 5},
                                {"kind": "gaussian", "rows": 4, "cols": 15}, seed=3, name="tiny")
    return [("tiny", problems.generate(spec))]


def test_benchmark_deterministic_method_zero_variance():
    rows = analysis.benchmark(small_problems(), ["mwrbk"], trials=5)
    (row,) = rows
    assert row["it_std"] == 0.0 and row["failures"] == 0 and row["trials"] == 5
    assert row["speed_up_vs_rbk"] is None


def test_benchmark_rbk_self_speedup_and_columns():
    rows = analysis.benchmark(small_problems(), ["rbk", "grbk"], trials=2)
    by = {r["method"]: r for r in rows}
    assert by["rbk"]["speed_up_vs_rbk"] == 1.0
    assert by["grbk"]["speed_up_vs_rbk"] > 0
    text = analysis.benchmark_csv(rows)
    parsed = list(csv.reader(io.StringIO(text, newline="")))
    assert tuple(parsed[0]) == analysis.BENCHMARK_COLUMNS
    assert len(parsed) == 3 and text.endswith("\r\n")
    quiet = list(csv.reader(io.StringIO(analysis.benchmark_csv(rows, timing=False), newline="")))
    j = parsed[0].index("wall_mean_s")
    assert quiet[1][j] == "" and parsed[1][j] != ""


def test_benchmark_counts_budget_failures():
    rows = analysis.benchmark(small_problems(), ["rbk"], trials=3, max_iter=3)
    assert rows[0]["failures"] == 3 and math.isnan(rows[0]["it_mean"])
    assert ",3\r\n" in analysis.benchmark_csv(rows)


def test_benchmark_trials_share_seeds():
    a = analysis.benchmark(small_problems(), [Method("rgrbk", 0.8)], trials=3, seed=5)
    b = analysis.benchmark(small_problems(), [Method("rgrbk", 0.8)], trials=3, seed=5)
    assert analysis.benchmark_csv(a, timing=False) == analysis.benchmark_csv(b, timing=False)


def test_benchmark_worker_pool_matches_serial():
    a = analysis.benchmark(small_problems(), ["rbk", "mwrbk"], trials=4, seed=2, workers=1)
    b = analysis.benchmark(small_problems(), ["rbk", "mwrbk"], trials=4, seed=2, workers=2)
    assert analysis.benchmark_csv(a, timing=False) == analysis.benchmark_csv(b, timing=False)


def test_benchmark_rejects_zero_trials():
    with pytest.raises(DomainError):
        analysis.benchmark(small_problems(), ["rbk"], trials=0)


def test_grbk_no_slower_than_rbk_on_set2_shapes():
    for seed in (1, 2, 3):
        spec = problems.ProblemSpec({"kind": "gaussian", "rows": 70, "cols": 15},
                                    {"kind": "gaussian", "rows": 35, "cols": 80}, seed=seed)
        inst = problems.generate(spec)
        rows = analysis.benchmark([("set2", inst)], ["rbk", "grbk"], trials=3, seed=seed)
        by = {r["method"]: r for r in rows}
        assert by["grbk"]["it_mean"] <= by["rbk"]["it_mean"]


def test_solve_reaches_bk_limit_from_example_start():
    A, B, _, C = gen((12, 8), (7, 10), 15, rank_a=4, rank_b=5)
    X0 = 1e-5 * np.eye(8, 7)
    lim = analysis.bk_limit(A, B, C, X0)
    rep = solve(A, B, C, X0, SolveConfig("bk", stop=SolutionRRN(1e-6, lim)))
    assert rep.terminated_by == "tolerance"
