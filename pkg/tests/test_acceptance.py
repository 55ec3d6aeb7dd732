"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict through the ``record`` fixture; the
terminal summary prints them all in order.
"""
import time

import numpy as np
import pytest
import scipy.signal

from matkaczmarz import analysis, imaging, matcore, problems
from matkaczmarz.rng import RngStream
from matkaczmarz.solvers import (
    Method,
    ResidualRel,
    SolutionRRN,
    SolveConfig,
    SolverState,
    resolve_alpha,
    select_rbk,
    solve,
    update_row,
)

pytestmark = pytest.mark.acceptance

CONVERGENT = (Method("grbk"), Method("rgrbk", 0.8), Method("mwrbk"))
RANDOMIZED = (Method("rbk"), Method("grbk"), Method("rgrbk", 0.8), Method("mwrbk"))


def _g(rows, cols):
    return {"kind": "gaussian", "rows": rows, "cols": cols}


def _stack(src, mode):
    return {"kind": "stacked", "mode": mode, "source": src}


# five seeded systems per rank case, every dimension <= 120
RANK_CASES = {
    "unique_full_rank": lambda: (_g(60, 12), _g(10, 50)),
    "least_norm_full_row_col": lambda: (_g(12, 60), _g(50, 10)),
    "least_norm_general": lambda: (_stack(_g(40, 8), "horizontal"), _stack(_g(8, 40), "vertical")),
}


def rank_case_systems():
    out = []
    for case, shapes in RANK_CASES.items():
        for seed in range(5):
            a, b = shapes()
            inst = problems.generate(problems.ProblemSpec(a, b, seed=1000 + 17 * seed + len(case)))
            ref = analysis.reference_solution(inst.A, inst.B, inst.C)
            out.append((case, seed, inst, ref))
    return out


@pytest.fixture(scope="module")
def systems():
    return rank_case_systems()


# ------------------------------------------------------------ 1

def test_criterion_1_least_norm_convergence(systems, record):
    start = time.perf_counter()
    worst, failures, cases = 0.0, [], set()
    for case, seed, inst, ref in systems:
        assert ref.case == case
        cases.add(case)
        for method in CONVERGENT:
            cfg = SolveConfig(method, stop=SolutionRRN(1e-6, ref.X_star), alpha_rule="safe", max_iter=1_000_000,
                              seed=seed)
            rep = solve(inst.A, inst.B, inst.C, np.zeros((inst.A.shape[1], inst.B.shape[0])), cfg)
            value = analysis.rrn(rep.X, ref.X_star)
            worst = max(worst, value)
            if rep.terminated_by != "tolerance" or value > 1e-6:
                failures.append((case, seed, method.label, rep.iterations, value))
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 60.0 and len(cases) == 3
    record(1, ok, f"{len(systems) * len(CONVERGENT)} solves over {len(cases)} rank cases, "
                  f"max RRN {worst:.2e} (<= 1e-6), {elapsed:.1f} s (< 60 s)")
    assert not failures, failures
    assert elapsed < 60.0


# ------------------------------------------------------------ 2

def bk_systems():
    specs = [
        (_stack(_g(20, 30), "vertical"), _g(25, 15)),
        (_g(30, 25), _stack(_g(10, 35), "vertical")),
        (_stack(_g(24, 10), "horizontal"), _stack(_g(12, 18), "horizontal")),
    ]
    return [problems.generate(problems.ProblemSpec(a, b, seed=500 + i)) for i, (a, b) in enumerate(specs)]


def test_criterion_2_bk_limit_and_invariant(record):
    details, ok = [], True
    for inst in bk_systems():
        A, B, C = matcore.as_dense(inst.A), matcore.as_dense(inst.B), inst.C
        ra, rb = matcore.svd(A).numeric_rank, matcore.svd(B).numeric_rank
        assert ra < min(A.shape) or rb < min(B.shape)
        p, q = A.shape[1], B.shape[0]
        X0 = 1e-5 * np.eye(p, q)
        limit = analysis.bk_limit(A, B, C, X0)
        rep = solve(A, B, C, X0, SolveConfig("bk", stop=SolutionRRN(1e-6, limit)))
        converged = rep.terminated_by == "tolerance" and analysis.rrn(rep.X, limit) <= 1e-6

        Ap, Bp = matcore.pseudoinverse(A), matcore.pseudoinverse(B)
        inv0 = analysis.bk_invariant(A, B, X0, Ap, Bp)
        drift = {}

        def monitor(state):
            if state.k in (0, 100, 10_000):
                drift[state.k] = matcore.frobenius(analysis.bk_invariant(A, B, state.X, Ap, Bp) - inv0)

        solve(A, B, C, X0, SolveConfig("bk", stop=ResidualRel(0.0), max_iter=10_000, record_trace=True),
              monitor=monitor)
        held = sorted(drift) == [0, 100, 10_000] and max(drift.values()) <= 1e-8
        ok = ok and converged and held
        details.append(f"IT {rep.iterations}, invariant drift {max(drift.values()):.1e}")
        assert converged, rep
        assert held, drift
    record(2, ok, "; ".join(details))


# ------------------------------------------------------------ 3

def test_criterion_3_theta_half_equivalence(record):
    worst, same_rows = 0.0, True
    for t in range(10):
        rng = np.random.default_rng(300 + t)
        m, p, q, n = (int(v) for v in rng.integers(8, 40, size=4))
        A, B = rng.standard_normal((m, p)), rng.standard_normal((q, n))
        C = A @ rng.standard_normal((p, q)) @ B
        # stay within the undecimated trace so every selected row is compared
        cfg = dict(stop=ResidualRel(1e-8), max_iter=10_000, seed=int(t), record_trace=True)
        g = solve(A, B, C, None, SolveConfig(Method("grbk"), **cfg))
        r = solve(A, B, C, None, SolveConfig(Method("rgrbk", 0.5), **cfg))
        assert len(g.selected_rows) == g.iterations
        same_rows = same_rows and g.selected_rows == r.selected_rows
        worst = max(worst, float(np.max(np.abs(g.X - r.X))))
    ok = same_rows and worst <= 1e-15
    record(3, ok, f"10 systems, selected rows identical: {same_rows}, max |dX| {worst:.1e} (<= 1e-15)")
    assert ok


# ------------------------------------------------------------ 4

def test_criterion_4_residual_recurrence(record):
    inst = problems.generate(problems.ProblemSpec(_g(60, 20), _g(15, 40), seed=404))
    tol = 1e-8 * (1 + matcore.frobenius(inst.C))
    drifts = {}
    for method in RANDOMIZED:
        seen = {}

        def monitor(state):
            if state.k == 10_000:
                seen["drift"] = matcore.frobenius(state.R - state.true_residual())

        rep = solve(inst.A, inst.B, inst.C, None,
                    SolveConfig(method, stop=ResidualRel(0.0), max_iter=10_000, drift_check_every=0,
                                record_trace=True, seed=4),
                    monitor=monitor)
        assert rep.iterations == 10_000
        drifts[method.label] = seen["drift"]
    ok = max(drifts.values()) <= tol
    record(4, ok, ", ".join(f"{k} {v:.1e}" for k, v in drifts.items()) + f" (<= {tol:.1e})")
    assert ok


# ------------------------------------------------------------ 5

def test_criterion_5_factor_ordering(systems, record):
    checked, violations, mono_fail = 0, [], 0
    for case, seed, inst, ref in systems:
        alpha, _ = resolve_alpha(inst.B, "safe")
        factors = analysis.ConvergenceFactors(inst.A, inst.B, alpha)
        for method in CONVERGENT:

            def monitor(state):
                nonlocal checked, mono_fail
                b = factors.at(state.R, 0.8)
                checked += 1
                if not (b.rho_k <= b.rho and b.rho_k_theta <= b.rho):
                    violations.append((case, seed, method.label, state.k, b.rho_k, b.rho_k_theta, b.rho))
                r1, r5, r9 = (factors.at(state.R, th).rho_k_theta for th in (0.1, 0.5, 0.9))
                if not r1 >= r5 >= r9:
                    mono_fail += 1

            solve(inst.A, inst.B, inst.C, None,
                  SolveConfig(method, stop=SolutionRRN(1e-6, ref.X_star), seed=seed, record_trace=True),
                  monitor=monitor)
    ok = not violations and mono_fail == 0
    record(5, ok, f"{checked} logged states, ordering violations {len(violations)}, "
                  f"theta-monotonicity violations {mono_fail}")
    assert not violations, violations[:5]
    assert mono_fail == 0


# ------------------------------------------------------------ 6

def test_criterion_6_expected_rate_envelope(record):
    start = time.perf_counter()
    inst = problems.generate(problems.ProblemSpec(_g(20, 8), _g(8, 25), seed=606))
    A, B, C = inst.A, inst.B, inst.C
    X_star = analysis.reference_solution(A, B, C).X_star
    alpha, _ = resolve_alpha(B, "safe")
    rho = analysis.ConvergenceFactors(A, B, alpha).rho
    X0 = np.zeros((8, 8))
    e0 = matcore.frobenius_sq(X0 - X_star)
    checkpoints = (10, 50, 100)
    errs = {k: [] for k in checkpoints}
    root = RngStream(6)
    for t in range(500):
        stream = root.substream(t)
        state = SolverState(A, B, C, X0)
        for k in range(1, 101):
            update_row(state, select_rbk(state, stream), alpha)
            if k in errs:
                errs[k].append(matcore.frobenius_sq(state.X - X_star))
    elapsed = time.perf_counter() - start
    parts, ok = [], elapsed < 30.0
    for k in checkpoints:
        mean = float(np.mean(errs[k]))
        bound = rho ** k * e0 * 1.05
        ok = ok and mean <= bound
        parts.append(f"k={k}: {mean:.3e} <= {bound:.3e}")
    record(6, ok, "; ".join(parts) + f"; {elapsed:.1f} s (< 30 s)")
    assert ok


# ------------------------------------------------------------ 7

def test_criterion_7_registry_ordering(record):
    reg = problems.registry("mini")
    insts = [(name, problems.generate(spec)) for name, spec in reg.items()]
    rows = analysis.benchmark(insts, list(RANDOMIZED), trials=20, seed=7)
    it = {(r["problem_id"], r["method"]): r["it_mean"] for r in rows}
    broken, parts = [], []
    for name in reg:
        rbk, grbk, rgrbk, mw = (it[(name, m)] for m in ("rbk", "grbk", "rgrbk", "mwrbk"))
        if not (grbk <= rbk and rgrbk <= 1.05 * grbk and mw <= 1.05 * rgrbk):
            broken.append(name)
        parts.append(f"{name} {rbk:.0f}/{grbk:.0f}/{rgrbk:.0f}/{mw:.0f}")
    failures = sum(r["failures"] for r in rows)
    ok = not broken and failures == 0
    record(7, ok, "IT rbk/grbk/rgrbk/mwrbk: " + ", ".join(parts))
    assert not broken, broken
    assert failures == 0


# ------------------------------------------------------------ 8

def penrose_matrices():
    rng = np.random.default_rng(808)
    out = []
    shapes = [(6, 6), (12, 5), (5, 12), (9, 9), (20, 7), (7, 20), (1, 8), (8, 1), (15, 15), (30, 11)]
    for i in range(50):
        rows, cols = shapes[i % len(shapes)]
        full = min(rows, cols)
        r = full if i % 2 == 0 else max(1, full - 1 - i % 3)
        out.append(rng.standard_normal((rows, r)) @ rng.standard_normal((r, cols)))
    return out


def test_criterion_8_penrose(record):
    worst = 0.0
    for M in penrose_matrices():
        for method in ("lapack", "jacobi"):
            res = matcore.penrose_residuals(M, matcore.pseudoinverse(M, method=method))
            worst = max(worst, max(res) / matcore.frobenius(M))
    ok = worst <= 1e-8
    record(8, ok, f"50 matrices x 2 SVD paths, max residual / ||M||_F {worst:.1e} (<= 1e-8)")
    assert ok


# ------------------------------------------------------------ 9

def test_criterion_9_blur_operator(record):
    rng = np.random.default_rng(909)
    worst = 0.0
    for t in range(20):
        m, n = (int(v) for v in rng.integers(8, 17, size=2))
        size = int(rng.choice([3, 5]))
        boundary = ("zero", "periodic")[t % 2]
        K = imaging.gaussian_kernel(size, float(rng.uniform(0.5, 6.0)))
        img = rng.random((m, n))
        A = imaging.build_blur_operator(m, n, K, boundary)
        oracle = scipy.signal.convolve2d(img, K, mode="same", boundary="fill" if boundary == "zero" else "wrap")
        worst = max(worst, float(np.max(np.abs(matcore.unvec(A @ matcore.vec(img), m, n) - oracle))))
    ok = worst <= 1e-12
    record(9, ok, f"20 images, max |A vec(x) - conv2(x, K)| {worst:.1e} (<= 1e-12)")
    assert ok


# ------------------------------------------------------------ 10

def test_criterion_10_restoration(record):
    start = time.perf_counter()
    img = imaging.synthetic_image(32, 32)
    model = imaging.BlurModel.gaussian(32, 32, 5, 2.0, cross_channel=imaging.CROSS_CHANNEL)
    observed = imaging.forward_blur(model, imaging.to_stack(img))
    blurred = imaging.clamp(imaging.from_stack(observed, 32, 32))
    p0, s0 = imaging.psnr(img, blurred), imaging.ssim(img, blurred)
    parts, ok = [], True
    for method in RANDOMIZED:
        X, rep = imaging.restore(model, observed, SolveConfig(method, stop=ResidualRel(0.0), max_iter=20_000))
        restored = imaging.clamp(imaging.from_stack(X, 32, 32))
        p1, s1 = imaging.psnr(img, restored), imaging.ssim(img, restored)
        ok = ok and rep.iterations <= 20_000 and p1 > p0 and s1 - s0 >= 0.02
        parts.append(f"{method.label} {p1:.2f} dB / {s1:.3f}")
    elapsed = time.perf_counter() - start
    ok = ok and elapsed < 120.0
    record(10, ok, f"blurred {p0:.2f} dB / {s0:.3f}; " + ", ".join(parts) + f"; {elapsed:.1f} s (< 120 s)")
    assert ok


# ------------------------------------------------------------ 11

def test_criterion_11_vec_kron(record):
    rng = np.random.default_rng(1111)
    worst = 0.0
    for _ in range(20):
        m, p, q, n = (int(v) for v in rng.integers(1, 7, size=4))
        A, X, B = rng.standard_normal((m, p)), rng.standard_normal((p, q)), rng.standard_normal((q, n))
        lhs = matcore.vec(A @ X @ B)
        rhs = matcore.kron(B.T, A) @ matcore.vec(X)
        worst = max(worst, float(np.linalg.norm(lhs - rhs) / np.linalg.norm(lhs)))
    ok = worst <= 1e-12
    record(11, ok, f"20 shapes <= 6 per side, max relative gap {worst:.1e} (<= 1e-12)")
    assert ok
