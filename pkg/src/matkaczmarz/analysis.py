"""Reference solutions, error metrics, convergence factors and benchmarks."""
import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import matcore
from .errors import DivergenceError, DomainError, InconsistentSystemError
from .rng import derive_seed
from .solvers import Method, SolutionRRN, SolveConfig, solve

log = logging.getLogger(__name__)

CASES = ("unique_full_rank", "least_norm_full_row_col", "least_norm_general", "bk_limit")
CONSISTENCY_RTOL = 1e-8
OMEGA_FLOOR = 1e-14

BENCHMARK_COLUMNS = (
    "problem_id",
    "method",
    "theta",
    "alpha_rule",
    "trials",
    "it_mean",
    "it_std",
    "wall_mean_s",
    "speed_up_vs_rbk",
    "failures",
)


@dataclass(frozen=True)
class ReferenceSolution:
    X_star: np.ndarray = field(repr=False)
    case: str
    residual_check: float
    rank_A: int
    rank_B: int


def _dense(M):
    return matcore.as_dense(M)


def _spd_solve(G, rhs):
    return scipy.linalg.solve(G, rhs, assume_a="pos")


def reference_solution(A, B, C, rank_tol=None):
    """Least-norm solution of a consistent ``A X B = C``, by rank case.

    * ``A`` full column rank, ``B`` full row rank: the unique solution
      ``(A^T A)^{-1} A^T C B^T (B B^T)^{-1}`` from two SPD solves.
    * ``A`` full row rank, ``B`` full column rank:
      ``A^T (A A^T)^{-1} C (B^T B)^{-1} B^T``.
    * otherwise ``A^+ C B^+`` from SVD pseudoinverses.

    Raises
    ------
    InconsistentSystemError
        If ``||A X B - C||_F > 1e-8 (1 + ||C||_F)`` for the computed ``X``.
    """
    A, B, C = _dense(A), _dense(B), _dense(C)
    m, p = A.shape
    q, n = B.shape
    fa = matcore.svd(A, rank_tol=rank_tol)
    fb = matcore.svd(B, rank_tol=rank_tol)
    ra, rb = fa.numeric_rank, fb.numeric_rank
    if ra == p and rb == q:
        case = "unique_full_rank"
        left = _spd_solve(A.T @ A, A.T @ C @ B.T)
        X = _spd_solve(B @ B.T, left.T).T
    elif ra == m and rb == n:
        case = "least_norm_full_row_col"
        inner = _spd_solve(A @ A.T, C)
        inner = _spd_solve(B.T @ B, inner.T).T
        X = A.T @ inner @ B.T
    else:
        case = "least_norm_general"
        X = _pinv_from(fa) @ C @ _pinv_from(fb)
    residual = matcore.frobenius(A @ X @ B - C)
    if residual > CONSISTENCY_RTOL * (1.0 + matcore.frobenius(C)):
        raise InconsistentSystemError(
            f"reference solution leaves residual {residual:.3e}; the system is not consistent"
        )
    return ReferenceSolution(X_star=X, case=case, residual_check=residual, rank_A=ra, rank_B=rb)


def _pinv_from(f):
    r = f.numeric_rank
    return (f.V[:, :r] / f.singular_values[:r]) @ f.U[:, :r].T


def bk_limit(A, B, C, X0):
    """Limit of the cyclic method from ``X0``: ``A^+ C B^+ + X0 - A^+ A X0 B B^+``."""
    A, B, C, X0 = _dense(A), _dense(B), _dense(C), _dense(X0)
    Ap = matcore.pseudoinverse(A)
    Bp = matcore.pseudoinverse(B)
    return Ap @ C @ Bp + X0 - Ap @ A @ X0 @ B @ Bp


def bk_invariant(A, B, X, Ap=None, Bp=None):
    """``X - A^+ A X B B^+``, which the cyclic method leaves unchanged."""
    A, B = _dense(A), _dense(B)
    Ap = matcore.pseudoinverse(A) if Ap is None else Ap
    Bp = matcore.pseudoinverse(B) if Bp is None else Bp
    return X - Ap @ (A @ X @ B) @ Bp


def rrn(Xk, reference):
    """Squared relative error ``||Xk - ref||_F^2 / ||ref||_F^2``."""
    ref_sq = matcore.frobenius_sq(reference)
    if ref_sq == 0.0:
        raise DomainError("RRN is undefined for a zero reference")
    return matcore.frobenius_sq(np.asarray(Xk) - reference) / ref_sq


@dataclass(frozen=True)
class FactorBounds:
    rho: float
    rho_0: float
    rho_k: float
    rho_k_theta: float
    rho_tilde_k: float
    gamma_k: float
    omega_k: frozenset
    theta: float
    notes: tuple = ()


class ConvergenceFactors:
    """Per-step contraction factors for fixed ``A``, ``B`` and ``alpha``.

    The Kronecker quantities are never formed:
    ``||B^T (x) A||_F = ||A||_F ||B||_F`` and
    ``sigma_min(B^T (x) A) = sigma_min(A) sigma_min(B)``, where sigma_min is
    the smallest positive singular value.
    """

    def __init__(self, A, B, alpha):
        self.alpha = float(alpha)
        fa = matcore.svd(_dense(A))
        fb = matcore.svd(_dense(B))
        self.a_sq = matcore.row_sq_norms(A)
        self.a_fro_sq = float(self.a_sq.sum())
        self.b_fro_sq = matcore.frobenius_sq(B)
        self.b_2 = fb.sigma_max
        self.sigma_a = fa.sigma_min_positive
        self.sigma_b = fb.sigma_min_positive
        notes = []
        for name, f, shape in (("A", fa, A.shape), ("B", fb, B.shape)):
            if f.numeric_rank < min(shape):
                notes.append(
                    f"{name} has rank {f.numeric_rank} < {min(shape)}; "
                    f"sigma_min({name}) is its smallest positive singular value"
                )
        self.notes = tuple(notes)
        # 2 alpha - alpha^2 ||B||_2^2
        self.step_gain = 2.0 * self.alpha - self.alpha ** 2 * self.b_2 ** 2
        self.kappa_sq = (self.a_fro_sq * self.b_fro_sq) / (self.sigma_a * self.sigma_b) ** 2
        self.sigma_prod_sq = (self.sigma_a * self.sigma_b) ** 2
        self.rho = 1.0 - self.step_gain / self.a_fro_sq * self.sigma_prod_sq
        self.rho_0 = 1.0 - self.step_gain * self.b_fro_sq / self.kappa_sq

    def omega(self, Rk):
        Rk = _dense(Rk)
        r = np.sqrt(np.einsum("ij,ij->i", Rk, Rk))
        floor = OMEGA_FLOOR * float(np.sqrt(np.sum(r * r)))
        return np.flatnonzero(r <= floor)

    def at(self, Rk, theta=0.5):
        """Factors for the residual ``Rk``.

        ``rho_k_theta`` is evaluated as
        ``1 - g s (1/||A||^2 + theta (1/gamma - 1/||A||^2))`` with
        ``g s = step_gain * sigma_min(A)^2 sigma_min(B)^2``; this equals the
        ``phi_k / kappa^2`` form algebraically and keeps ``rho_k <= rho``
        exact in floating point.
        """
        omega = self.omega(Rk)
        gamma = self.a_fro_sq - float(self.a_sq[omega].sum())
        if omega.size == 0:
            gamma = self.a_fro_sq
        inv_a = 1.0 / self.a_fro_sq
        inv_g = 1.0 / gamma if gamma > 0.0 else math.inf
        excess = inv_g - inv_a
        gs = self.step_gain * self.sigma_prod_sq
        return FactorBounds(
            rho=self.rho,
            rho_0=self.rho_0,
            rho_k=1.0 - gs * (inv_a + 0.5 * excess),
            rho_k_theta=1.0 - gs * (inv_a + theta * excess),
            rho_tilde_k=1.0 - gs * inv_g,
            gamma_k=gamma,
            omega_k=frozenset(int(i) for i in omega),
            theta=theta,
            notes=self.notes,
        )


def factor_bounds(A, B, alpha, theta, Rk):
    """Convergence factors of the random, greedy, relaxed and max-weighted rules at ``Rk``."""
    return ConvergenceFactors(A, B, alpha).at(Rk, theta)


# ---------------------------------------------------------------- benchmark


@dataclass(frozen=True)
class TrialResult:
    problem_id: str
    method: str
    theta: float
    trial: int
    iterations: int
    wall_seconds: float
    ok: bool


def _run_trial(task):
    problem_id, A, B, C, reference, method, alpha_rule, tol, max_iter, seed, trial = task
    config = SolveConfig(
        method=method,
        stop=SolutionRRN(tol, reference),
        alpha_rule=alpha_rule,
        max_iter=max_iter,
        seed=seed,
    )
    try:
        report = solve(A, B, C, None, config)
    except DivergenceError as exc:
        log.warning("%s/%s trial %d diverged: %s", problem_id, method.label, trial, exc)
        return TrialResult(problem_id, method.tag, method.theta, trial, 0, math.nan, False)
    ok = report.terminated_by == "tolerance"
    return TrialResult(
        problem_id, method.tag, method.theta, trial, report.iterations, report.wall_seconds, ok
    )


def benchmark(problems, methods, trials=20, alpha_rule="safe", tol=1e-6, max_iter=1_000_000, seed=0, workers=1):
    """Mean iterations and wall time per (problem, method) over seeded trials.

    ``problems`` is a sequence of ``(problem_id, instance)`` pairs where the
    instance exposes ``A``, ``B``, ``C``. Trial ``t`` of every method uses the
    seed ``derive_seed(seed, t)``, so all methods see the same streams.
    Trials that diverge or exhaust ``max_iter`` count as failures and are
    left out of the means.

    Returns a list of row dicts with the keys of :data:`BENCHMARK_COLUMNS`.
    """
    if trials < 1:
        raise DomainError("trials must be at least 1")
    methods = [Method(m) if isinstance(m, str) else m for m in methods]
    tasks = []
    for problem_id, inst in problems:
        reference = reference_solution(inst.A, inst.B, inst.C).X_star
        for method in methods:
            for t in range(trials):
                tasks.append(
                    (problem_id, inst.A, inst.B, inst.C, reference, method, alpha_rule, tol, max_iter,
                     derive_seed(seed, t), t)
                )
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_trial, tasks, chunksize=max(1, len(tasks) // (4 * workers))))
    else:
        results = [_run_trial(task) for task in tasks]

    rows = []
    for problem_id, _ in problems:
        per_method = {}
        for method in methods:
            key = (method.tag, method.theta)
            mine = [r for r in results if r.problem_id == problem_id and (r.method, r.theta) == key]
            good = [r for r in mine if r.ok]
            its = np.array([r.iterations for r in good], dtype=float)
            walls = np.array([r.wall_seconds for r in good], dtype=float)
            per_method[key] = {
                "problem_id": problem_id,
                "method": method.tag,
                "theta": method.theta,
                "alpha_rule": alpha_rule,
                "trials": trials,
                "it_mean": float(its.mean()) if its.size else math.nan,
                "it_std": float(its.std()) if its.size else math.nan,
                "wall_mean_s": float(walls.mean()) if walls.size else math.nan,
                "speed_up_vs_rbk": None,
                "failures": len(mine) - len(good),
            }
        base = per_method.get(("rbk", None))
        for row in per_method.values():
            if base is not None and row["wall_mean_s"] > 0.0:
                row["speed_up_vs_rbk"] = base["wall_mean_s"] / row["wall_mean_s"]
            rows.append(row)
    return rows


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    return str(value)


def benchmark_csv(rows, timing=True):
    """Render benchmark rows as RFC 4180 CSV text.

    With ``timing=False`` the wall-time columns are left blank, which makes
    the output a pure function of the configuration.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(BENCHMARK_COLUMNS)
    for row in rows:
        out = []
        for col in BENCHMARK_COLUMNS:
            value = row[col]
            if not timing and col in ("wall_mean_s", "speed_up_vs_rbk"):
                value = None
            out.append(_fmt(value))
        writer.writerow(out)
    return buf.getvalue()
