"""Row-action Kaczmarz iterations for the matrix equation ``A X B = C``.

All five methods share one update kernel (:func:`update_row`) and differ
only in how the row ``i_k`` is chosen:

``bk``     cyclic sweep over the rows of ``A``
``rbk``    random, probability proportional to ``||A_i||^2``
``grbk``   random over the greedy set built from residual-to-row-norm ratios
``rgrbk``  as ``grbk`` with a relaxation factor ``theta`` in the threshold
``mwrbk``  deterministic argmax of the ratio (smallest index on ties)

The residual ``R = C - A X B`` is maintained incrementally from the cached
products ``A A^T`` and ``B^T B``, so no full ``A X B`` is formed inside the
loop except at the periodic drift checks.
"""
import logging
import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import matcore
from .errors import ConfigError, DivergenceError, SelectionError, ShapeError
from .rng import ALGORITHM, RngStream, cumulative_weights, draw_from_cumulative

log = logging.getLogger(__name__)

METHOD_TAGS = ("bk", "rbk", "grbk", "rgrbk", "mwrbk")
RANDOMIZED = ("rbk", "grbk", "rgrbk")
ALPHA_RULES = ("safe", "paper", "fixed")
FULL_TRACE_LIMIT = 10_000
TRACE_DECIMATION = 10
DRIFT_RTOL = 1e-8
# cached Gram matrices stay CSR below this fill fraction
SPARSE_GRAM_DENSITY = 0.25


@dataclass(frozen=True)
class Method:
    tag: str
    theta: float = None

    def __post_init__(self):
        tag = self.tag.lower()
        object.__setattr__(self, "tag", tag)
        if tag not in METHOD_TAGS:
            raise ConfigError(f"unknown method {self.tag!r}; expected one of {METHOD_TAGS}")
        if tag == "rgrbk":
            if self.theta is None:
                raise ConfigError("method rgrbk requires a relaxation factor theta")
            if not 0.0 < float(self.theta) < 1.0:
                raise ConfigError(f"theta must lie strictly inside (0, 1), got {self.theta}")
            object.__setattr__(self, "theta", float(self.theta))
        elif self.theta is not None:
            raise ConfigError(f"theta is only meaningful for rgrbk, not {tag}")

    @property
    def label(self):
        return f"rgrbk(theta={self.theta:g})" if self.tag == "rgrbk" else self.tag


@dataclass(frozen=True)
class SolutionRRN:
    """Stop once ``||X^k - reference||_F^2 / ||reference||_F^2 <= tol``."""

    tol: float = 1e-6
    reference: np.ndarray = field(default=None, repr=False)
    kind = "solution_rrn"


@dataclass(frozen=True)
class ResidualRel:
    """Stop once ``||R^k||_F / ||C||_F <= tol``."""

    tol: float = 1e-6
    kind = "residual_rel"


@dataclass
class SolveConfig:
    method: Method
    stop: object = field(default_factory=ResidualRel)
    alpha_rule: str = "safe"
    alpha: float = None
    max_iter: int = 1_000_000
    seed: int = 0
    record_trace: bool = False
    drift_check_every: int = 1000

    def __post_init__(self):
        if isinstance(self.method, str):
            self.method = Method(self.method)
        if self.alpha_rule not in ALPHA_RULES:
            raise ConfigError(f"alpha_rule must be one of {ALPHA_RULES}, got {self.alpha_rule!r}")
        if self.alpha_rule == "fixed" and (self.alpha is None or not self.alpha > 0.0):
            raise ConfigError("alpha_rule 'fixed' needs a positive alpha")
        if self.max_iter < 0:
            raise ConfigError("max_iter must be nonnegative")
        if isinstance(self.stop, SolutionRRN) and self.stop.reference is None:
            raise ConfigError("solution_rrn stopping needs a reference solution")
        if not isinstance(self.stop, (SolutionRRN, ResidualRel)):
            raise ConfigError(f"unsupported stop rule {self.stop!r}")


@dataclass(frozen=True)
class TraceRow:
    """Iterate diagnostics after ``k`` updates; ``row`` produced ``X^k`` (-1 at k=0)."""

    k: int
    rrn: float
    residual_rel: float
    row: int


@dataclass(frozen=True)
class SolveReport:
    X: np.ndarray = field(repr=False)
    iterations: int
    wall_seconds: float
    final_rrn: float
    final_residual_rel: float
    terminated_by: str
    method: str
    theta: float
    alpha: float
    alpha_rule: str
    seed: int
    max_drift: float
    trace: tuple = field(default=(), repr=False)
    rng_algorithm: str = ALGORITHM

    @property
    def selected_rows(self):
        return [t.row for t in self.trace if t.k > 0]

    def to_dict(self, include_timing=True):
        d = {
            "method": self.method,
            "theta": self.theta,
            "alpha_rule": self.alpha_rule,
            "alpha": self.alpha,
            "seed": self.seed,
            "rng_algorithm": self.rng_algorithm,
            "iterations": self.iterations,
            "terminated_by": self.terminated_by,
            "final_rrn": _json_float(self.final_rrn),
            "final_residual_rel": _json_float(self.final_residual_rel),
            "max_drift": _json_float(self.max_drift),
        }
        if include_timing:
            d["timing"] = {"wall_seconds": self.wall_seconds}
        return d


def _json_float(x):
    return None if x is None or not math.isfinite(x) else float(x)


class SolverState:
    """Mutable iterate ``X``, residual ``R`` and the cached products they need."""

    def __init__(self, A, B, C, X0):
        m, p = A.shape
        q, n = B.shape
        if C.shape != (m, n):
            raise ShapeError(f"C must be {m}x{n} for A {A.shape} and B {B.shape}, got {C.shape}")
        if X0.shape != (p, q):
            raise ShapeError(f"X0 must be {p}x{q}, got {X0.shape}")
        self.A = A
        self.B = B
        self.C = matcore.as_dense(C)
        self.X = np.array(matcore.as_dense(X0), dtype=np.float64)
        self.a_sq = matcore.row_sq_norms(A)
        self.a_fro_sq = float(self.a_sq.sum())
        if self.a_fro_sq == 0.0:
            raise ShapeError("A is the zero matrix")
        zero = self.a_sq == 0.0
        self.has_zero_rows = bool(zero.any())
        self.inv_a_sq = np.where(zero, 0.0, 1.0 / np.where(zero, 1.0, self.a_sq))
        self.ratio_floor = np.where(zero, -np.inf, 0.0)
        self.nonzero_rows = np.flatnonzero(~zero)
        self.AAt = _gram(A, A.T)
        self.BtB = _gram(B.T, B)
        self.c_fro = matcore.frobenius(self.C)
        self.R = self.C - matcore.matmul(matcore.matmul(A, self.X), B)
        self.r_sq = np.einsum("ij,ij->i", self.R, self.R)
        self.k = 0

    @property
    def shape(self):
        return self.A.shape[0], self.A.shape[1], self.B.shape[0], self.B.shape[1]

    @property
    def residual_fro_sq(self):
        return float(self.r_sq.sum())

    def ratios(self):
        """``||R_i||^2 / ||A_i||^2`` per row, ``-inf`` on zero rows of ``A``."""
        out = self.r_sq * self.inv_a_sq
        if self.has_zero_rows:
            out += self.ratio_floor
        return out

    def true_residual(self):
        return self.C - matcore.matmul(matcore.matmul(self.A, self.X), self.B)

    def residual_drift(self):
        return matcore.frobenius(self.R - self.true_residual())

    def resync(self):
        self.R = self.true_residual()
        self.r_sq = np.einsum("ij,ij->i", self.R, self.R)


def _gram(left, right):
    G = left @ right
    if sp.issparse(G):
        G = sp.csr_array(G)
        if G.nnz <= SPARSE_GRAM_DENSITY * G.shape[0] * G.shape[1]:
            G.sort_indices()
            return G
        G = G.toarray()
    return np.ascontiguousarray(G, dtype=np.float64)


def update_row(state, i, alpha):
    """One Kaczmarz step on row ``i``; updates ``state`` in place.

    ``X += c * A_i^T (R_i B^T)`` and ``R -= c * (A A^T)_{:,i} (R_i B^T B)``
    with ``c = alpha / ||A_i||^2``.
    """
    a_sq = state.a_sq[i]
    if a_sq == 0.0:
        raise SelectionError(f"row {i} of A is zero and cannot be projected on")
    coef = alpha / a_sq
    r_i = state.R[i]
    B, A = state.B, state.A

    x_step = B @ r_i
    if sp.issparse(A):
        lo, hi = A.indptr[i], A.indptr[i + 1]
        cols = A.indices[lo:hi]
        state.X[cols] += np.outer(coef * A.data[lo:hi], x_step)
    else:
        state.X += np.outer(coef * A[i], x_step)

    r_step = state.BtB @ r_i
    G = state.AAt
    if sp.issparse(G):
        lo, hi = G.indptr[i], G.indptr[i + 1]
        touched = G.indices[lo:hi]
        state.R[touched] -= np.outer(coef * G.data[lo:hi], r_step)
        Rt = state.R[touched]
        state.r_sq[touched] = np.einsum("ij,ij->i", Rt, Rt)
    else:
        # A A^T is symmetric, so row i is column i
        state.R -= np.outer(coef * G[i], r_step)
        state.r_sq = np.einsum("ij,ij->i", state.R, state.R)
    state.k += 1
    return state


def select_cyclic(state):
    """Row ``k mod m`` (0-based), cycling over the nonzero rows of ``A`` only."""
    rows = state.nonzero_rows
    return int(rows[state.k % rows.size])


def select_rbk(state, stream, cdf=None):
    """Row drawn with probability ``||A_i||^2 / ||A||_F^2``."""
    if cdf is None:
        cdf = cumulative_weights(state.a_sq)
    return draw_from_cumulative(stream, cdf)


def _relaxed_threshold(theta, max_ratio, fro, a_fro_sq):
    return theta / fro * max_ratio + (1.0 - theta) / a_fro_sq


def rgrbk_threshold(state, theta, ratios=None):
    """Relaxed greedy threshold ``theta/||R||^2 max_i ratio_i + (1-theta)/||A||_F^2``."""
    if not 0.0 < theta < 1.0:
        raise ConfigError(f"theta must lie strictly inside (0, 1), got {theta}")
    if ratios is None:
        ratios = state.ratios()
    fro = state.residual_fro_sq
    if fro == 0.0:
        raise SelectionError("greedy threshold undefined for a zero residual")
    return _relaxed_threshold(theta, float(ratios.max()), fro, state.a_fro_sq)


def grbk_threshold(state, ratios=None):
    """Greedy threshold; the relaxed rule at ``theta = 1/2``."""
    return rgrbk_threshold(state, 0.5, ratios)


def greedy_set(state, theta, ratios=None):
    """Candidate rows ``{i : ||R_i||^2 >= thr ||A_i||^2 ||R||_F^2}`` and the ratio cutoff used."""
    if not 0.0 < theta < 1.0:
        raise ConfigError(f"theta must lie strictly inside (0, 1), got {theta}")
    if ratios is None:
        ratios = state.ratios()
    fro = state.residual_fro_sq
    if fro == 0.0:
        raise SelectionError("greedy threshold undefined for a zero residual")
    max_ratio = float(ratios.max())
    thr = _relaxed_threshold(theta, max_ratio, fro, state.a_fro_sq)
    # argmax row satisfies the inequality exactly; guard it against one-ulp rounding
    cutoff = min(thr * fro, max_ratio)
    members = np.flatnonzero(ratios >= cutoff)
    if members.size == 0:
        raise SelectionError(f"empty greedy index set at k={state.k} (threshold {thr!r})")
    return members, cutoff


def select_rgrbk(state, stream, theta):
    """Row from the relaxed greedy set, probability proportional to ``||R_i||^2``."""
    ratios = state.ratios()
    members, cutoff = greedy_set(state, theta, ratios)
    i = int(members[draw_from_cumulative(stream, np.cumsum(state.r_sq[members]))])
    if not ratios[i] >= cutoff:
        raise SelectionError(f"selected row {i} violates the greedy threshold")
    return i


def select_grbk(state, stream):
    return select_rgrbk(state, stream, 0.5)


def select_mwrbk(state):
    """Row with the largest ``||R_i||^2 / ||A_i||^2``; smallest index on ties."""
    return int(np.argmax(state.ratios()))


def resolve_alpha(B, rule, alpha=None):
    """Step size for ``rule`` plus ``||B||_2``, validated against ``0 < alpha < 2/||B||_2^2``."""
    b_norm = matcore.spectral_norm(B)
    bound = 2.0 / b_norm ** 2
    if rule == "safe":
        value = 1.0 / b_norm ** 2
    elif rule == "paper":
        value = 1.0 / b_norm
        if not value < bound:
            warnings.warn(
                f"alpha = 1/||B||_2 = {value:.4g} is outside the convergence range "
                f"(0, {bound:.4g}); the iteration may diverge",
                RuntimeWarning,
                stacklevel=3,
            )
    elif rule == "fixed":
        value = float(alpha)
        if not 0.0 < value < bound:
            raise ConfigError(f"fixed alpha {value} must lie in (0, 2/||B||_2^2) = (0, {bound:.6g})")
    else:
        raise ConfigError(f"unknown alpha rule {rule!r}")
    return value, b_norm


def _should_record(k):
    return k <= FULL_TRACE_LIMIT or k % TRACE_DECIMATION == 0


def solve(A, B, C, X0=None, config=None, monitor=None):
    """Iterate the configured method until the stop rule or ``max_iter``.

    ``monitor(state)`` is called at every recorded trace point when
    ``config.record_trace`` is set.

    Returns
    -------
    SolveReport
        With the final iterate in ``report.X``.

    Raises
    ------
    DivergenceError
        If the iterate or residual stops being finite.
    """
    if config is None:
        raise ConfigError("solve needs a SolveConfig")
    if A.shape[1] == 0 or B.shape[0] == 0:
        raise ShapeError("empty unknown")
    A = matcore.as_csr(A) if sp.issparse(A) else matcore.as_dense(A)
    B = matcore.as_csr(B) if sp.issparse(B) else matcore.as_dense(B)
    if X0 is None:
        X0 = np.zeros((A.shape[1], B.shape[0]))
    state = SolverState(A, B, C, X0)
    method = config.method
    alpha, _ = resolve_alpha(B, config.alpha_rule, config.alpha)
    stream = RngStream(config.seed)

    stop = config.stop
    reference = None
    ref_sq = None
    if isinstance(stop, SolutionRRN):
        reference = matcore.as_dense(stop.reference)
        if reference.shape != state.X.shape:
            raise ShapeError(f"reference must be {state.X.shape}, got {reference.shape}")
        ref_sq = matcore.frobenius_sq(reference)
        if ref_sq == 0.0:
            raise ConfigError("reference solution is zero; RRN is undefined")
    c_fro = state.c_fro if state.c_fro > 0.0 else 1.0
    drift_tol = DRIFT_RTOL * (1.0 + state.c_fro)

    def measures():
        if reference is not None:
            D = state.X - reference
            rrn = float(np.einsum("ij,ij->", D, D)) / ref_sq
        else:
            rrn = math.nan
        return rrn, math.sqrt(state.residual_fro_sq) / c_fro

    def stop_value(rrn, rel):
        return rrn if reference is not None else rel

    if method.tag == "bk":
        if state.has_zero_rows:
            warnings.warn("A has zero rows; the cyclic sweep skips them", RuntimeWarning, stacklevel=2)
        pick = lambda: select_cyclic(state)
    elif method.tag == "rbk":
        cdf = cumulative_weights(state.a_sq)
        pick = lambda: select_rbk(state, stream, cdf)
    elif method.tag == "grbk":
        pick = lambda: select_grbk(state, stream)
    elif method.tag == "rgrbk":
        theta = method.theta
        pick = lambda: select_rgrbk(state, stream, theta)
    else:
        pick = lambda: select_mwrbk(state)

    trace = []
    rrn, rel = measures()
    if config.record_trace:
        trace.append(TraceRow(0, rrn, rel, -1))
        if monitor is not None:
            monitor(state)
    terminated_by = "max_iter"
    max_drift = 0.0
    tol = stop.tol
    drift_every = config.drift_check_every
    max_iter = config.max_iter

    i = -1
    start = time.perf_counter()
    value = stop_value(rrn, rel)
    if value <= tol:
        terminated_by = "tolerance"
    else:
        while state.k < max_iter:
            if state.residual_fro_sq == 0.0:
                # every method leaves X fixed once R vanishes exactly
                terminated_by = "stationary"
                break
            i = pick()
            update_row(state, i, alpha)
            k = state.k
            if drift_every and k % drift_every == 0:
                drift = state.residual_drift()
                max_drift = max(max_drift, drift)
                if drift > drift_tol:
                    log.warning("residual drift %.3e at k=%d exceeds %.3e; resynchronizing", drift, k, drift_tol)
                    state.resync()
            rrn, rel = measures()
            value = stop_value(rrn, rel)
            if not math.isfinite(value) or not math.isfinite(rel):
                raise DivergenceError(
                    f"{method.label} diverged at k={k} (||R||_F={math.sqrt(state.residual_fro_sq):.3e})",
                    iteration=k,
                    residual_norm=math.sqrt(state.residual_fro_sq),
                )
            if config.record_trace and _should_record(k):
                trace.append(TraceRow(k, rrn, rel, i))
                if monitor is not None:
                    monitor(state)
            if value <= tol:
                terminated_by = "tolerance"
                break
    wall = time.perf_counter() - start

    if config.record_trace and (not trace or trace[-1].k != state.k):
        trace.append(TraceRow(state.k, rrn, rel, i))
    return SolveReport(
        X=state.X,
        iterations=state.k,
        wall_seconds=wall,
        final_rrn=rrn,
        final_residual_rel=rel,
        terminated_by=terminated_by,
        method=method.tag,
        theta=method.theta,
        alpha=alpha,
        alpha_rule=config.alpha_rule,
        seed=config.seed,
        max_drift=max_drift,
        trace=tuple(trace),
    )
