"""Dense/CSR matrix helpers, norms, decompositions and small oracles.

Dense matrices are plain ``float64`` numpy arrays; sparse matrices are
canonical ``scipy.sparse.csr_array`` instances (sorted column indices, no
duplicates, no explicit zeros). Everything here is a pure function.
"""
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import CapacityError, ConvergenceError, DecompositionError, DomainError, ShapeError

EPS = 2.0 ** -52
KRON_MAX_ENTRIES = 10 ** 6


def as_dense(M):
    """Return ``M`` as a finite 2-D float64 array (converting CSR input)."""
    if sp.issparse(M):
        M = M.toarray()
    A = np.asarray(M, dtype=np.float64)
    if A.ndim == 1:
        A = A.reshape(1, -1)
    if A.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={A.ndim}")
    if not np.all(np.isfinite(A)):
        raise DomainError("matrix contains NaN or Inf entries")
    return A


def as_csr(M):
    """Return ``M`` as a canonical CSR array with finite nonzero values."""
    S = sp.csr_array(M, dtype=np.float64, copy=True)
    S.sum_duplicates()
    S.eliminate_zeros()
    S.sort_indices()
    if not np.all(np.isfinite(S.data)):
        raise DomainError("matrix contains NaN or Inf entries")
    return S


def is_sparse(M):
    return sp.issparse(M)


def shape_of(M):
    return tuple(M.shape)


def row(M, i):
    """Row ``i`` of ``M`` as a dense vector of length ``M.shape[1]``."""
    if sp.issparse(M):
        start, stop = M.indptr[i], M.indptr[i + 1]
        out = np.zeros(M.shape[1])
        out[M.indices[start:stop]] = M.data[start:stop]
        return out
    return np.array(M[i], dtype=np.float64)


def transpose(M):
    """Exact transpose; CSR input stays CSR."""
    if sp.issparse(M):
        return as_csr(M.T)
    return np.ascontiguousarray(np.asarray(M).T)


def matmul(lhs, rhs):
    """Dense product ``lhs @ rhs`` for any mix of dense and CSR operands."""
    if lhs.shape[1] != rhs.shape[0]:
        raise ShapeError(f"cannot multiply {lhs.shape} by {rhs.shape}")
    out = lhs @ rhs
    if sp.issparse(out):
        out = out.toarray()
    return np.asarray(out, dtype=np.float64)


def row_sq_norms(M):
    """Squared 2-norm of every row of ``M``."""
    if M.shape[0] == 0 or M.shape[1] == 0:
        raise ShapeError("row_sq_norms needs a nonempty matrix")
    if sp.issparse(M):
        lengths = np.diff(M.indptr)
        row_ids = np.repeat(np.arange(M.shape[0]), lengths)
        return np.bincount(row_ids, weights=M.data * M.data, minlength=M.shape[0])
    M = np.asarray(M, dtype=np.float64)
    return np.einsum("ij,ij->i", M, M)


def frobenius_sq(M):
    if sp.issparse(M):
        return float(np.dot(M.data, M.data))
    M = np.asarray(M)
    return float(np.einsum("ij,ij->", M, M))


def frobenius(M):
    return float(np.sqrt(frobenius_sq(M)))


def spectral_norm(M, tol=1e-10, max_iter=5000, seed=0):
    """Largest singular value of ``M`` by power iteration on its smaller Gram matrix.

    The Gram matrix is never formed; each step applies ``M`` and ``M.T``.
    Iteration stops once the extrapolated remaining change of the Rayleigh
    quotient drops below ``tol`` relative to the estimate.

    Raises
    ------
    ConvergenceError
        If ``max_iter`` steps pass without meeting the tolerance. The last
        Rayleigh-quotient estimate of sigma_max is attached.
    """
    rows, cols = M.shape
    if rows == 0 or cols == 0 or frobenius_sq(M) == 0.0:
        raise DomainError("spectral_norm needs a nonzero matrix")
    Mt = M.T
    if cols <= rows:
        apply_gram = lambda v: Mt @ (M @ v)
        size = cols
    else:
        apply_gram = lambda v: M @ (Mt @ v)
        size = rows
    rng = np.random.default_rng(seed)
    v = np.ones(size) / np.sqrt(size) + 1e-3 * rng.standard_normal(size)
    v /= np.linalg.norm(v)

    lam = 0.0
    prev_delta = None
    for _ in range(max_iter):
        w = np.asarray(apply_gram(v)).ravel()
        lam_new = float(v @ w)
        norm_w = np.linalg.norm(w)
        if norm_w == 0.0:
            # start vector in the null space of a rank-deficient Gram matrix
            v = rng.standard_normal(size)
            v /= np.linalg.norm(v)
            continue
        v = w / norm_w
        delta = abs(lam_new - lam)
        lam = lam_new
        if delta <= 4 * EPS * lam:
            return float(np.sqrt(lam))
        if prev_delta is not None and prev_delta > 0.0:
            ratio = min(delta / prev_delta, 0.999999)
            if delta * ratio / (1.0 - ratio) <= 0.5 * tol * lam and delta <= tol * lam:
                return float(np.sqrt(lam))
        prev_delta = delta
    raise ConvergenceError(
        f"power iteration did not converge in {max_iter} steps "
        f"(last estimate {np.sqrt(max(lam, 0.0)):.17g})",
        last_estimate=float(np.sqrt(max(lam, 0.0))),
    )


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD ``M = U @ diag(singular_values) @ V.T``."""

    U: np.ndarray
    singular_values: np.ndarray
    V: np.ndarray
    numeric_rank: int
    rank_tol: float

    def reconstruct(self):
        return (self.U * self.singular_values) @ self.V.T

    @property
    def sigma_max(self):
        return float(self.singular_values[0]) if self.singular_values.size else 0.0

    @property
    def sigma_min_positive(self):
        """Smallest singular value above the rank tolerance (0.0 for a zero matrix)."""
        if self.numeric_rank == 0:
            return 0.0
        return float(self.singular_values[self.numeric_rank - 1])


def default_rank_tol(shape, sigma_max):
    return 8.0 * max(shape) * sigma_max * EPS


def svd(M, method="lapack", rank_tol=None, max_sweeps=60):
    """Thin singular value decomposition of a dense matrix.

    ``method="lapack"`` uses numpy's divide-and-conquer driver;
    ``method="jacobi"`` runs a one-sided (Hestenes) Jacobi iteration with a
    round-robin pair ordering, vectorized across each round.
    """
    M = as_dense(M)
    if M.size == 0:
        raise ShapeError("svd needs a nonempty matrix")
    if method == "lapack":
        try:
            U, s, Vt = np.linalg.svd(M, full_matrices=False)
        except np.linalg.LinAlgError as exc:
            raise DecompositionError(str(exc)) from exc
        V = Vt.T
    elif method == "jacobi":
        if M.shape[0] >= M.shape[1]:
            U, s, V = _jacobi_svd_tall(M, max_sweeps)
        else:
            V, s, U = _jacobi_svd_tall(M.T, max_sweeps)
    else:
        raise DomainError(f"unknown svd method {method!r}")
    sigma_max = float(s[0]) if s.size else 0.0
    tol = default_rank_tol(M.shape, sigma_max) if rank_tol is None else float(rank_tol)
    rank = int(np.count_nonzero(s > tol))
    return SvdFactors(U=U, singular_values=s, V=V, numeric_rank=rank, rank_tol=tol)


def _round_robin(n):
    """Rounds of disjoint column pairs covering every pair once (circle method)."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        pairs = [(players[k], players[size - 1 - k]) for k in range(size // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a >= 0 and b >= 0]
        if pairs:
            rounds.append((np.array([a for a, _ in pairs]), np.array([b for _, b in pairs])))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi_svd_tall(M, max_sweeps):
    m, n = M.shape
    W = M.copy()
    V = np.eye(n)
    rounds = _round_robin(n)
    for _ in range(max_sweeps):
        rotated = False
        for left, right in rounds:
            wl, wr = W[:, left], W[:, right]
            alpha = np.einsum("ij,ij->j", wl, wl)
            beta = np.einsum("ij,ij->j", wr, wr)
            gamma = np.einsum("ij,ij->j", wl, wr)
            active = np.abs(gamma) > EPS * np.sqrt(alpha * beta)
            active &= gamma != 0.0
            if not np.any(active):
                continue
            rotated = True
            left, right = left[active], right[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t[zeta == 0.0] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            for X in (W, V):
                xl, xr = X[:, left].copy(), X[:, right]
                X[:, left] = c * xl - s * xr
                X[:, right] = s * xl + c * xr
        if not rotated:
            break
    else:
        raise DecompositionError(f"one-sided Jacobi SVD did not converge in {max_sweeps} sweeps")

    sigma = np.linalg.norm(W, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, W, V = sigma[order], W[:, order], V[:, order]
    floor = m * EPS * (sigma[0] if sigma.size else 0.0)
    good = sigma > floor
    U = np.zeros((m, n))
    U[:, good] = W[:, good] / sigma[good]
    r = int(np.count_nonzero(good))
    if r < n:
        # orthonormal completion for the numerically null directions
        Q, _ = np.linalg.qr(np.hstack([U[:, :r], np.eye(m)]))
        U[:, r:] = Q[:, r:n]
        sigma[r:] = np.where(sigma[r:] > 0.0, sigma[r:], 0.0)
    return U, sigma, V


def pseudoinverse(M, rank_tol=None, method="lapack"):
    """Moore-Penrose inverse from the thin SVD, dropping sigma <= rank_tol."""
    f = svd(M, method=method, rank_tol=rank_tol)
    r = f.numeric_rank
    return (f.V[:, :r] / f.singular_values[:r]) @ f.U[:, :r].T


def penrose_residuals(M, Mp):
    """Frobenius norms of the four Penrose-condition residuals."""
    M = as_dense(M)
    MMp = M @ Mp
    MpM = Mp @ M
    return (
        frobenius(MMp @ M - M),
        frobenius(MpM @ Mp - Mp),
        frobenius(MMp.T - MMp),
        frobenius(MpM.T - MpM),
    )


def kron(A, B):
    """Kronecker product of two small matrices (dense result)."""
    rows = A.shape[0] * B.shape[0]
    cols = A.shape[1] * B.shape[1]
    if rows * cols > KRON_MAX_ENTRIES:
        raise CapacityError(f"kron result {rows}x{cols} exceeds {KRON_MAX_ENTRIES} entries")
    return np.kron(as_dense(A), as_dense(B))


def vec(M):
    """Column-stacking vectorization."""
    return as_dense(M).reshape(-1, order="F").copy()


def unvec(v, rows, cols):
    """Inverse of :func:`vec`."""
    v = np.asarray(v, dtype=np.float64)
    if v.size != rows * cols:
        raise ShapeError(f"cannot reshape {v.size} entries to {rows}x{cols}")
    return v.reshape((rows, cols), order="F").copy()
