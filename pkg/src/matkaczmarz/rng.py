"""Seedable random streams for problem generation and randomized row selection.

Uniforms come from numpy's Philox counter-based bit generator, whose output
for a given key is identical on every platform. Normals are produced by the
Box-Muller transform on pairs of those uniforms, so the whole draw sequence
is fixed by ``(ALGORITHM, seed)``.
"""
import numpy as np
import scipy.sparse as sp

from .errors import DomainError

ALGORITHM = "philox4x64-boxmuller"
_MASK64 = (1 << 64) - 1


class RngStream:
    """A single-owner random stream. Use :meth:`substream` for workers."""

    algorithm = ALGORITHM

    def __init__(self, seed=0):
        seed = int(seed)
        if seed < 0 or seed > _MASK64:
            raise DomainError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self._gen = np.random.Generator(np.random.Philox(key=seed))

    def __repr__(self):
        return f"RngStream(algorithm={self.algorithm!r}, seed={self.seed})"

    def substream(self, index):
        """Independent stream for trial ``index``: a distinct Philox key."""
        return RngStream(derive_seed(self.seed, index))

    def uniform(self, size=None):
        """Uniform draws on [0, 1)."""
        return self._gen.random(size)

    def gauss(self, size=None):
        """Standard normal draws (Box-Muller, cosine branch first)."""
        if size is None:
            u1, u2 = self._gen.random(2)
            return float(np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2))
        count = int(np.prod(size))
        pairs = (count + 1) // 2
        u = self._gen.random(2 * pairs)
        radius = np.sqrt(-2.0 * np.log1p(-u[0::2]))
        angle = 2.0 * np.pi * u[1::2]
        z = np.empty(2 * pairs)
        z[0::2] = radius * np.cos(angle)
        z[1::2] = radius * np.sin(angle)
        return z[:count].reshape(size)


def derive_seed(seed, index):
    """Seed of substream ``index``: ``seed`` XOR a SplitMix64 hash of the index."""
    z = (int(index) + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    z ^= z >> 31
    return (int(seed) ^ z) & _MASK64


def gauss(stream):
    """One standard normal draw."""
    return stream.gauss()


def cumulative_weights(weights):
    """Validated cumulative sum for :func:`draw_from_cumulative`."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise DomainError("weights must be a nonempty vector")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise DomainError("weights must be finite and nonnegative")
    cdf = np.cumsum(w)
    if cdf[-1] <= 0.0:
        raise DomainError("weights must contain a strictly positive entry")
    return cdf


def draw_from_cumulative(stream, cdf):
    """Inverse-transform draw against a precomputed cumulative sum."""
    u = stream.uniform() * cdf[-1]
    i = int(np.searchsorted(cdf, u, side="right"))
    if i >= cdf.size:
        # u rounded up to the total; fall back to the last positive-weight index
        i = int(np.searchsorted(cdf, cdf[-1], side="left"))
    return i


def categorical(stream, weights):
    """Index ``i`` with probability ``weights[i] / sum(weights)``."""
    return draw_from_cumulative(stream, cumulative_weights(weights))


def sparse_gaussian(stream, rows, cols, density, scale=1.0):
    """Random CSR matrix with Bernoulli(density) pattern and Gaussian nonzeros.

    Each of the ``rows * cols`` positions is kept independently, so the
    nonzero count is Binomial(rows * cols, density). Values are
    ``scale * N(0, 1)``.
    """
    if not 0.0 < density <= 1.0:
        raise DomainError(f"density must lie in (0, 1], got {density}")
    keep = stream.uniform(rows * cols) < density
    flat = np.flatnonzero(keep)
    values = scale * stream.gauss(flat.size)
    nonzero = values != 0.0
    flat, values = flat[nonzero], values[nonzero]
    S = sp.csr_array((values, (flat // cols, flat % cols)), shape=(rows, cols))
    S.sort_indices()
    return S
