"""Test-system construction: random families, Matrix Market files, registry.

A problem spec is a small JSON-compatible mapping::

    {"name": "set2", "seed": 7,
     "A": {"kind": "gaussian", "rows": 70, "cols": 15},
     "B": {"kind": "stacked", "mode": "vertical",
           "source": {"kind": "sparse_gaussian", "rows": 8, "cols": 90, "density": 0.1}}}

Matrix source kinds are ``gaussian``, ``sparse_gaussian``, ``file``,
``stacked`` (``[G; G]`` or ``[G, G]``) and ``transpose``. The unknown is
always ``randn(A.cols, B.rows)`` and ``C = A X B``.
"""
import json
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import matcore
from .errors import ConfigError, MatrixMarketError
from .rng import RngStream, sparse_gaussian

SOURCE_KINDS = ("gaussian", "sparse_gaussian", "file", "stacked", "transpose")


@dataclass(frozen=True)
class ProblemSpec:
    a_source: dict
    b_source: dict
    seed: int = 0
    name: str = "problem"
    x_shape: tuple = None

    @classmethod
    def from_dict(cls, d, base_dir=None):
        try:
            a, b = d["A"], d["B"]
        except KeyError as exc:
            raise ConfigError(f"problem spec is missing matrix {exc.args[0]!r}") from None
        x_shape = None
        if "X" in d:
            x = d["X"]
            x_shape = (int(x["rows"]), int(x["cols"]))
        if base_dir is not None:
            a, b = _resolve_paths(a, base_dir), _resolve_paths(b, base_dir)
        return cls(a_source=a, b_source=b, seed=int(d.get("seed", 0)), name=str(d.get("name", "problem")),
                   x_shape=x_shape)

    def to_dict(self):
        d = {"name": self.name, "seed": self.seed, "A": self.a_source, "B": self.b_source}
        if self.x_shape is not None:
            d["X"] = {"rows": self.x_shape[0], "cols": self.x_shape[1]}
        return d


def _resolve_paths(src, base_dir):
    src = dict(src)
    if src.get("kind") == "file" and not os.path.isabs(src["path"]):
        src["path"] = os.path.join(base_dir, src["path"])
    if "source" in src:
        src["source"] = _resolve_paths(src["source"], base_dir)
    return src


def load_spec(path):
    """Read a problem spec (or a list of specs) from a JSON file."""
    with open(path) as fh:
        data = json.load(fh)
    base = os.path.dirname(os.path.abspath(path))
    if isinstance(data, list):
        return [ProblemSpec.from_dict(d, base) for d in data]
    return ProblemSpec.from_dict(data, base)


@dataclass
class ProblemInstance:
    A: object
    B: object
    C: np.ndarray = field(repr=False)
    X_true: np.ndarray = field(repr=False)
    spec: ProblemSpec = None
    density: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.A.shape[0], self.A.shape[1], self.B.shape[0], self.B.shape[1]


def density(M):
    """Fraction of stored nonzeros: ``nnz / (rows * cols)``."""
    rows, cols = M.shape
    nnz = M.count_nonzero() if sp.issparse(M) else int(np.count_nonzero(M))
    return nnz / float(rows * cols)


def build_source(src, stream):
    """Materialize one matrix source, drawing from ``stream`` as needed."""
    kind = src.get("kind")
    if kind not in SOURCE_KINDS:
        raise ConfigError(f"unknown matrix source kind {kind!r}; expected one of {SOURCE_KINDS}")
    if kind == "gaussian":
        rows, cols = _dims(src)
        return stream.gauss((rows, cols)) * float(src.get("scale", 1.0))
    if kind == "sparse_gaussian":
        rows, cols = _dims(src)
        try:
            dens = float(src["density"])
        except KeyError:
            raise ConfigError("sparse_gaussian source needs a density") from None
        return matcore.as_csr(sparse_gaussian(stream, rows, cols, dens, float(src.get("scale", 1.0))))
    if kind == "file":
        return load_matrix_market(src["path"])
    if kind == "transpose":
        return transpose_source(build_source(src["source"], stream))
    # stacked
    mode = src.get("mode", "vertical")
    G = build_source(src["source"], stream)
    if mode == "vertical":
        return sp.vstack([G, G], format="csr") if sp.issparse(G) else np.vstack([G, G])
    if mode == "horizontal":
        return sp.hstack([G, G], format="csr") if sp.issparse(G) else np.hstack([G, G])
    raise ConfigError(f"stacked mode must be 'vertical' or 'horizontal', got {mode!r}")


def _dims(src):
    try:
        rows, cols = int(src["rows"]), int(src["cols"])
    except KeyError as exc:
        raise ConfigError(f"matrix source is missing {exc.args[0]!r}") from None
    if rows < 1 or cols < 1:
        raise ConfigError(f"matrix dimensions must be positive, got {rows}x{cols}")
    return rows, cols


def transpose_source(M):
    return matcore.transpose(M)


def generate(spec):
    """Build ``A``, ``B``, a Gaussian ``X_true`` and the consistent ``C = A X_true B``."""
    stream = RngStream(spec.seed)
    A = build_source(spec.a_source, stream)
    B = build_source(spec.b_source, stream)
    p, q = A.shape[1], B.shape[0]
    if spec.x_shape is not None and tuple(spec.x_shape) != (p, q):
        raise ConfigError(
            f"shape mismatch: A is {A.shape[0]}x{p} and B is {q}x{B.shape[1]}, "
            f"so X must be {p}x{q}, but the problem asks for {spec.x_shape[0]}x{spec.x_shape[1]}"
        )
    X = stream.gauss((p, q))
    C = matcore.matmul(matcore.matmul(A, X), B)
    return ProblemInstance(A=A, B=B, C=C, X_true=X, spec=spec,
                           density={"A": density(A), "B": density(B)})


# ---------------------------------------------------------------- Matrix Market

_FIELDS = ("real", "integer", "double")
_SYMMETRIES = ("general", "symmetric")


def load_matrix_market(path):
    """Read a real/integer Matrix Market file.

    Coordinate files give a canonical CSR matrix (duplicates summed,
    explicit zeros dropped); array files give a dense array. Symmetric
    storage is expanded to the full matrix.
    """
    try:
        with open(path) as fh:
            text = fh.read()
    except UnicodeDecodeError as exc:
        raise MatrixMarketError(f"{path} is not a text file: {exc}") from None
    return parse_matrix_market(text)


def parse_matrix_market(text):
    lines = text.splitlines()
    if not lines:
        raise MatrixMarketError("empty input", line=1)
    header = lines[0].split()
    if len(header) != 5 or header[0] != "%%MatrixMarket":
        raise MatrixMarketError("expected '%%MatrixMarket object format field symmetry' header", line=1)
    obj, fmt, fld, sym = (h.lower() for h in header[1:])
    if obj != "matrix":
        raise MatrixMarketError(f"unsupported object {obj!r}", line=1)
    if fmt not in ("coordinate", "array"):
        raise MatrixMarketError(f"unsupported format {fmt!r}", line=1)
    if fld not in _FIELDS:
        raise MatrixMarketError(f"unsupported field {fld!r} (only real and integer)", line=1)
    if sym not in _SYMMETRIES:
        raise MatrixMarketError(f"unsupported symmetry {sym!r} (only general and symmetric)", line=1)

    body = [(n, ln) for n, ln in enumerate(lines[1:], start=2) if ln.strip() and not ln.lstrip().startswith("%")]
    if not body:
        raise MatrixMarketError("missing size line", line=len(lines))
    size_no, size_line = body[0]
    entries = body[1:]
    sizes = _ints(size_line, size_no)

    if fmt == "coordinate":
        if len(sizes) != 3:
            raise MatrixMarketError("coordinate size line needs 'rows cols nnz'", line=size_no)
        rows, cols, nnz = sizes
        if sym == "symmetric" and rows != cols:
            raise MatrixMarketError("symmetric matrix must be square", line=size_no)
        if len(entries) != nnz:
            raise MatrixMarketError(f"header declares {nnz} entries, found {len(entries)}",
                                    line=entries[-1][0] if entries else size_no)
        I = np.empty(nnz, dtype=np.int64)
        J = np.empty(nnz, dtype=np.int64)
        V = np.empty(nnz)
        for t, (no, ln) in enumerate(entries):
            parts = ln.split()
            if len(parts) != 3:
                raise MatrixMarketError("coordinate entry needs 'row col value'", line=no)
            i, j = _ints(" ".join(parts[:2]), no)
            if not (1 <= i <= rows and 1 <= j <= cols):
                raise MatrixMarketError(f"index ({i}, {j}) outside {rows}x{cols}", line=no)
            if sym == "symmetric" and i < j:
                raise MatrixMarketError("symmetric storage must hold the lower triangle only", line=no)
            I[t], J[t], V[t] = i - 1, j - 1, _float(parts[2], no)
        if sym == "symmetric":
            off = I != J
            I, J, V = np.concatenate([I, J[off]]), np.concatenate([J, I[off]]), np.concatenate([V, V[off]])
        return matcore.as_csr(sp.coo_array((V, (I, J)), shape=(rows, cols)))

    if len(sizes) != 2:
        raise MatrixMarketError("array size line needs 'rows cols'", line=size_no)
    rows, cols = sizes
    if sym == "symmetric":
        if rows != cols:
            raise MatrixMarketError("symmetric matrix must be square", line=size_no)
        expected = rows * (rows + 1) // 2
    else:
        expected = rows * cols
    values = []
    for no, ln in entries:
        parts = ln.split()
        if len(parts) != 1:
            raise MatrixMarketError("array entry needs exactly one value", line=no)
        values.append(_float(parts[0], no))
    if len(values) != expected:
        raise MatrixMarketError(f"expected {expected} array values, found {len(values)}",
                                line=entries[-1][0] if entries else size_no)
    if sym == "general":
        return np.array(values, dtype=np.float64).reshape((rows, cols), order="F")
    M = np.zeros((rows, cols))
    it = iter(values)
    for j in range(cols):
        for i in range(j, rows):
            M[i, j] = M[j, i] = next(it)
    return M


def _ints(line, no):
    try:
        return [int(tok) for tok in line.split()]
    except ValueError:
        raise MatrixMarketError(f"expected integers, got {line.strip()!r}", line=no) from None


def _float(tok, no):
    try:
        value = float(tok)
    except ValueError:
        raise MatrixMarketError(f"bad numeric value {tok!r}", line=no) from None
    if not np.isfinite(value):
        raise MatrixMarketError(f"non-finite value {tok!r}", line=no)
    return value


def format_matrix_market(M, comment=None):
    """Matrix Market text: coordinate for CSR input, array for dense input."""
    out = []
    if sp.issparse(M):
        S = matcore.as_csr(M)
        out.append("%%MatrixMarket matrix coordinate real general")
        if comment:
            out.extend(f"% {c}" for c in comment.splitlines())
        out.append(f"{S.shape[0]} {S.shape[1]} {S.nnz}")
        for i in range(S.shape[0]):
            for k in range(S.indptr[i], S.indptr[i + 1]):
                out.append(f"{i + 1} {S.indices[k] + 1} {S.data[k]:.17g}")
    else:
        D = matcore.as_dense(M)
        out.append("%%MatrixMarket matrix array real general")
        if comment:
            out.extend(f"% {c}" for c in comment.splitlines())
        out.append(f"{D.shape[0]} {D.shape[1]}")
        out.extend(f"{v:.17g}" for v in D.reshape(-1, order="F"))
    return "\n".join(out) + "\n"


def write_matrix_market(path, M, comment=None):
    with open(path, "w") as fh:
        fh.write(format_matrix_market(M, comment))


# ---------------------------------------------------------------- registry

def _g(rows, cols):
    return {"kind": "gaussian", "rows": rows, "cols": cols}


def _s(rows, cols, dens):
    return {"kind": "sparse_gaussian", "rows": rows, "cols": cols, "density": dens}


def _stack(src, mode):
    return {"kind": "stacked", "mode": mode, "source": src}


# Scaled-down analogues of the three problem families: two per rank case.
MINI_REGISTRY = {
    # A full column rank, B full row rank
    "fullcol-dense": ProblemSpec(_g(70, 15), _g(35, 80), seed=101, name="fullcol-dense"),
    "fullcol-sparse": ProblemSpec(_s(84, 10, 0.2), _s(16, 90, 0.2), seed=102, name="fullcol-sparse"),
    # A full row rank, B full column rank
    "fullrow-dense": ProblemSpec(_g(15, 70), _g(68, 27), seed=201, name="fullrow-dense"),
    "fullrow-sparse": ProblemSpec(_s(12, 100, 0.1), _s(60, 20, 0.15), seed=202, name="fullrow-sparse"),
    # both rank deficient via duplicated blocks
    "deficient-dense": ProblemSpec(_stack(_g(70, 8), "horizontal"), _stack(_g(8, 90), "vertical"),
                                   seed=301, name="deficient-dense"),
    "deficient-stacked": ProblemSpec(_stack(_g(15, 40), "vertical"), _stack(_g(30, 12), "vertical"),
                                     seed=302, name="deficient-stacked"),
}

REGISTRIES = {"mini": MINI_REGISTRY}


def registry(name="mini"):
    try:
        return REGISTRIES[name]
    except KeyError:
        raise ConfigError(f"unknown registry {name!r}; available: {sorted(REGISTRIES)}") from None
