"""Color image restoration posed as ``A X A_c^T = B``.

Images are ``(m, n, 3)`` float arrays in [0, 1]. The channel stack of an
image is the ``(m n, 3)`` matrix whose column ``c`` is the column-stacked
channel ``c``; pixel ``(i, j)`` sits at row ``i + j m``.
"""
import csv
import io
import math
from dataclasses import dataclass

import numpy as np
import scipy.signal
import scipy.sparse as sp

from . import matcore
from .errors import ConfigError, ShapeError
from .solvers import ResidualRel, SolveConfig, solve

CROSS_CHANNEL = np.array([
    [0.9, 0.05, 0.05],
    [0.0, 0.9, 0.1],
    [0.05, 0.1, 0.85],
])
BOUNDARIES = ("zero", "periodic")
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
METRICS_COLUMNS = (
    "image", "method", "theta", "iterations",
    "psnr_blurred", "psnr_restored", "ssim_blurred", "ssim_restored",
)


def gaussian_kernel(size, sigma):
    """Normalized ``size x size`` Gaussian, sampled like MATLAB's fspecial('gaussian')."""
    size = int(size)
    if size < 1 or size % 2 == 0:
        raise ConfigError(f"kernel size must be odd and positive, got {size}")
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    r = size // 2
    y, x = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    h = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    h[h < np.finfo(np.float64).eps * h.max()] = 0.0
    return h / h.sum()


def build_blur_operator(m, n, kernel, boundary="zero"):
    """Sparse ``mn x mn`` matrix applying 2-D convolution with ``kernel`` to a vec'd channel.

    ``boundary="zero"`` treats pixels outside the image as 0 (kernel rows are
    truncated, not renormalized); ``"periodic"`` wraps around.
    """
    K = np.asarray(kernel, dtype=np.float64)
    kh, kw = K.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"kernel dimensions must be odd, got {K.shape}")
    if kh > m or kw > n:
        raise ConfigError(f"kernel {K.shape} does not fit a {m}x{n} image")
    if boundary not in BOUNDARIES:
        raise ConfigError(f"boundary must be one of {BOUNDARIES}, got {boundary!r}")
    ci, cj = kh // 2, kw // 2
    ii, jj = np.meshgrid(np.arange(m), np.arange(n), indexing="ij")
    out_idx = (ii + jj * m).ravel()
    rows, cols, vals = [], [], []
    for a in range(kh):
        for b in range(kw):
            w = K[a, b]
            if w == 0.0:
                continue
            si = ii + ci - a
            sj = jj + cj - b
            if boundary == "periodic":
                si, sj = si % m, sj % n
                ok = np.ones(si.shape, dtype=bool)
            else:
                ok = (si >= 0) & (si < m) & (sj >= 0) & (sj < n)
            ok = ok.ravel()
            rows.append(out_idx[ok])
            cols.append((si + sj * m).ravel()[ok])
            vals.append(np.full(int(ok.sum()), w))
    M = sp.coo_array(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m * n, m * n)
    )
    return matcore.as_csr(M)


@dataclass(frozen=True)
class BlurModel:
    A: object
    A_c: np.ndarray
    height: int
    width: int
    kernel_size: int
    sigma: float
    boundary: str = "zero"

    @classmethod
    def gaussian(cls, height, width, size=5, sigma=6.0, cross_channel=None, boundary="zero"):
        kernel = gaussian_kernel(size, sigma)
        A = build_blur_operator(height, width, kernel, boundary)
        A_c = CROSS_CHANNEL.copy() if cross_channel is None else matcore.as_dense(cross_channel)
        if A_c.shape != (3, 3):
            raise ShapeError(f"cross-channel matrix must be 3x3, got {A_c.shape}")
        return cls(A=A, A_c=A_c, height=height, width=width, kernel_size=size, sigma=float(sigma),
                   boundary=boundary)


def to_stack(image):
    """``(m, n, 3)`` image -> ``(m n, 3)`` channel stack."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected an (m, n, 3) image, got {img.shape}")
    m, n, _ = img.shape
    return img.reshape(m * n, 3, order="F")


def from_stack(X, height, width):
    X = np.asarray(X, dtype=np.float64)
    if X.shape != (height * width, 3):
        raise ShapeError(f"stack must be {(height * width, 3)}, got {X.shape}")
    return X.reshape(height, width, 3, order="F")


def clamp(image):
    return np.clip(image, 0.0, 1.0)


def forward_blur(model, X):
    """Observed stack ``A X A_c^T`` for an image stack ``X``."""
    if X.shape != (model.A.shape[1], 3):
        raise ShapeError(f"stack must be {(model.A.shape[1], 3)}, got {X.shape}")
    return matcore.matmul(model.A, X) @ model.A_c.T


def restore(model, observed, config=None, iterations=20_000, method="grbk"):
    """Solve ``A X A_c^T = observed`` from ``X = 0``.

    Without a ``config`` the solver runs ``iterations`` steps of ``method``
    (residual stopping at tolerance 0, i.e. a pure iteration budget).
    Returns ``(stack, report)``; the stack is not clamped.
    """
    if observed.shape != (model.A.shape[0], 3):
        raise ShapeError(f"observed stack must be {(model.A.shape[0], 3)}, got {observed.shape}")
    if config is None:
        config = SolveConfig(method=method, stop=ResidualRel(0.0), max_iter=iterations)
    X0 = np.zeros((model.A.shape[1], 3))
    report = solve(model.A, model.A_c.T, observed, X0, config)
    return report.X, report


def psnr(reference, test):
    """Peak signal-to-noise ratio in dB for unit dynamic range; ``inf`` if identical."""
    ref, tst = _pair(reference, test)
    mse = float(np.mean((ref - tst) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _ssim_window():
    r = SSIM_WINDOW // 2
    g = np.exp(-(np.arange(-r, r + 1) ** 2) / (2.0 * SSIM_SIGMA ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_channel(x, y):
    """Mean SSIM map of two 2-D arrays (Gaussian 11x11 window, sigma 1.5, 'valid' region)."""
    c1 = 0.01 ** 2
    c2 = 0.03 ** 2
    w = _ssim_window()
    filt = lambda z: scipy.signal.convolve2d(z, w, mode="valid")
    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x * mu_x
    syy = filt(y * y) - mu_y * mu_y
    sxy = filt(x * y) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(reference, test):
    """Single-scale SSIM averaged over the three channels."""
    ref, tst = _pair(reference, test)
    if min(ref.shape[:2]) < SSIM_WINDOW:
        raise ConfigError(f"SSIM needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {ref.shape[:2]}")
    return float(np.mean([ssim_channel(ref[:, :, c], tst[:, :, c]) for c in range(ref.shape[2])]))


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def synthetic_image(height=32, width=32):
    """Deterministic colored test pattern: gradient, disk, square, stripes."""
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    u, v = x / max(width - 1, 1), y / max(height - 1, 1)
    img = np.zeros((height, width, 3))
    img[..., 0] = 0.15 + 0.25 * u
    img[..., 1] = 0.2 + 0.3 * v
    img[..., 2] = 0.55 - 0.25 * u
    disk = (u - 0.33) ** 2 + (v - 0.35) ** 2 < 0.2 ** 2
    img[disk] = (0.9, 0.15, 0.1)
    square = (u > 0.55) & (u < 0.9) & (v > 0.5) & (v < 0.85)
    img[square] = (0.1, 0.8, 0.25)
    tri = (v > 0.6) & (u < 0.45) & (u > 0.45 - (v - 0.6))
    img[tri] = (0.2, 0.25, 0.95)
    stripes = (v < 0.18) & ((x // 2) % 2 == 0)
    img[stripes] = (0.95, 0.9, 0.2)
    return img


def load_png(path):
    """8-bit RGB PNG -> float image in [0, 1]."""
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_png(path, image):
    from PIL import Image

    arr = np.rint(clamp(np.asarray(image)) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def metrics_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(METRICS_COLUMNS)
    for row in rows:
        writer.writerow(["" if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                         for c in METRICS_COLUMNS])
    return buf.getvalue()
