"""Forward models for inpainting, deblurring and superresolution.

Images are ``(height, width)`` arrays flattened row-major into vectors of
length ``n = height * width``.  Convolutions are circular, so every blur is
diagonalized by the 2-D FFT and its adjoint is exact.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence, Tuple

import numpy as np

from .errors import ValidationError
from .linops import LinearMap

Shape = Tuple[int, int]


@dataclass(frozen=True, eq=False)
class InverseProblem:
    """Observed data ``b`` of a latent image under ``A``."""

    A: LinearMap
    b: np.ndarray = field(repr=False)
    shape: Shape

    def __post_init__(self):
        h, w = self.shape
        if self.A.dim_in != h * w:
            raise ValidationError(f"A acts on {self.A.dim_in} pixels but the image has {h * w}")
        b = np.asarray(self.b, dtype=float)
        if b.shape != (self.A.dim_out,):
            raise ValidationError(f"b must have length {self.A.dim_out}, got {b.shape}")
        if not np.all(np.isfinite(b)):
            raise ValidationError("b contains non-finite values")
        object.__setattr__(self, "b", b)

    @property
    def n(self) -> int:
        return self.A.dim_in


class MetricKind(enum.Enum):
    EUCLIDEAN = "euclidean"
    DIAG_WEIGHTED = "diag_weighted"


@dataclass(frozen=True, eq=False)
class Metric:
    """Inner product ``<x, y>`` (Euclidean) or ``x^T D y`` with diagonal ``D``."""

    kind: MetricKind
    weights: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind is MetricKind.DIAG_WEIGHTED:
            w = np.asarray(self.weights, dtype=float)
            if w.ndim != 1 or not np.all(w > 0):
                raise ValidationError("metric weights must be a strictly positive vector")
            object.__setattr__(self, "weights", w)

    @classmethod
    def euclidean(cls) -> "Metric":
        return cls(MetricKind.EUCLIDEAN)

    @classmethod
    def diag(cls, weights) -> "Metric":
        return cls(MetricKind.DIAG_WEIGHTED, weights)

    @property
    def is_euclidean(self) -> bool:
        return self.kind is MetricKind.EUCLIDEAN

    def inner(self, x, y) -> float:
        if self.is_euclidean:
            return float(x @ y)
        return float(x @ (self.weights * y))

    def norm(self, x) -> float:
        return float(np.sqrt(max(self.inner(x, x), 0.0)))

    def weight_vector(self, n: int) -> np.ndarray:
        return np.ones(n) if self.is_euclidean else self.weights

    def riesz(self, g):
        """Gradient in this metric from a Euclidean gradient ``g``."""
        return g if self.is_euclidean else g / self.weights


def make_inpainting(shape: Shape, sampled_indices: Sequence[int]) -> LinearMap:
    """Sampling operator keeping the pixels listed in ``sampled_indices``.

    Measurements are ordered by ascending pixel index.
    """
    n = shape[0] * shape[1]
    idx = np.asarray(sampled_indices, dtype=np.int64).ravel()
    if idx.size == 0:
        raise ValidationError("inpainting needs at least one sampled pixel (otherwise Ae = 0)")
    if idx.min() < 0 or idx.max() >= n:
        raise ValidationError("sampled index out of bounds")
    if np.unique(idx).size != idx.size:
        raise ValidationError("sampled indices contain duplicates")
    idx = np.sort(idx)
    m = idx.size
    mask = np.zeros(n)
    mask[idx] = 1.0

    def fwd(x):
        return x[idx]

    def adj(y):
        out = np.zeros(n)
        out[idx] = y
        return out

    return LinearMap(n, m, fwd, adj, gram_diagonal=mask, name="inpaint")


def random_mask(shape: Shape, fraction: float, seed: int = 0) -> np.ndarray:
    """Seeded random subset of ``round(fraction * n)`` pixel indices."""
    if not 0.0 < fraction <= 1.0:
        raise ValidationError("mask fraction must lie in (0, 1]")
    n = shape[0] * shape[1]
    count = max(1, int(round(fraction * n)))
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=count, replace=False))


def _check_kernel(kernel2d) -> np.ndarray:
    k = np.asarray(kernel2d, dtype=float)
    if k.ndim != 2:
        raise ValidationError("blur kernel must be two-dimensional")
    if k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
        raise ValidationError(f"blur kernel must be odd-sized, got {k.shape}")
    if np.any(k < 0):
        raise ValidationError("blur kernel must be nonnegative")
    total = k.sum()
    if total <= 0:
        raise ValidationError("blur kernel is all zero")
    return k / total


def uniform_kernel(size: int) -> np.ndarray:
    return np.full((size, size), 1.0 / size**2)


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - size // 2
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * sigma**2))
    return g / g.sum()


def _transfer_function(shape: Shape, k: np.ndarray) -> np.ndarray:
    h, w = shape
    kh, kw = k.shape
    if kh > h or kw > w:
        raise ValidationError(f"kernel {k.shape} larger than image {shape}")
    padded = np.zeros(shape)
    padded[:kh, :kw] = k
    padded = np.roll(padded, (-(kh // 2), -(kw // 2)), axis=(0, 1))
    return np.fft.rfft2(padded)


def make_blur(shape: Shape, kernel2d) -> LinearMap:
    """Circular 2-D convolution with a normalized nonnegative kernel."""
    k = _check_kernel(kernel2d)
    H = _transfer_function(shape, k)
    Hc = np.conj(H)
    h, w = shape
    n = h * w

    def fwd(x):
        return np.fft.irfft2(np.fft.rfft2(x.reshape(shape)) * H, s=shape).ravel()

    def adj(y):
        return np.fft.irfft2(np.fft.rfft2(y.reshape(shape)) * Hc, s=shape).ravel()

    return LinearMap(n, n, fwd, adj, symmetric=bool(np.array_equal(k, k[::-1, ::-1])), name="blur")


def make_superres(shape: Shape, kernel2d, factor: int) -> LinearMap:
    """Blur followed by keeping every ``factor``-th row and column."""
    factor = int(factor)
    h, w = shape
    if factor < 1 or h % factor or w % factor:
        raise ValidationError(f"factor {factor} must divide the image shape {shape}")
    blur = make_blur(shape, kernel2d)
    if factor == 1:
        return blur
    low = (h // factor, w // factor)

    def decimate(x):
        return x.reshape(shape)[::factor, ::factor].ravel()

    def upsample(y):
        out = np.zeros(shape)
        out[::factor, ::factor] = y.reshape(low)
        return out.ravel()

    S = LinearMap(h * w, low[0] * low[1], decimate, upsample, name="decimate")
    return S @ blur


def loss_value(p: InverseProblem, x) -> float:
    r = p.A(x) - p.b
    return 0.5 * float(r @ r)


def loss_grad(p: InverseProblem, x, metric: Metric | None = None) -> np.ndarray:
    """Gradient of the quadratic loss in the given metric."""
    g = p.A.apply_adjoint(p.A(x) - p.b)
    if metric is None:
        return g
    if not metric.is_euclidean and metric.weights.size != g.size:
        raise ValidationError("metric weights do not match the image size")
    return metric.riesz(g)
