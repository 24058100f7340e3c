"""NLM-style kernel weights and the linear denoisers built from them.

Three variants share one kernel matrix ``K``:

* ``KERNEL``: ``W = D^{-1} K`` (row-stochastic, not symmetric), a proximal
  map in the ``D``-weighted inner product;
* ``SIMILARITY_SYMMETRIC``: ``W_s = D^{-1/2} K D^{-1/2}``, similar to ``W``;
* ``DOUBLY_STOCHASTIC``: ``S K S`` with ``S`` from symmetric Sinkhorn scaling.

Every denoiser carries the symmetric operator its regularizer is defined
through (``sym``) and an estimate of that operator's smallest eigenvalue.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sps

from .errors import SinkhornError, ValidationError
from .forward import Metric
from .linops import LinearMap, power_method

log = logging.getLogger(__name__)

SPECTRUM_SLACK = 1e-8


class Variant(enum.Enum):
    KERNEL = "kernel"
    SIMILARITY_SYMMETRIC = "symmetric"
    DOUBLY_STOCHASTIC = "dsg"


@dataclass(frozen=True)
class KernelParams:
    """NLM weight recipe.

    ``eig_floor`` is the smallest eigenvalue the normalized kernel
    ``D^{-1/2} K D^{-1/2}`` is allowed to have; kernels below it are shifted
    towards the identity (see :func:`build_kernel`).  With ``eig_floor=0`` only
    genuinely indefinite kernels are repaired.
    """

    patch_radius: int = 1
    search_radius: int = 5
    h: float = 0.2
    eig_floor: float = 0.2

    def __post_init__(self):
        if self.patch_radius < 0:
            raise ValidationError("patch_radius must be >= 0")
        if self.search_radius < 1:
            raise ValidationError("search_radius must be >= 1")
        if not self.h > 0:
            raise ValidationError("bandwidth h must be positive (h = 0 gives a degenerate kernel)")
        if not 0.0 <= self.eig_floor < 1.0:
            raise ValidationError("eig_floor must lie in [0, 1)")


@dataclass(frozen=True, eq=False)
class KernelWeights:
    """Symmetric nonnegative kernel ``K`` with row sums ``D``.

    ``shift`` records the PSD repair applied (``K <- K + shift * diag(D)``,
    zero when none was needed) and ``lambda_min`` the estimated smallest
    eigenvalue of ``D^{-1/2} K D^{-1/2}`` after repair.
    """

    K: sps.csr_matrix = field(repr=False)
    D: np.ndarray = field(repr=False)
    shift: float = 0.0
    lambda_min: float = float("nan")

    @property
    def n(self) -> int:
        return self.D.size


@dataclass(frozen=True, eq=False)
class Denoiser:
    variant: Variant
    map: LinearMap
    metric: Metric
    sym: LinearMap
    lambda_min: float
    matrix: object = field(default=None, repr=False)
    weights: Optional[KernelWeights] = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.map.dim_in

    @property
    def stochastic(self) -> bool:
        return self.variant in (Variant.KERNEL, Variant.DOUBLY_STOCHASTIC)

    @property
    def sqrt_weights(self) -> np.ndarray:
        """Diagonal of ``D^{1/2}`` for the kernel variant, ones otherwise."""
        if self.variant is Variant.KERNEL:
            return np.sqrt(self.weights.D)
        return np.ones(self.n)

    def __call__(self, x):
        return self.map(x)


def _scaled_symmetric(K: sps.csr_matrix, s: np.ndarray) -> sps.csr_matrix:
    """``diag(s) K diag(s)`` with bitwise-exact symmetry."""
    coo = K.tocoo()
    data = coo.data * (s[coo.row] * s[coo.col])
    return sps.csr_matrix((data, (coo.row, coo.col)), shape=K.shape)


def _patch_matrix(guide: np.ndarray, radius: int) -> np.ndarray:
    H, W = guide.shape
    size = 2 * radius + 1
    padded = np.pad(guide, radius, mode="symmetric")
    cols = [padded[a:a + H, b:b + W] for a in range(size) for b in range(size)]
    return np.stack(cols, axis=-1).reshape(H * W, size * size)


def nlm_kernel_matrix(guide: np.ndarray, params: KernelParams) -> sps.csr_matrix:
    """Raw (unrepaired) NLM kernel: Gaussian of squared patch distances.

    Only half of the search offsets are evaluated; each weight is written at
    ``(i, j)`` and ``(j, i)`` so ``K`` is exactly symmetric.
    """
    H, W = guide.shape
    n = H * W
    P = _patch_matrix(guide, params.patch_radius)
    idx = np.arange(n).reshape(H, W)
    S = params.search_radius
    rows, cols, vals = [np.arange(n)], [np.arange(n)], [np.ones(n)]
    for dr in range(0, S + 1):
        for dc in range(-S, S + 1):
            if dr == 0 and dc <= 0:
                continue
            r1 = H - dr
            c0, c1 = max(0, -dc), min(W, W - dc)
            if r1 <= 0 or c1 <= c0:
                continue
            i = idx[:r1, c0:c1].ravel()
            j = idx[dr:dr + r1, c0 + dc:c1 + dc].ravel()
            diff = P[i] - P[j]
            w = np.exp(-np.einsum("ij,ij->i", diff, diff) / params.h**2)
            rows += [i, j]
            cols += [j, i]
            vals += [w, w]
    K = sps.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    K.sum_duplicates()
    return K


def _normalized(K: sps.csr_matrix, D: np.ndarray) -> LinearMap:
    Ws = _scaled_symmetric(K, 1.0 / np.sqrt(D))
    return LinearMap.from_matrix(Ws, symmetric=True, name="W_s")


def estimate_lambda_min(sym: LinearMap, seed: int = 0, max_iter: Optional[int] = None) -> float:
    """Smallest eigenvalue of a symmetric map with spectrum below 1.

    Power iteration on ``sym - I``; when the iteration does not reach its
    residual tolerance the Rayleigh quotient of the best iterate is used,
    which can only overestimate the true value.
    """
    max_iter = max(10 * sym.dim_in, 500) if max_iter is None else max_iter
    res = power_method(sym.shifted(1.0), tol=1e-8, max_iter=max_iter, seed=seed, strict=False)
    return 1.0 + res.eigenvalue


def kernel_weights(K, eig_floor: float = 0.0, seed: int = 0) -> KernelWeights:
    """Validate an explicit kernel matrix and apply the PSD repair if needed."""
    K = sps.csr_matrix(K, dtype=float)
    n = K.shape[0]
    if K.shape != (n, n):
        raise ValidationError("kernel matrix must be square")
    if (K != K.T).nnz:
        raise ValidationError("kernel matrix must be symmetric")
    if K.nnz and K.data.min() < 0:
        raise ValidationError("kernel matrix must be nonnegative")
    if np.any(K.diagonal() <= 0):
        raise ValidationError("kernel matrix needs a positive diagonal")
    D = np.asarray(K.sum(axis=1)).ravel()
    return _repair(K, D, eig_floor, seed)


def _repair(K, D, eig_floor, seed):
    shift = 0.0
    lam = estimate_lambda_min(_normalized(K, D), seed=seed)
    for _ in range(3):
        if eig_floor == 0.0:
            if lam >= -SPECTRUM_SLACK:
                break
            c = -lam
        else:
            if lam >= eig_floor * (1 - 1e-6):
                break
            c = (eig_floor - lam) / (1.0 - eig_floor)
        log.info("kernel PSD repair: lambda_min(W_s)=%.3e, shifting K by %.3e * diag(D)", lam, c)
        K = (K + c * sps.diags(D)).tocsr()
        D = D * (1.0 + c)
        shift = (1.0 + shift) * (1.0 + c) - 1.0
        lam = estimate_lambda_min(_normalized(K, D), seed=seed)
    return KernelWeights(K, D, shift, lam)


def build_kernel(guide, params: KernelParams = KernelParams(), seed: int = 0) -> KernelWeights:
    """NLM kernel weights from a guide image with values in [0, 1].

    ``K[i, j] = exp(-||P_i - P_j||^2 / h^2)`` for ``j`` in the search window
    of ``i``.  Window truncation can make ``K`` indefinite; when the
    normalized kernel has an eigenvalue below ``params.eig_floor`` the kernel
    is replaced by ``K + c diag(D)``, which maps the normalized spectrum
    affinely via ``s -> (s + c) / (1 + c)``.
    """
    g = np.asarray(guide, dtype=float)
    if g.ndim != 2:
        raise ValidationError("guide must be a 2-D image")
    if g.min() < -1e-12 or g.max() > 1 + 1e-12:
        raise ValidationError("guide values must lie in [0, 1]")
    K = nlm_kernel_matrix(g, params)
    D = np.asarray(K.sum(axis=1)).ravel()
    return _repair(K, D, params.eig_floor, seed)


def kernel_denoiser(kw: KernelWeights) -> Denoiser:
    """``W = D^{-1} K``, self-adjoint in the ``D``-weighted inner product."""
    K, D = kw.K, kw.D

    def fwd(x):
        return (K @ x) / D

    def adj(y):
        return K @ (y / D)

    W = LinearMap(kw.n, kw.n, fwd, adj, name="W")
    return Denoiser(Variant.KERNEL, W, Metric.diag(D), _normalized(K, D), kw.lambda_min,
                    matrix=sps.diags(1.0 / D) @ K, weights=kw)


def symmetrize_similarity(kw: KernelWeights) -> Denoiser:
    Ws = _scaled_symmetric(kw.K, 1.0 / np.sqrt(kw.D))
    op = LinearMap.from_matrix(Ws, symmetric=True, name="W_s")
    return Denoiser(Variant.SIMILARITY_SYMMETRIC, op, Metric.euclidean(), op, kw.lambda_min,
                    matrix=Ws, weights=kw)


def dsg_sinkhorn(kw: KernelWeights, tol: float = 1e-10, max_sweeps: int = 2000, seed: int = 0) -> Denoiser:
    """Doubly stochastic symmetric denoiser ``S K S`` by symmetric Sinkhorn.

    Each sweep replaces ``s`` by ``sqrt(s / (K s))``; iteration stops when
    every row sum of ``S K S`` is within ``tol`` of one.
    """
    K = kw.K
    s = 1.0 / np.sqrt(kw.D)
    dev = np.inf
    for _ in range(max_sweeps):
        rs = s * (K @ s)
        dev = np.abs(rs - 1.0).max()
        if dev <= tol:
            break
        s = np.sqrt(s / (K @ s))
    else:
        raise SinkhornError(f"Sinkhorn did not converge in {max_sweeps} sweeps (deviation {dev:.3e})", dev)
    W = _scaled_symmetric(K, s)
    op = LinearMap.from_matrix(W, symmetric=True, name="W_dsg")
    return Denoiser(Variant.DOUBLY_STOCHASTIC, op, Metric.euclidean(), op,
                    estimate_lambda_min(op, seed=seed), matrix=W, weights=kw)


def symmetric_denoiser(W, variant: Variant = Variant.SIMILARITY_SYMMETRIC, seed: int = 0) -> Denoiser:
    """Wrap an explicit symmetric matrix (or symmetric map) as a denoiser.

    Used for hand-built operators such as ``I / 2`` or random spectra.
    """
    if variant is Variant.KERNEL:
        raise ValidationError("use kernel_denoiser for the kernel variant")
    if isinstance(W, LinearMap):
        if not W.symmetric:
            raise ValidationError("denoiser map must be symmetric")
        op, matrix = W, None
    else:
        matrix = W if sps.issparse(W) else np.asarray(W, dtype=float)
        dense = matrix.toarray() if sps.issparse(matrix) else matrix
        if not np.allclose(dense, dense.T, rtol=0, atol=1e-12):
            raise ValidationError("denoiser matrix must be symmetric")
        op = LinearMap.from_matrix(matrix, symmetric=True, name="W")
    return Denoiser(variant, op, Metric.euclidean(), op, estimate_lambda_min(op, seed=seed), matrix=matrix)


@dataclass
class SpectrumReport:
    lower: float
    upper: float
    norm_bound: Optional[float]
    ok: bool


def spectrum_check(d: Denoiser, slack: float = SPECTRUM_SLACK, seed: int = 0,
                   max_iter: Optional[int] = None) -> SpectrumReport:
    """Estimate the spectrum of ``d.sym`` by power iteration on it and on ``I - sym``.

    For stochastic variants ``norm_bound`` is the induced infinity-norm of
    ``W`` (one, up to Sinkhorn tolerance), a rigorous upper bound on the
    spectral radius.
    """
    n = d.n
    max_iter = max(10 * n, 500) if max_iter is None else max_iter
    top = power_method(d.sym, tol=1e-8, max_iter=max_iter, seed=seed, strict=False)
    bottom = power_method(-d.sym.shifted(1.0), tol=1e-8, max_iter=max_iter, seed=seed + 1, strict=False)
    lower = 1.0 - bottom.eigenvalue
    upper = top.eigenvalue
    norm_bound = None
    if d.matrix is not None:
        M = d.matrix
        norm_bound = float(abs(M).sum(axis=1).max()) if sps.issparse(M) else float(np.abs(M).sum(axis=1).max())
    hi = upper if norm_bound is None or not d.stochastic else max(upper, norm_bound)
    ok = lower >= -slack and hi <= 1.0 + slack
    return SpectrumReport(lower, upper, norm_bound, ok)


@dataclass
class FixReport:
    e_fixed: bool
    second_eigenvalue: float
    residual: float
    conclusive: bool


def fix_check(d: Denoiser, tol: float = 1e-8, seed: int = 0, max_iter: Optional[int] = None) -> FixReport:
    """Check ``fix(W) = span{e}`` for a stochastic denoiser.

    ``We = e`` is tested directly; the largest eigenvalue of the symmetric
    form on the orthogonal complement of its Perron vector is estimated by
    deflated power iteration.  The result is conclusive when that
    eigenvalue, plus its residual, stays below ``1 - tol``.
    """
    if not d.stochastic:
        raise ValidationError("fix_check needs a stochastic (kernel or doubly stochastic) denoiser")
    n = d.n
    e = np.ones(n)
    e_fixed = bool(np.abs(d.map(e) - e).max() <= max(tol, 1e-8))
    u = d.sqrt_weights
    u = u / np.linalg.norm(u)

    def project(v):
        return v - u * (u @ v)

    max_iter = max(20 * n, 1000) if max_iter is None else max_iter
    res = power_method(d.sym, tol=1e-6, max_iter=max_iter, seed=seed, project=project, strict=False)
    conclusive = res.eigenvalue + res.residual < 1.0 - tol
    if not conclusive:
        log.info("fix_check inconclusive: second eigenvalue %.6f (residual %.1e)", res.eigenvalue, res.residual)
    return FixReport(e_fixed, res.eigenvalue, res.residual, conclusive)
