"""The convex regularizer implicit in a linear denoiser, and the PnP objective.

For symmetric ``W`` with spectrum in [0, 1]

    phi_W(x) = 1/2 x^T W^+ (I - W) x   if x in R(W),   +inf otherwise,

and ``W = prox(phi_W)``.  A kernel denoiser ``W = D^{-1} K`` uses
``phi(x) = phi_{W_s}(D^{1/2} x)`` and is the prox of that function in the
``D``-weighted inner product.  Values outside the range are ``math.inf``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .denoise import Denoiser, Variant
from .errors import BudgetError, ValidationError
from .forward import InverseProblem, Metric, loss_value
from .linops import CG_TOL, LinearMap, oracle_budget, pinv_apply

DEFAULT_RANGE_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class Regularizer:
    """``lam * phi`` for a denoiser; ``tol_range`` is the indicator tolerance."""

    denoiser: Denoiser
    lam: float
    tol_range: float = DEFAULT_RANGE_TOL

    def __post_init__(self):
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise ValidationError(f"lambda must be positive and finite, got {self.lam}")
        if not self.tol_range > 0:
            raise ValidationError("tol_range must be positive")

    def phi(self, x) -> float:
        return phi(self.denoiser, x, self.tol_range)

    def __call__(self, x) -> float:
        return self.lam * self.phi(x)


def _range_residual(W: LinearMap, x, tol: float):
    z = pinv_apply(W, x, tol=tol, range_tol=np.inf)
    return z, float(np.linalg.norm(W(z) - x))


def range_membership(W: LinearMap, x, tol: float = DEFAULT_RANGE_TOL) -> bool:
    """Whether ``||W W^+ x - x|| <= tol * max(||x||, 1)``."""
    x = np.asarray(x, dtype=float)
    _, res = _range_residual(W, x, tol)
    return res <= tol * max(float(np.linalg.norm(x)), 1.0)


def phi_symmetric(W: LinearMap, x, tol_range: float = DEFAULT_RANGE_TOL, cg_tol: float = CG_TOL) -> float:
    """``1/2 x^T W^+ (I - W) x`` on ``R(W)``, ``inf`` off it.

    Evaluated as ``1/2 <W^+ x, x - W x>``, which avoids the cancellation of
    ``x^T W^+ x - ||x||^2`` near fixed points.
    """
    x = np.asarray(x, dtype=float)
    z, res = _range_residual(W, x, min(cg_tol, tol_range))
    if res > tol_range * max(float(np.linalg.norm(x)), 1.0):
        return math.inf
    return 0.5 * float(z @ (x - W(x)))


def phi_kernel(d: Denoiser, x, tol_range: float = DEFAULT_RANGE_TOL) -> float:
    """``phi_{W_s}(D^{1/2} x)`` for a kernel denoiser."""
    if d.variant is not Variant.KERNEL:
        raise ValidationError("phi_kernel needs a kernel denoiser")
    return phi_symmetric(d.sym, d.sqrt_weights * np.asarray(x, dtype=float), tol_range)


def phi(d: Denoiser, x, tol_range: float = DEFAULT_RANGE_TOL) -> float:
    if d.variant is Variant.KERNEL:
        return phi_kernel(d, x, tol_range)
    return phi_symmetric(d.sym, x, tol_range)


def phi_at_denoised(d: Denoiser, y, wy: Optional[np.ndarray] = None) -> float:
    """``phi(W y)`` without a pseudoinverse.

    Since ``W^+ W`` fixes ``R(W)``, ``phi(W y) = 1/2 <y - W y, W y>`` in the
    denoiser's metric.  ``wy`` may pass a precomputed ``W y``.
    """
    y = np.asarray(y, dtype=float)
    wy = d.map(y) if wy is None else wy
    return 0.5 * d.metric.inner(y - wy, wy)


def objective(p: InverseProblem, r: Regularizer, x) -> float:
    """``loss(x) + lam * phi(x)``; ``inf`` outside the range of ``W``."""
    reg = r.phi(x)
    if math.isinf(reg):
        return math.inf
    return loss_value(p, x) + r.lam * reg


def objective_at_denoised(p: InverseProblem, r: Regularizer, y, wy: Optional[np.ndarray] = None) -> float:
    """Objective at ``x = W y`` via :func:`phi_at_denoised`."""
    wy = r.denoiser.map(y) if wy is None else wy
    return loss_value(p, wy) + r.lam * phi_at_denoised(r.denoiser, y, wy)


def symmetric_frame(W_dense: np.ndarray, metric: Metric) -> np.ndarray:
    """``D^{1/2} W D^{-1/2}`` (symmetrized against rounding), or ``W`` itself."""
    W_dense = np.asarray(W_dense, dtype=float)
    if metric.is_euclidean:
        Ws = W_dense
    else:
        s = np.sqrt(metric.weight_vector(W_dense.shape[0]))
        Ws = s[:, None] * W_dense / s[None, :]
    return 0.5 * (Ws + Ws.T)


def range_basis(Ws: np.ndarray, cutoff: float = 1e-10) -> np.ndarray:
    """Orthonormal basis of ``R(Ws)`` from eigenvalues above ``cutoff * lambda_max``."""
    w, V = sla.eigh(Ws)
    top = max(float(np.abs(w).max()), 1e-300)
    return V[:, w > cutoff * top]


def prox_oracle_dense(W_dense, x, metric: Metric = Metric.euclidean(), budget: Optional[int] = None) -> np.ndarray:
    """Dense evaluation of ``argmin_z phi(z) + 1/2 ||z - x||^2_metric``.

    ``z`` is parametrized as ``B c`` with ``B`` metric-orthonormal spanning
    ``R(W)``, and the strictly convex quadratic in ``c`` is solved directly.
    Under a diagonal metric ``phi`` is the kernel form ``phi_{W_s}(D^{1/2} .)``.
    """
    W_dense = np.asarray(W_dense, dtype=float)
    n = W_dense.shape[0]
    budget = oracle_budget() if budget is None else budget
    if n * n > budget:
        raise BudgetError(f"prox oracle needs {n * n} entries, budget is {budget}", n * n)
    x = np.asarray(x, dtype=float)
    s = np.sqrt(metric.weight_vector(n))
    Ws = symmetric_frame(W_dense, metric)
    U = range_basis(Ws)
    P = np.linalg.pinv(Ws, rcond=1e-10, hermitian=True) @ (np.eye(n) - Ws)
    H = U.T @ P @ U
    H = 0.5 * (H + H.T) + np.eye(U.shape[1])
    B = U / s[:, None]
    c = sla.solve(H, B.T @ (s**2 * x), assume_a="pos")
    return B @ c
