"""Strong-convexity certificates for the PnP objective.

The objective ``loss + lam * phi_W`` is strongly convex on ``R(W)`` with index
``mu = min { v^T Q v : v in R(W), ||v|| = 1 }`` where
``Q = A^T A + lam * W^+ (I - W)``.  Because the minimum over all unit vectors
can only be smaller, ``lambda_min(Q)`` is a lower bound on ``mu``; it is
computed matrix-free by two power iterations (on ``Q`` and on ``Q - d(Q) I``).

Kernel denoisers are handled in the conjugated frame ``x -> D^{1/2} x``, where
``Q`` becomes ``D^{-1/2} A^T A D^{-1/2} + lam * W_s^+ (I - W_s)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as sla

from .denoise import Denoiser, FixReport, Variant, fix_check
from .errors import BudgetError, ValidationError
from .forward import InverseProblem
from .linops import CG_TOL, POWER_TOL, LinearMap, cg_solve, diagonal, materialize_dense, oracle_budget, \
    pinv_apply, shifted_power_pair
from .regfunc import Regularizer, objective, range_basis

log = logging.getLogger(__name__)

FULL_RANK_THRESHOLD = 1e-4
MU_ORACLE_THRESHOLD = 1e-10


@dataclass(frozen=True, eq=False)
class QOperator:
    """``Q`` (or its conjugated form for kernel denoisers) as a symmetric map."""

    op: LinearMap
    lam: float
    kernel_frame: bool
    full_rank: bool

    @property
    def n(self) -> int:
        return self.op.dim_in

    def __call__(self, v):
        return self.op(v)


def regularizer_hessian(d: Denoiser, tol: float = CG_TOL) -> LinearMap:
    """``W_s^+ (I - W_s)`` applied matrix-free (``W_s = W`` for symmetric denoisers).

    When the denoiser is certified nonsingular this is ``W^{-1} v - v`` (one
    CG solve).  Otherwise ``v`` is first projected onto the range as
    ``P v = W^+ (W v)`` and ``W^+ (I - W) v = W^+ P v - P v``.
    """
    W = d.sym
    n = W.dim_in
    if d.lambda_min > FULL_RANK_THRESHOLD:
        def apply(v):
            return cg_solve(W, v, tol=tol) - v
    else:
        def apply(v):
            pv = pinv_apply(W, W(v), tol=tol, range_tol=1e-6)
            return pinv_apply(W, pv, tol=tol, range_tol=1e-6) - pv
    return LinearMap(n, n, apply, apply, symmetric=True, name="W+(I-W)")


def build_Q(p: InverseProblem, d: Denoiser, lam: float, tol: float = CG_TOL) -> QOperator:
    if not lam > 0:
        raise ValidationError("lambda must be positive")
    if d.n != p.n:
        raise ValidationError("denoiser and problem sizes differ")
    if d.lambda_min < -1e-8:
        raise ValidationError(f"denoiser spectrum is not certified: lambda_min = {d.lambda_min:.3e}")
    G = p.A.gram()
    kernel = d.variant is Variant.KERNEL
    if kernel:
        s = diagonal(1.0 / d.sqrt_weights)
        G = s @ G @ s
    op = G + lam * regularizer_hessian(d, tol)
    op = LinearMap(p.n, p.n, op.forward, op.forward, symmetric=True, name="Q")
    return QOperator(op, lam, kernel, d.lambda_min > FULL_RANK_THRESHOLD)


@dataclass
class ConditionReport:
    """``holds`` is True, False, or None when the check is indeterminate."""

    holds: Optional[bool]
    status: str
    witness: Optional[np.ndarray] = field(default=None, repr=False)
    Ae_norm: float = math.nan
    fix: Optional[FixReport] = None
    mu_exact: Optional[float] = None


@dataclass
class CertReport:
    mu_lower_bound: float
    d_Q: float
    d_Qs: float
    power_iters: Tuple[int, int]
    certified: bool
    condition_check: Optional[ConditionReport] = None


def mu_lower_bound(q: QOperator, tol: float = POWER_TOL, max_iter: Optional[int] = None, seed: int = 0) -> CertReport:
    """``lambda_min(Q) = d(Q_s) + d(Q)`` from two power-method passes."""
    max_iter = max(50 * q.n, 20_000) if max_iter is None else max_iter
    dom, sh = shifted_power_pair(q.op, tol, max_iter, seed, strict=True)
    mu = sh.eigenvalue + dom.eigenvalue
    if mu < -10 * tol * abs(dom.eigenvalue):
        log.warning("Q has a negative eigenvalue %.3e: denoiser spectrum assumption violated", mu)
    certified = mu > 10 * tol * dom.eigenvalue
    return CertReport(mu, dom.eigenvalue, sh.eigenvalue, (dom.iterations, sh.iterations), certified)


def dense_Q(p: InverseProblem, d: Denoiser, lam: float, budget: Optional[int] = None):
    """Dense ``Q`` in the certification frame and the symmetric denoiser matrix."""
    budget = oracle_budget() if budget is None else budget
    n, m = p.n, p.A.dim_out
    if max(n * n, m * n) > budget:
        raise BudgetError(f"dense Q needs {max(n * n, m * n)} entries, budget is {budget}", max(n * n, m * n))
    A = materialize_dense(p.A, budget)
    if d.variant is Variant.KERNEL:
        A = A / d.sqrt_weights[None, :]
    Ws = materialize_dense(d.sym, budget)
    Ws = 0.5 * (Ws + Ws.T)
    P = np.linalg.pinv(Ws, rcond=1e-10, hermitian=True) @ (np.eye(n) - Ws)
    Q = A.T @ A + lam * P
    return 0.5 * (Q + Q.T), Ws


def mu_exact_dense(p: InverseProblem, d: Denoiser, lam: float, budget: Optional[int] = None) -> float:
    """``lambda_min(B^T Q B)`` with ``B`` an orthonormal basis of ``R(W_s)``."""
    Q, Ws = dense_Q(p, d, lam, budget)
    B = range_basis(Ws)
    return float(sla.eigvalsh(B.T @ Q @ B)[0])


def condition_check(p: InverseProblem, d: Denoiser, tol: float = 1e-8, lam: float = 1.0,
                    budget: Optional[int] = None) -> ConditionReport:
    """Test ``N(A) & fix(W) = {0}`` for a stochastic denoiser.

    With ``fix(W) = span{e}`` established by :func:`fix_check` the condition
    reduces to ``A e != 0``.  If ``A e`` vanishes, ``e`` is returned as a
    witness.  An inconclusive fixed-space check falls back to the dense
    ``mu`` oracle when it fits the budget, and is reported as indeterminate
    otherwise.
    """
    if not d.stochastic:
        raise ValidationError("condition_check needs a kernel or doubly stochastic denoiser")
    e = np.ones(p.n)
    ae = float(np.linalg.norm(p.A(e)))
    fix = fix_check(d, tol)
    if fix.e_fixed and ae <= tol:
        return ConditionReport(False, "fails", e, ae, fix)
    if fix.e_fixed and fix.conclusive:
        return ConditionReport(True, "holds", None, ae, fix)
    try:
        mu = mu_exact_dense(p, d, lam, budget)
    except BudgetError:
        log.info("condition_check indeterminate: fixed space unresolved and dense oracle over budget")
        return ConditionReport(None, "indeterminate", None, ae, fix)
    ok = mu > MU_ORACLE_THRESHOLD
    return ConditionReport(ok, "holds" if ok else "fails", None, ae, fix, mu)


def certify(p: InverseProblem, d: Denoiser, lam: float, tol: float = POWER_TOL, seed: int = 0,
            max_iter: Optional[int] = None, check_condition: bool = True) -> CertReport:
    """Build ``Q``, bound ``mu`` from below and attach the condition check."""
    rep = mu_lower_bound(build_Q(p, d, lam), tol, max_iter, seed)
    if check_condition and d.stochastic:
        rep.condition_check = condition_check(p, d, lam=lam)
    return rep


def random_range_direction(d: Denoiser, seed: int = 0) -> np.ndarray:
    """Unit vector ``W u / ||W u||`` for seeded standard normal ``u``."""
    u = np.random.default_rng(seed).standard_normal(d.n)
    v = d.map(u)
    return v / np.linalg.norm(v)


def section_samples(p: InverseProblem, r: Regularizer, v0, mu: float,
                    t_grid: Optional[Sequence[float]] = None) -> List[Tuple[float, float]]:
    """``g(t) = f(t v0) - mu/2 ||t v0||^2`` (denoiser metric) over ``t_grid``."""
    t_grid = np.linspace(-2.0, 2.0, 41) if t_grid is None else t_grid
    v0 = np.asarray(v0, dtype=float)
    metric = r.denoiser.metric
    out = []
    for t in t_grid:
        x = float(t) * v0
        f = objective(p, r, x)
        if math.isinf(f):
            raise ValidationError(f"objective is +inf at t={t}: v0 is not in the range of W "
                                  f"to tolerance {r.tol_range}")
        out.append((float(t), f - 0.5 * mu * metric.norm(x) ** 2))
    return out


def quadratic_fit(samples: Sequence[Tuple[float, float]]):
    """Least-squares quadratic through the samples.

    Returns ``(coefficients, relative_residual)`` with coefficients from the
    leading term down.
    """
    t = np.array([s[0] for s in samples])
    g = np.array([s[1] for s in samples])
    coef = np.polyfit(t, g, 2)
    resid = np.linalg.norm(np.polyval(coef, t) - g) / max(np.linalg.norm(g), 1e-300)
    return coef, float(resid)
