"""Matrix-free linear maps and the spectral / linear-solve primitives.

Everything downstream (forward models, denoisers, the ``Q`` operator) is a
:class:`LinearMap`.  The routines here only ever touch an operator through
``forward`` and ``adjoint``; dense matrices appear only in
:func:`materialize_dense`, which exists as a test oracle.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sps

from .errors import BudgetError, CGError, PowerMethodError, RangeError, SpectrumError, ValidationError

Vector = np.ndarray

DEFAULT_ORACLE_BUDGET = 10**6
ORACLE_BUDGET_ENV = "PNP_ORACLE_BUDGET"

POWER_TOL = 1e-8
CG_TOL = 1e-10


def oracle_budget() -> int:
    """Maximum number of dense entries an oracle may allocate."""
    value = os.environ.get(ORACLE_BUDGET_ENV)
    return int(value) if value else DEFAULT_ORACLE_BUDGET


@dataclass(frozen=True, eq=False)
class LinearMap:
    """A linear operator ``R^dim_in -> R^dim_out`` given by two callables.

    ``symmetric`` is a hint that ``forward == adjoint``; it is checked for
    shape consistency only.  ``diagonal`` optionally carries the exact
    diagonal of a diagonal operator and ``gram_diagonal`` that of ``A^T A``
    when it is diagonal, so solvers can invert those directly.
    """

    dim_in: int
    dim_out: int
    forward: Callable[[Vector], Vector] = field(repr=False)
    adjoint: Callable[[Vector], Vector] = field(repr=False)
    symmetric: bool = False
    diagonal: Optional[Vector] = field(default=None, repr=False)
    gram_diagonal: Optional[Vector] = field(default=None, repr=False)
    name: str = ""

    def __post_init__(self):
        if self.dim_in <= 0 or self.dim_out <= 0:
            raise ValidationError(f"dimensions must be positive, got {self.dim_out}x{self.dim_in}")
        if self.symmetric and self.dim_in != self.dim_out:
            raise ValidationError("a symmetric map must be square")

    @property
    def shape(self):
        return (self.dim_out, self.dim_in)

    def __call__(self, x: Vector) -> Vector:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim_in,):
            raise ValidationError(f"{self.name or 'map'}: expected input of length {self.dim_in}, got {x.shape}")
        return self.forward(x)

    def apply_adjoint(self, y: Vector) -> Vector:
        y = np.asarray(y, dtype=float)
        if y.shape != (self.dim_out,):
            raise ValidationError(f"{self.name or 'map'}: expected adjoint input of length {self.dim_out}, got {y.shape}")
        return self.adjoint(y)

    @property
    def T(self) -> "LinearMap":
        if self.symmetric:
            return self
        return LinearMap(self.dim_out, self.dim_in, self.adjoint, self.forward,
                         diagonal=self.diagonal, name=f"{self.name}^T" if self.name else "")

    def __matmul__(self, other: "LinearMap") -> "LinearMap":
        if not isinstance(other, LinearMap):
            return NotImplemented
        if self.dim_in != other.dim_out:
            raise ValidationError(f"cannot compose {self.shape} with {other.shape}")
        f, g = self, other
        diag = None
        if f.diagonal is not None and g.diagonal is not None:
            diag = f.diagonal * g.diagonal
        return LinearMap(g.dim_in, f.dim_out,
                         lambda x: f.forward(g.forward(x)),
                         lambda y: g.adjoint(f.adjoint(y)),
                         diagonal=diag)

    def __add__(self, other: "LinearMap") -> "LinearMap":
        if not isinstance(other, LinearMap):
            return NotImplemented
        if self.shape != other.shape:
            raise ValidationError(f"cannot add {self.shape} and {other.shape}")
        f, g = self, other
        diag = None
        if f.diagonal is not None and g.diagonal is not None:
            diag = f.diagonal + g.diagonal
        return LinearMap(self.dim_in, self.dim_out,
                         lambda x: f.forward(x) + g.forward(x),
                         lambda y: f.adjoint(y) + g.adjoint(y),
                         symmetric=f.symmetric and g.symmetric, diagonal=diag)

    def __rmul__(self, alpha: float) -> "LinearMap":
        alpha = float(alpha)
        f = self
        diag = None if f.diagonal is None else alpha * f.diagonal
        return LinearMap(self.dim_in, self.dim_out,
                         lambda x: alpha * f.forward(x),
                         lambda y: alpha * f.adjoint(y),
                         symmetric=f.symmetric, diagonal=diag)

    def __neg__(self) -> "LinearMap":
        return (-1.0) * self

    def __sub__(self, other: "LinearMap") -> "LinearMap":
        return self + (-other)

    def gram(self) -> "LinearMap":
        """The symmetric PSD map ``A^T A``."""
        f = self

        def apply(x):
            return f.adjoint(f.forward(x))

        diag = f.gram_diagonal
        if diag is None and f.diagonal is not None:
            diag = f.diagonal**2
        return LinearMap(self.dim_in, self.dim_in, apply, apply, symmetric=True, diagonal=diag)

    def shifted(self, sigma: float) -> "LinearMap":
        """``self - sigma * I`` for a square map."""
        if self.dim_in != self.dim_out:
            raise ValidationError("shift requires a square map")
        return self - sigma * identity(self.dim_in)

    @classmethod
    def from_matrix(cls, M, symmetric: Optional[bool] = None, name: str = "") -> "LinearMap":
        """Wrap a dense array or scipy sparse matrix."""
        if sps.issparse(M):
            M = sps.csr_matrix(M, dtype=float)
            Mt = M.T.tocsr()
        else:
            M = np.asarray(M, dtype=float)
            if M.ndim != 2:
                raise ValidationError("matrix must be two-dimensional")
            Mt = M.T
        if symmetric is None:
            symmetric = False
        return cls(M.shape[1], M.shape[0], lambda x: M @ x, lambda y: Mt @ y,
                   symmetric=symmetric, name=name)


def identity(n: int) -> LinearMap:
    f = lambda x: x.copy()  # noqa: E731
    return LinearMap(n, n, f, f, symmetric=True, diagonal=np.ones(n), name="I")


def diagonal(w: Vector) -> LinearMap:
    w = np.asarray(w, dtype=float).copy()
    f = lambda x: w * x  # noqa: E731
    return LinearMap(w.size, w.size, f, f, symmetric=True, diagonal=w, name="diag")


def zero_map(m: int, n: int) -> LinearMap:
    return LinearMap(n, m, lambda x: np.zeros(m), lambda y: np.zeros(n), symmetric=(m == n),
                     diagonal=np.zeros(n) if m == n else None, name="0")


def adjoint_error(op: LinearMap, probes: int = 20, seed: int = 0) -> float:
    """Largest relative mismatch of ``<Ax, y>`` against ``<x, A^T y>``."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(probes):
        x = rng.standard_normal(op.dim_in)
        y = rng.standard_normal(op.dim_out)
        Ax = op(x)
        Aty = op.apply_adjoint(y)
        lhs, rhs = Ax @ y, x @ Aty
        scale = max(np.linalg.norm(Ax) * np.linalg.norm(y), np.linalg.norm(x) * np.linalg.norm(Aty), 1e-300)
        worst = max(worst, abs(lhs - rhs) / scale)
    return worst


def symmetry_error(op: LinearMap, probes: int = 20, seed: int = 0) -> float:
    """Largest relative mismatch between ``forward`` and ``adjoint``."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(probes):
        x = rng.standard_normal(op.dim_in)
        a, b = op(x), op.apply_adjoint(x)
        worst = max(worst, np.linalg.norm(a - b) / max(np.linalg.norm(a), 1e-300))
    return worst


@dataclass
class SpectralResult:
    eigenvalue: float
    eigenvector: Vector = field(repr=False)
    iterations: int
    residual: float
    converged: bool = True


def power_method(op: LinearMap, tol: float = POWER_TOL, max_iter: Optional[int] = None, seed: int = 0,
                 project: Optional[Callable[[Vector], Vector]] = None, strict: bool = True) -> SpectralResult:
    """Dominant eigenpair of a symmetric map by power iteration.

    Stops when the eigenpair residual ``||Av - theta v||`` drops below
    ``tol * |theta|``; the signed eigenvalue is the Rayleigh quotient of the
    final unit vector.  ``project`` restricts the iteration to a subspace
    (used for deflation).

    With ``strict=False`` a non-converged run returns its best iterate with
    ``converged=False`` instead of raising.
    """
    if op.dim_in != op.dim_out:
        raise ValidationError("power_method needs a square operator")
    if tol <= 0:
        raise ValidationError("tol must be positive")
    n = op.dim_in
    max_iter = max(10 * n, 100) if max_iter is None else max_iter
    rng = np.random.default_rng(seed)

    v = None
    for _attempt in range(4):
        cand = rng.standard_normal(n)
        if project is not None:
            cand = project(cand)
        nrm = np.linalg.norm(cand)
        if nrm > 1e-12 * np.sqrt(n):
            v = cand / nrm
            break
    if v is None:
        raise PowerMethodError("start vector vanished after projection (3 retries)")

    best = None
    for k in range(1, max_iter + 1):
        w = op(v)
        if project is not None:
            w = project(w)
        theta = float(v @ w)
        r = float(np.linalg.norm(w - theta * v))
        if not np.isfinite(r):
            raise PowerMethodError(f"non-finite iterate at step {k}", best)
        if best is None or r / max(abs(theta), 1e-300) < best.residual / max(abs(best.eigenvalue), 1e-300):
            best = SpectralResult(theta, v, k, r, converged=False)
        if r <= tol * abs(theta) or r == 0.0:
            return SpectralResult(theta, v, k, r)
        nw = np.linalg.norm(w)
        v = w / nw
    if strict:
        raise PowerMethodError(f"power method did not converge in {max_iter} iterations "
                               f"(relative residual {best.residual / max(abs(best.eigenvalue), 1e-300):.3e})", best)
    return best


def shifted_power_pair(op: LinearMap, tol: float = POWER_TOL, max_iter: Optional[int] = None,
                       seed: int = 0, strict: bool = True):
    """The two power-method passes behind ``lambda_min``.

    Returns ``(dominant, shifted)`` where ``shifted`` is the dominant
    eigenpair of ``op - d(op) I``.
    """
    dom = power_method(op, tol, max_iter, seed, strict=strict)
    shifted = power_method(op.shifted(dom.eigenvalue), tol, max_iter, seed + 1, strict=strict)
    return dom, shifted


def lambda_min_shifted(op: LinearMap, tol: float = POWER_TOL, max_iter: Optional[int] = None, seed: int = 0) -> float:
    """Smallest eigenvalue of a symmetric PSD map as ``d(op_s) + d(op)``."""
    dom, shifted = shifted_power_pair(op, tol, max_iter, seed)
    lam = shifted.eigenvalue + dom.eigenvalue
    if lam < -tol * abs(dom.eigenvalue):
        raise SpectrumError(f"lambda_min = {lam:.3e} is negative: operator is not PSD")
    return lam


def cg_solve(op: LinearMap, b: Vector, tol: float = CG_TOL, max_iter: Optional[int] = None,
             x0: Optional[Vector] = None, atol: float = 0.0) -> Vector:
    """Conjugate gradients for a symmetric PSD system ``op(x) = b``.

    Started from zero, all iterates lie in the Krylov space of ``b``; for a
    singular operator and ``b`` in its range this yields the minimum-norm
    solution.  Raises :class:`CGError` (carrying the best iterate) on
    stagnation or when ``max_iter`` is exhausted.
    """
    b = np.asarray(b, dtype=float)
    n = b.size
    max_iter = max(10 * n, 50) if max_iter is None else max_iter
    bnorm = np.linalg.norm(b)
    threshold = max(tol * bnorm, atol)

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - op(x) if x0 is not None else b.copy()
    rr = r @ r
    res = [np.sqrt(rr)]
    if res[0] <= threshold:
        return x
    p = r.copy()
    best_x, best_res = x.copy(), res[0]
    window = max(50, min(n, 500))
    last_improve = 0
    for k in range(1, max_iter + 1):
        Ap = op(p)
        pAp = p @ Ap
        if not np.isfinite(pAp) or pAp <= 0.0:
            break
        alpha = rr / pAp
        x = x + alpha * p
        if k % 50 == 0:
            r = b - op(x)
        else:
            r = r - alpha * Ap
        rr_new = r @ r
        rn = np.sqrt(rr_new)
        res.append(rn)
        if rn < 0.9 * best_res:
            last_improve = k
        if rn < best_res:
            best_x, best_res = x.copy(), rn
        if rn <= threshold:
            true_r = np.linalg.norm(b - op(x))
            if true_r <= threshold:
                return x
            r = b - op(x)
            rr_new = r @ r
        if k - last_improve > window:
            break
        p = r + (rr_new / rr) * p
        rr = rr_new
    raise CGError(f"CG stopped after {len(res) - 1} iterations with residual "
                  f"{best_res:.3e} (target {threshold:.3e})", best_x, np.array(res))


def pinv_apply(W: LinearMap, x: Vector, tol: float = CG_TOL, range_tol: Optional[float] = None,
               max_iter: Optional[int] = None) -> Vector:
    """Apply the pseudoinverse of a symmetric PSD map to ``x`` in its range.

    ``W^+ x`` is computed by CG on ``W z = x`` from a zero start, so the
    iterates never leave ``R(W)``.  ``range_tol`` (default ``tol``) is the
    relative residual above which ``x`` is declared outside the range.
    """
    x = np.asarray(x, dtype=float)
    range_tol = tol if range_tol is None else max(range_tol, tol)
    xnorm = np.linalg.norm(x)
    if xnorm == 0.0:
        return np.zeros_like(x)
    try:
        z = cg_solve(W, x, tol=tol, max_iter=max_iter)
    except CGError as err:
        z = err.x
    resid = np.linalg.norm(W(z) - x)
    if resid > range_tol * xnorm:
        raise RangeError(f"vector lies outside the range: residual {resid:.3e} "
                         f"(relative {resid / xnorm:.3e})", resid)
    return z


def materialize_dense(op: LinearMap, budget: Optional[int] = None) -> np.ndarray:
    """Dense matrix of ``op`` built column by column from basis vectors."""
    budget = oracle_budget() if budget is None else budget
    need = op.dim_in * op.dim_out
    if need > budget:
        raise BudgetError(f"dense materialization needs {need} entries, budget is {budget}", need)
    M = np.empty((op.dim_out, op.dim_in))
    e = np.zeros(op.dim_in)
    for j in range(op.dim_in):
        e[j] = 1.0
        M[:, j] = op(e)
        e[j] = 0.0
    return M
