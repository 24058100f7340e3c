"""PnP-ISTA, PnP-FISTA, PnP-HQS and PnP-ADMM with a linear denoiser.

Every solver works in the denoiser's metric: Euclidean for symmetric
denoisers and ``<x, y>_D`` for a kernel denoiser, where the loss gradient
becomes ``D^{-1} A^T (Ax - b)`` and the quadratic prox terms are weighted by
``D``.  Nothing else changes between the plain and scaled forms.

Which objective a solver minimizes is fixed by its parameter: with
``W = prox(phi)``, ISTA/FISTA with step ``gamma`` minimize
``loss + phi / gamma`` and ADMM with penalty ``rho`` minimizes
``loss + rho * phi``.  The defaults therefore derive ``gamma`` and ``rho``
from the regularizer's ``lam``, and inconsistent explicit values are rejected.
HQS minimizes ``M(x) + phi(x) / gamma`` where ``M`` is the Moreau envelope of
``gamma * loss``; see :func:`hqs_matched_gamma`.
"""

from __future__ import annotations

import enum
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from .denoise import Denoiser
from .errors import CGError, PnPError, SolverError, ValidationError
from .forward import InverseProblem, Metric, loss_grad
from .images import psnr
from .linops import cg_solve, diagonal, power_method
from .regfunc import Regularizer, objective_at_denoised

log = logging.getLogger(__name__)


class Algorithm(enum.Enum):
    ISTA = "ista"
    FISTA = "fista"
    HQS = "hqs"
    ADMM = "admm"


@dataclass(frozen=True)
class SolverConfig:
    """Solver settings.

    ``gamma`` (ISTA/FISTA step, HQS prox weight) and ``rho`` (ADMM penalty)
    default to the values consistent with the regularizer weight.
    ``stop_tol`` bounds ``||x_{k+1} - x_k|| / max(||x_k||, ||x_{k+1}||)``.
    """

    algorithm: Algorithm = Algorithm.ISTA
    gamma: Optional[float] = None
    rho: Optional[float] = None
    max_iter: int = 5000
    stop_tol: float = 1e-9
    inner_tol: float = 1e-12
    trace_objective: bool = True
    objective_every: int = 1

    def __post_init__(self):
        if not isinstance(self.algorithm, Algorithm):
            try:
                object.__setattr__(self, "algorithm", Algorithm(str(self.algorithm).lower()))
            except ValueError:
                raise ValidationError(f"unknown algorithm {self.algorithm!r}") from None
        for name in ("gamma", "rho"):
            v = getattr(self, name)
            if v is not None and not (v > 0 and math.isfinite(v)):
                raise ValidationError(f"{name} must be positive, got {v}")
        if self.max_iter < 1:
            raise ValidationError("max_iter must be >= 1")
        if not self.stop_tol > 0 or not self.inner_tol > 0:
            raise ValidationError("tolerances must be positive")
        if self.objective_every < 1:
            raise ValidationError("objective_every must be >= 1")


@dataclass
class SolverTrace:
    algorithm: Algorithm
    parameter: float
    objective: List[float] = field(default_factory=list)
    displacement: List[float] = field(default_factory=list)
    psnr: Optional[List[float]] = None
    final_x: Optional[np.ndarray] = field(default=None, repr=False)
    converged: bool = False
    iterations_used: int = 0


def step_bound(p: InverseProblem, metric: Metric = Metric.euclidean(), seed: int = 0) -> float:
    """``1 / L`` with ``L`` the largest eigenvalue of ``D^{-1/2} A^T A D^{-1/2}``."""
    n = p.n
    w = metric.weight_vector(n)
    if w.size != n:
        raise ValidationError("metric weights do not match the image size")
    G = p.A.gram()
    if G.diagonal is not None:
        L = float(np.max(G.diagonal / w))
    else:
        s = diagonal(1.0 / np.sqrt(w))
        res = power_method(s @ G @ s if not metric.is_euclidean else G, tol=1e-8, seed=seed, strict=False)
        L = res.eigenvalue
    if L <= 0:
        raise ValidationError("A^T A vanishes; the loss has no curvature")
    return 1.0 / L


def hqs_matched_gamma(p: InverseProblem, metric: Metric, lam: float) -> Optional[float]:
    """HQS weight whose fixed point minimizes ``loss + lam * phi``, if one exists.

    When ``A^T A`` is a 0/1 diagonal projector and the metric is Euclidean,
    the Moreau envelope of ``gamma * loss`` equals ``loss / (1 + gamma)``, so
    ``gamma = 1 / (lam - 1)`` reproduces the target objective up to a
    constant factor.  No such value exists otherwise (or for ``lam <= 1``).
    """
    g = p.A.gram().diagonal
    unit = metric.is_euclidean or bool(np.all(metric.weight_vector(p.n) == 1.0))
    if not unit or g is None or lam <= 1.0:
        return None
    if not np.all((g == 0.0) | (g == 1.0)):
        return None
    return 1.0 / (lam - 1.0)


def resolve_parameter(p: InverseProblem, r: Regularizer, cfg: SolverConfig, metric: Metric) -> float:
    lam = r.lam
    alg = cfg.algorithm
    if alg in (Algorithm.ISTA, Algorithm.FISTA):
        gamma = 1.0 / lam if cfg.gamma is None else cfg.gamma
        if not math.isclose(gamma * lam, 1.0, rel_tol=1e-12):
            raise ValidationError(f"{alg.value}: step gamma={gamma} minimizes loss + phi/gamma, "
                                  f"inconsistent with lambda={lam}; use gamma = 1/lambda")
        bound = step_bound(p, metric)
        if gamma > bound * (1 + 1e-6):
            raise ValidationError(f"{alg.value}: step gamma={gamma} exceeds the step bound {bound:.6g}; "
                                  f"increase lambda to at least {1.0 / bound:.6g}")
        return gamma
    if alg is Algorithm.ADMM:
        rho = lam if cfg.rho is None else cfg.rho
        if not math.isclose(rho, lam, rel_tol=1e-12):
            raise ValidationError(f"admm: penalty rho={rho} minimizes loss + rho*phi, inconsistent with lambda={lam}")
        return rho
    if cfg.gamma is not None:
        return cfg.gamma
    matched = hqs_matched_gamma(p, metric, lam)
    if matched is None:
        log.warning("hqs: no step reproduces loss + %g*phi for this problem; using gamma = 1/lambda", lam)
        return 1.0 / lam
    return matched


def _quadratic_solver(p: InverseProblem, w: np.ndarray, c: float, tol: float):
    """Solver for ``(A^T A + c diag(w)) x = rhs``."""
    G = p.A.gram()
    if G.diagonal is not None:
        denom = G.diagonal + c * w

        def solve(rhs, x0, k):
            return rhs / denom
        return solve
    op = G + diagonal(c * w)

    def solve(rhs, x0, k):
        try:
            return cg_solve(op, rhs, tol=tol, x0=x0)
        except CGError as err:
            raise SolverError(f"inner CG failed at iteration {k}: {err}", k) from err
    return solve


class _Recorder:
    def __init__(self, p, r, cfg, param, metric, truth):
        self.p, self.r, self.cfg, self.metric = p, r, cfg, metric
        self.trace = SolverTrace(cfg.algorithm, param, psnr=[] if truth is not None else None)
        self.truth = truth

    def step(self, k, x_new, x_old, y=None):
        """Record iteration ``k``; ``y`` is the denoiser input giving ``x_new = W y``."""
        if not np.all(np.isfinite(x_new)):
            raise SolverError(f"{self.cfg.algorithm.value}: non-finite iterate at iteration {k}", k)
        t = self.trace
        disp = self.metric.norm(x_new - x_old)
        t.displacement.append(disp)
        if self.cfg.trace_objective and (k % self.cfg.objective_every == 0 or k == 1):
            t.objective.append(objective_at_denoised(self.p, self.r, y, x_new))
        elif self.cfg.trace_objective:
            t.objective.append(math.nan)
        if t.psnr is not None:
            t.psnr.append(psnr(x_new, self.truth))
        t.iterations_used = k
        scale = max(self.metric.norm(x_old), self.metric.norm(x_new))
        if disp == 0.0 or disp <= self.cfg.stop_tol * scale:
            t.converged = True
        return t.converged

    def finish(self, x):
        self.trace.final_x = x
        if not self.trace.converged:
            log.info("%s stopped at max_iter=%d without meeting stop_tol",
                     self.cfg.algorithm.value, self.cfg.max_iter)
        return self.trace


def _setup(p, d, r, cfg, x0, metric):
    if r.denoiser is not d:
        raise ValidationError("regularizer must wrap the same denoiser")
    metric = d.metric if metric is None else metric
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (p.n,):
        raise ValidationError(f"x0 must have length {p.n}")
    if d.n != p.n:
        raise ValidationError("denoiser and problem sizes differ")
    return metric, x0, resolve_parameter(p, r, cfg, metric)


def pnp_ista(p: InverseProblem, d: Denoiser, r: Regularizer, cfg: SolverConfig, x0,
             truth=None, metric: Optional[Metric] = None) -> SolverTrace:
    """``x_{k+1} = W(x_k - gamma * grad_metric loss(x_k))``."""
    cfg = replace(cfg, algorithm=Algorithm.ISTA)
    metric, x, gamma = _setup(p, d, r, cfg, x0, metric)
    rec = _Recorder(p, r, cfg, gamma, metric, truth)
    for k in range(1, cfg.max_iter + 1):
        y = x - gamma * loss_grad(p, x, metric)
        x_new = d.map(y)
        done = rec.step(k, x_new, x, y)
        x = x_new
        if done:
            break
    return rec.finish(x)


def pnp_fista(p: InverseProblem, d: Denoiser, r: Regularizer, cfg: SolverConfig, x0,
              truth=None, metric: Optional[Metric] = None) -> SolverTrace:
    """ISTA step taken from the extrapolated point ``y_k`` with the usual ``t_k`` momentum."""
    cfg = replace(cfg, algorithm=Algorithm.FISTA)
    metric, x, gamma = _setup(p, d, r, cfg, x0, metric)
    rec = _Recorder(p, r, cfg, gamma, metric, truth)
    y, t = x.copy(), 1.0
    for k in range(1, cfg.max_iter + 1):
        v = y - gamma * loss_grad(p, y, metric)
        x_new = d.map(v)
        done = rec.step(k, x_new, x, v)
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        y = x_new + ((t - 1.0) / t_new) * (x_new - x)
        x, t = x_new, t_new
        if done:
            break
    return rec.finish(x)


def pnp_hqs(p: InverseProblem, d: Denoiser, r: Regularizer, cfg: SolverConfig, x0,
            truth=None, metric: Optional[Metric] = None) -> SolverTrace:
    """``z_k = argmin loss(z) + ||z - x_k||^2_metric / (2 gamma)``, ``x_{k+1} = W z_k``."""
    cfg = replace(cfg, algorithm=Algorithm.HQS)
    metric, x, gamma = _setup(p, d, r, cfg, x0, metric)
    w = metric.weight_vector(p.n)
    solve = _quadratic_solver(p, w, 1.0 / gamma, cfg.inner_tol)
    atb = p.A.apply_adjoint(p.b)
    rec = _Recorder(p, r, cfg, gamma, metric, truth)
    z = x.copy()
    for k in range(1, cfg.max_iter + 1):
        z = solve(atb + w * x / gamma, z, k)
        x_new = d.map(z)
        done = rec.step(k, x_new, x, z)
        x = x_new
        if done:
            break
    return rec.finish(x)


def pnp_admm(p: InverseProblem, d: Denoiser, r: Regularizer, cfg: SolverConfig, x0,
             truth=None, metric: Optional[Metric] = None) -> SolverTrace:
    """Scaled-dual ADMM with the denoiser as the ``z``-update; traces ``z``."""
    cfg = replace(cfg, algorithm=Algorithm.ADMM)
    metric, z, rho = _setup(p, d, r, cfg, x0, metric)
    w = metric.weight_vector(p.n)
    solve = _quadratic_solver(p, w, rho, cfg.inner_tol)
    atb = p.A.apply_adjoint(p.b)
    rec = _Recorder(p, r, cfg, rho, metric, truth)
    u = np.zeros(p.n)
    x = z.copy()
    for k in range(1, cfg.max_iter + 1):
        x = solve(atb + rho * w * (z - u), x, k)
        v = x + u
        z_new = d.map(v)
        u = v - z_new
        done = rec.step(k, z_new, z, v)
        z = z_new
        if done:
            break
    return rec.finish(z)


SOLVERS = {
    Algorithm.ISTA: pnp_ista,
    Algorithm.FISTA: pnp_fista,
    Algorithm.HQS: pnp_hqs,
    Algorithm.ADMM: pnp_admm,
}


def run_solver(p, d, r, cfg: SolverConfig, x0, truth=None, metric=None) -> SolverTrace:
    return SOLVERS[cfg.algorithm](p, d, r, cfg, x0, truth=truth, metric=metric)


@dataclass
class MultiInitReport:
    max_pairwise_distance: float
    per_init: List[SolverTrace]
    certified: Optional[bool] = None
    condition: object = None


def multi_init_run(p: InverseProblem, d: Denoiser, r: Regularizer, cfg: SolverConfig,
                   inits: Sequence[np.ndarray], truth=None, check_condition: bool = True,
                   workers: Optional[int] = None) -> MultiInitReport:
    """Run one solver from several starting points and compare the limits.

    ``certified`` reports whether the strong-convexity condition holds (only
    for stochastic denoisers); without it distinct limits are possible.
    """
    if len(inits) < 2:
        raise ValidationError("multi_init_run needs at least two initializations")

    def run(i):
        try:
            return run_solver(p, d, r, cfg, inits[i], truth=truth)
        except PnPError as err:
            raise SolverError(f"initialization {i}: {err}", getattr(err, "iteration", None)) from err

    with ThreadPoolExecutor(max_workers=workers or min(len(inits), 4)) as pool:
        traces = list(pool.map(run, range(len(inits))))
    finals = [t.final_x for t in traces]
    dist = 0.0
    for i in range(len(finals)):
        for j in range(i + 1, len(finals)):
            dist = max(dist, float(np.abs(finals[i] - finals[j]).max()))
    certified, cond = None, None
    if check_condition and d.stochastic:
        from .certify import condition_check

        cond = condition_check(p, d, lam=r.lam)
        certified = cond.holds is True
    return MultiInitReport(dist, traces, certified, cond)
