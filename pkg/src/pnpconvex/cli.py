"""``pnp run <config>``: synthesize data, build a denoiser, reconstruct or certify.

The config is an INI file; every key has a default, so a file with only an
``[experiment]`` section is valid.  See the README for the full key list.

Exit status is 0 on success, 1 for invalid input (no artifacts are written)
and 2 for a numerical failure.  Error messages name the failing
``module.operation``.
"""

from __future__ import annotations

import argparse
import configparser
import contextlib
import logging
import math
import os
import sys
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from . import __version__
from .certify import certify, quadratic_fit, random_range_direction, section_samples
from .denoise import KernelParams, build_kernel, dsg_sinkhorn, kernel_denoiser, symmetrize_similarity
from .errors import PnPError, ValidationError
from .forward import (InverseProblem, gaussian_kernel, make_blur, make_inpainting, make_superres,
                      random_mask, uniform_kernel)
from .images import read_pgm, synthetic_texture, write_pgm
from .regfunc import Regularizer
from .solve import SolverConfig, multi_init_run, resolve_parameter, run_solver

log = logging.getLogger("pnpconvex")

TASKS = ("reconstruct", "certify", "section", "multi_init")

DEFAULTS: Dict[str, Dict[str, str]] = {
    "experiment": {"task": "reconstruct", "seed": "0", "lambda": "2.0"},
    "data": {"image": "", "synthetic_size": "32", "noise_sigma": "0.02"},
    "forward": {"kind": "inpaint", "mask_fraction": "0.3", "kernel": "uniform", "kernel_size": "7",
                "kernel_sigma": "1.5", "factor": "2"},
    "denoiser": {"variant": "dsg", "patch_radius": "1", "search_radius": "5", "h": "0.2",
                 "eig_floor": "0.2", "sinkhorn_tol": "1e-10"},
    "solver": {"algorithm": "ista", "gamma": "", "rho": "", "max_iter": "5000", "stop_tol": "1e-9",
               "inner_tol": "1e-12", "objective_every": "1"},
    "certify": {"tol": "1e-8", "max_iter": "", "section_points": "41", "section_range": "2.0"},
    "multi_init": {"count": "3"},
    "output": {"dir": "out"},
}
# written to manifest.ini for the record; ignored when a manifest is used as a config
MANIFEST_ONLY = ("seeds", "resolved")


class Failure(Exception):
    def __init__(self, where: str, err: Exception, code: int):
        super().__init__(f"{where}: {err}")
        self.where, self.err, self.code = where, err, code


@contextlib.contextmanager
def stage(where: str):
    """Tag any error raised inside with ``where`` and its exit code."""
    try:
        yield
    except Failure:
        raise
    except (ValidationError, ValueError, OSError) as err:
        raise Failure(where, err, 1) from err
    except (PnPError, ArithmeticError, np.linalg.LinAlgError) as err:
        raise Failure(where, err, 2) from err


@dataclass
class Experiment:
    cfg: configparser.ConfigParser
    task: str
    seed: int
    lam: float
    solver: SolverConfig
    params: KernelParams
    out_dir: str


def _get(cfg, section, key, conv, check=None, what=""):
    raw = cfg.get(section, key)
    try:
        value = conv(raw)
    except ValueError:
        raise ValidationError(f"[{section}] {key} = {raw!r} is not a valid {conv.__name__}") from None
    if check is not None and not check(value):
        raise ValidationError(f"[{section}] {key} = {raw!r}: {what}")
    return value


def _optional_float(raw: str) -> Optional[float]:
    return float(raw) if raw.strip() else None


def load_config(path, seed: Optional[int] = None, out_dir: Optional[str] = None,
                max_iter: Optional[int] = None) -> Experiment:
    """Parse and validate a config file, applying command-line overrides."""
    if not os.path.isfile(path):
        raise ValidationError(f"config file {path} does not exist")
    cfg = configparser.ConfigParser(interpolation=None)
    cfg.read_dict(DEFAULTS)
    try:
        with open(path, encoding="utf-8") as fh:
            user = configparser.ConfigParser(interpolation=None)
            user.read_file(fh)
    except configparser.Error as err:
        raise ValidationError(f"malformed config: {err}") from None
    for section in user.sections():
        if section in MANIFEST_ONLY:
            continue
        if section not in DEFAULTS:
            raise ValidationError(f"unknown config section [{section}]")
        for key, value in user.items(section):
            if key not in DEFAULTS[section]:
                raise ValidationError(f"unknown key {key!r} in [{section}]")
            cfg.set(section, key, value.strip())
    if seed is not None:
        cfg.set("experiment", "seed", str(seed))
    if out_dir is not None:
        cfg.set("output", "dir", out_dir)
    if max_iter is not None:
        cfg.set("solver", "max_iter", str(max_iter))

    task = cfg.get("experiment", "task")
    if task not in TASKS:
        raise ValidationError(f"task must be one of {TASKS}, got {task!r}")
    seed_v = _get(cfg, "experiment", "seed", int, lambda v: v >= 0, "must be >= 0")
    lam = _get(cfg, "experiment", "lambda", float, lambda v: v > 0 and math.isfinite(v), "must be positive")

    image = cfg.get("data", "image")
    if image and not os.path.isfile(image):
        raise ValidationError(f"[data] image {image!r} does not exist")
    _get(cfg, "data", "synthetic_size", int, lambda v: v >= 4, "must be >= 4")
    _get(cfg, "data", "noise_sigma", float, lambda v: v >= 0, "must be >= 0")

    kind = cfg.get("forward", "kind")
    if kind not in ("inpaint", "deblur", "superres"):
        raise ValidationError(f"[forward] kind must be inpaint, deblur or superres, got {kind!r}")
    _get(cfg, "forward", "mask_fraction", float, lambda v: 0 < v <= 1, "must lie in (0, 1]")
    if cfg.get("forward", "kernel") not in ("uniform", "gaussian"):
        raise ValidationError("[forward] kernel must be uniform or gaussian")
    _get(cfg, "forward", "kernel_size", int, lambda v: v >= 1 and v % 2 == 1, "must be a positive odd integer")
    _get(cfg, "forward", "kernel_sigma", float, lambda v: v > 0, "must be positive")
    _get(cfg, "forward", "factor", int, lambda v: v >= 1, "must be >= 1")

    if cfg.get("denoiser", "variant") not in ("dsg", "kernel", "symmetric"):
        raise ValidationError("[denoiser] variant must be dsg, kernel or symmetric")
    params = KernelParams(
        _get(cfg, "denoiser", "patch_radius", int),
        _get(cfg, "denoiser", "search_radius", int),
        _get(cfg, "denoiser", "h", float),
        _get(cfg, "denoiser", "eig_floor", float),
    )
    _get(cfg, "denoiser", "sinkhorn_tol", float, lambda v: v > 0, "must be positive")

    solver = SolverConfig(
        algorithm=cfg.get("solver", "algorithm"),
        gamma=_get(cfg, "solver", "gamma", _optional_float),
        rho=_get(cfg, "solver", "rho", _optional_float),
        max_iter=_get(cfg, "solver", "max_iter", int),
        stop_tol=_get(cfg, "solver", "stop_tol", float),
        inner_tol=_get(cfg, "solver", "inner_tol", float),
        objective_every=_get(cfg, "solver", "objective_every", int),
    )
    _get(cfg, "certify", "tol", float, lambda v: v > 0, "must be positive")
    cmax = cfg.get("certify", "max_iter")
    if cmax:
        _get(cfg, "certify", "max_iter", int, lambda v: v >= 1, "must be >= 1")
    _get(cfg, "certify", "section_points", int, lambda v: v >= 3, "must be >= 3")
    _get(cfg, "certify", "section_range", float, lambda v: v > 0, "must be positive")
    _get(cfg, "multi_init", "count", int, lambda v: v >= 2, "must be >= 2")
    return Experiment(cfg, task, seed_v, lam, solver, params, cfg.get("output", "dir"))


def _seeds(seed: int) -> Dict[str, int]:
    return {"image": seed, "mask": seed, "noise": seed + 1, "init": seed + 2, "direction": seed + 3}


def synthesize(exp: Experiment):
    """Ground truth and observed problem ``b = A xi + sigma * noise``."""
    cfg = exp.cfg
    seeds = _seeds(exp.seed)
    image = cfg.get("data", "image")
    if image:
        with stage("images.read_pgm"):
            truth = read_pgm(image)
    else:
        size = cfg.getint("data", "synthetic_size")
        truth = synthetic_texture((size, size), seeds["image"])
    shape = truth.shape
    kind = cfg.get("forward", "kind")
    with stage(f"forward.make_{'inpainting' if kind == 'inpaint' else 'blur' if kind == 'deblur' else 'superres'}"):
        if kind == "inpaint":
            A = make_inpainting(shape, random_mask(shape, cfg.getfloat("forward", "mask_fraction"), seeds["mask"]))
        else:
            size = cfg.getint("forward", "kernel_size")
            k = uniform_kernel(size) if cfg.get("forward", "kernel") == "uniform" \
                else gaussian_kernel(size, cfg.getfloat("forward", "kernel_sigma"))
            A = make_blur(shape, k) if kind == "deblur" else make_superres(shape, k, cfg.getint("forward", "factor"))
        xi = truth.ravel()
        sigma = cfg.getfloat("data", "noise_sigma")
        b = A(xi) + sigma * np.random.default_rng(seeds["noise"]).standard_normal(A.dim_out)
        p = InverseProblem(A, b, shape)
    return p, xi


def _smooth(img: np.ndarray) -> np.ndarray:
    g = gaussian_kernel(5, 1.0)
    return make_blur(img.shape, g)(img.ravel()).reshape(img.shape)


def guide_image(p: InverseProblem) -> np.ndarray:
    """Fixed guide for the kernel: normalized convolution of ``A^T b`` by ``A^T 1``."""
    num = _smooth(p.A.apply_adjoint(p.b).reshape(p.shape))
    den = _smooth(p.A.apply_adjoint(np.ones(p.A.dim_out)).reshape(p.shape))
    ok = den > 1e-8
    guide = np.full(p.shape, float(np.mean(num[ok] / den[ok])) if ok.any() else 0.5)
    guide[ok] = num[ok] / den[ok]
    return np.clip(guide, 0.0, 1.0)


def build_denoiser(exp: Experiment, p: InverseProblem):
    with stage("denoise.build_kernel"):
        kw = build_kernel(guide_image(p), exp.params, seed=exp.seed)
    variant = exp.cfg.get("denoiser", "variant")
    if variant == "kernel":
        with stage("denoise.kernel_denoiser"):
            return kernel_denoiser(kw), kw
    if variant == "symmetric":
        with stage("denoise.symmetrize_similarity"):
            return symmetrize_similarity(kw), kw
    with stage("denoise.dsg_sinkhorn"):
        return dsg_sinkhorn(kw, tol=exp.cfg.getfloat("denoiser", "sinkhorn_tol")), kw


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def trace_csv(trace) -> str:
    lines = ["iter,objective,displacement,psnr"]
    n = len(trace.displacement)
    for k in range(n):
        obj = trace.objective[k] if k < len(trace.objective) else math.nan
        ps = trace.psnr[k] if trace.psnr is not None else math.nan
        lines.append(f"{k + 1},{_fmt(float(obj))},{_fmt(float(trace.displacement[k]))},{_fmt(float(ps))}")
    return "\n".join(lines) + "\n"


def key_values(items) -> str:
    return "".join(f"{k}: {_fmt(v)}\n" for k, v in items)


def execute(exp: Experiment) -> Dict[str, object]:
    """Run the configured task and return ``{filename: content}`` without writing."""
    p, truth = synthesize(exp)
    d, kw = build_denoiser(exp, p)
    r = Regularizer(d, exp.lam)
    cfg = exp.cfg
    seeds = _seeds(exp.seed)
    artifacts: Dict[str, object] = {}
    resolved: Dict[str, str] = {"kernel_shift": _fmt(float(kw.shift)),
                                "kernel_lambda_min": _fmt(float(kw.lambda_min))}

    if exp.task in ("reconstruct", "multi_init"):
        with stage("solve.resolve_parameter"):
            resolved["solver_parameter"] = _fmt(float(resolve_parameter(p, r, exp.solver, d.metric)))
        x_bp = p.A.apply_adjoint(p.b)
        if exp.task == "reconstruct":
            with stage(f"solve.pnp_{exp.solver.algorithm.value}"):
                tr = run_solver(p, d, r, exp.solver, x_bp, truth=truth)
            artifacts["reconstruction.pgm"] = tr.final_x.reshape(p.shape)
            artifacts["trace.csv"] = trace_csv(tr)
            artifacts["summary.txt"] = key_values([
                ("algorithm", exp.solver.algorithm.value), ("iterations", tr.iterations_used),
                ("converged", tr.converged), ("final_objective", float(tr.objective[-1])),
                ("psnr", float(tr.psnr[-1]))])
        else:
            count = cfg.getint("multi_init", "count")
            rng = np.random.default_rng(seeds["init"])
            inits = [np.zeros(p.n), x_bp] + [rng.uniform(0.0, 1.0, p.n) for _ in range(count - 2)]
            with stage("solve.multi_init_run"):
                rep = multi_init_run(p, d, r, exp.solver, inits, truth=truth)
            items = [("algorithm", exp.solver.algorithm.value),
                     ("max_pairwise_distance", rep.max_pairwise_distance),
                     ("certified", bool(rep.certified) if rep.certified is not None else "unknown")]
            for i, tr in enumerate(rep.per_init):
                items += [(f"init_{i}_psnr", float(tr.psnr[-1])), (f"init_{i}_iterations", tr.iterations_used),
                          (f"init_{i}_converged", tr.converged),
                          (f"init_{i}_final_objective", float(tr.objective[-1]))]
                artifacts[f"trace_init{i}.csv"] = trace_csv(tr)
            artifacts["multi_init.txt"] = key_values(items)
            artifacts["reconstruction.pgm"] = rep.per_init[0].final_x.reshape(p.shape)
    else:
        tol = cfg.getfloat("certify", "tol")
        cmax = cfg.get("certify", "max_iter")
        with stage("certify.mu_lower_bound"):
            rep = certify(p, d, exp.lam, tol=tol, seed=exp.seed, max_iter=int(cmax) if cmax else None)
        cond = rep.condition_check
        items = [("mu_lower_bound", float(rep.mu_lower_bound)), ("d_Q", float(rep.d_Q)),
                 ("d_Qs", float(rep.d_Qs)), ("power_iters_dominant", rep.power_iters[0]),
                 ("power_iters_shifted", rep.power_iters[1]), ("certified", rep.certified),
                 ("tol", tol), ("lambda", exp.lam)]
        if cond is not None:
            items += [("condition_status", cond.status), ("Ae_norm", float(cond.Ae_norm)),
                      ("second_eigenvalue", float(cond.fix.second_eigenvalue))]
        if exp.task == "section":
            v0 = random_range_direction(d, seeds["direction"])
            span = cfg.getfloat("certify", "section_range")
            grid = np.linspace(-span, span, cfg.getint("certify", "section_points"))
            with stage("certify.section_samples"):
                samples = section_samples(p, r, v0, rep.mu_lower_bound, grid)
            coef, resid = quadratic_fit(samples)
            items += [("section_leading_coefficient", float(coef[0])), ("section_fit_residual", resid)]
            artifacts["section.csv"] = "t,g\n" + "".join(f"{_fmt(t)},{_fmt(g)}\n" for t, g in samples)
        artifacts["certificate.txt"] = key_values(items)

    man = configparser.ConfigParser(interpolation=None)
    man.read_dict({s: dict(cfg.items(s)) for s in cfg.sections()})
    man["seeds"] = {k: str(v) for k, v in seeds.items()}
    man["resolved"] = dict(resolved, version=__version__, shape=f"{p.shape[0]}x{p.shape[1]}")
    lines = []
    for s in man.sections():
        lines.append(f"[{s}]")
        lines += [f"{k} = {v}" for k, v in man.items(s)]
        lines.append("")
    artifacts["manifest.ini"] = "\n".join(lines)
    return artifacts


def write_artifacts(out_dir: str, artifacts: Dict[str, object]) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for name, content in sorted(artifacts.items()):
        path = os.path.join(out_dir, name)
        if name.endswith(".pgm"):
            write_pgm(path, content)
        else:
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(content)


def run(config_path, seed: Optional[int] = None, out_dir: Optional[str] = None,
        max_iter: Optional[int] = None) -> int:
    """Run one experiment; returns the process exit status."""
    try:
        with stage("cli.load_config"):
            exp = load_config(config_path, seed, out_dir, max_iter)
        with stage("cli.execute"):
            artifacts = execute(exp)
        with stage("cli.write_artifacts"):
            write_artifacts(exp.out_dir, artifacts)
    except Failure as f:
        kind = "invalid input" if f.code == 1 else "numerical failure"
        print(f"pnp: {kind} in {f.where}: {f.err}", file=sys.stderr)
        return f.code
    print(f"pnp: wrote {len(artifacts)} artifacts to {exp.out_dir}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="pnp", description="PnP reconstruction with linear denoisers "
                                     "and strong-convexity certificates.")
    sub = parser.add_subparsers(dest="command", required=True)
    rp = sub.add_parser("run", help="run an experiment from an INI config")
    rp.add_argument("config")
    rp.add_argument("--seed", type=int, default=None)
    rp.add_argument("--out-dir", default=None)
    rp.add_argument("--max-iter", type=int, default=None)
    rp.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return run(args.config, args.seed, args.out_dir, args.max_iter)


if __name__ == "__main__":
    sys.exit(main())
