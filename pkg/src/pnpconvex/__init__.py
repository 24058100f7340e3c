"""Plug-and-play reconstruction with linear denoisers.

Matrix-free operators, NLM-style kernel denoisers, the convex regularizers
they are proximal maps of, PnP solvers and strong-convexity certificates.
"""

__version__ = "0.1.0"

from .errors import (BudgetError, CGError, ConvergenceError, PnPError, PowerMethodError, RangeError,  # noqa: E402
                     SinkhornError, SolverError, SpectrumError, ValidationError)
from .linops import LinearMap, cg_solve, materialize_dense, pinv_apply, power_method  # noqa: E402
from .forward import InverseProblem, Metric, make_blur, make_inpainting, make_superres  # noqa: E402
from .denoise import (Denoiser, KernelParams, KernelWeights, Variant, build_kernel, dsg_sinkhorn,  # noqa: E402
                      fix_check, kernel_denoiser, symmetrize_similarity)
from .regfunc import Regularizer, objective, phi_kernel, phi_symmetric, prox_oracle_dense  # noqa: E402
from .solve import (Algorithm, SolverConfig, SolverTrace, multi_init_run, pnp_admm, pnp_fista,  # noqa: E402
                    pnp_hqs, pnp_ista)
from .certify import build_Q, condition_check, mu_exact_dense, mu_lower_bound, section_samples  # noqa: E402
