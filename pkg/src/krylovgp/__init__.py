"""Gaussian-process regression with iterative (Krylov and eigenvector) approximations."""
from .kernels import Dataset, KernelSpec, kernel_cross, kernel_eval, kernel_matrix, matern, series, sqexp
from .spectral import (BreakdownError, EigenSystem, LanczosResult, cg_solve, dense_eig,
                       kernel_lanczos, krylov_basis, lanczos)
from .itergp import (DependentPolicyError, IterGPState, LowRankPrecision, closed_form_C_cg,
                     closed_form_C_ev, closed_form_C_lanczos, itergp_step, policy_cg, policy_custom,
                     policy_ev, policy_lanczos, run_itergp, vb_titsias)
from .posterior import GPPosterior, approx_posterior, credible_band, exact_posterior, predict
from .diagnostics import KLReport, kl_decomposition, kl_gaussians

__version__ = "0.1.0"
