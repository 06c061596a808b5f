"""Numerical laboratory for Gaussian BV transport: mollification operators,
commutator remainders, anisotropic defect bounds, cylindrical approximation,
exponential-flow solutions, kernel optimization, and a weighted Neumann
example."""

__version__ = "0.1.0"

from .gauss import Estimate, GaussianSpace, expect, gauss_density, sample_gaussian
from .fields import (ARCTAN_RENORM, SIGMOID_RENORM, BVField, DerivativeMeasure,
                     Interface, RenormFunction, SmoothField, constant_field,
                     derivative_measure, eval_field, gauss_divergence,
                     linear_field, polar_part, sign_field, total_variation)
from .mollifier import (Mollifier, OUParams, apply_conv, apply_teps,
                        apply_teps_adjoint, unit_kernel, validate_kernel)
from .expflow import (FlowSolution, HSMatrix, cf_det, flow_map, flow_solution,
                      lp_bound_check, pushforward_density, ut_solution)
from .optimizer import AveragedKernel, averaged_kernel, objective, verify_bound
from .commutator import (DefectReport, anisotropic_bound, commutator_residual,
                         defect_experiment, ou_remainder, residual_pairing)
from .cylapprox import (Projection, cylindrical_approx,
                        divergence_identity_check, tv_contraction_check)
from .neumann import (IntervalDomain, comparison_check, disk_domain,
                      extended_field, solve_neumann, weak_div_check)
