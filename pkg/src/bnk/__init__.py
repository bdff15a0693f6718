"""Approximate inference for Gaussian-prior models with factorised likelihoods.

Every inference scheme is expressed as a per-site update rule (Jacobian and
Hessian of a surrogate target) composed with a global conjugate posterior
update, with PSD-guaranteeing variants and dense, sparse, and Markovian
(Kalman) global backends.
"""

import os

# The workloads here are dominated by many small factorisations; threaded
# BLAS spin-waits swamp them. Pin to one thread unless the user overrides.
# (Effective only if numpy has not been imported yet in this process.)
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

from . import backends, energies, kernels, likelihoods, linalg, quadrature, rules
from .backends import DenseModel, MarkovModel, SparseModel
from .rules import MethodConfig, SiteParams

__all__ = [
    "backends",
    "energies",
    "kernels",
    "likelihoods",
    "linalg",
    "quadrature",
    "rules",
    "DenseModel",
    "MarkovModel",
    "SparseModel",
    "MethodConfig",
    "SiteParams",
]
