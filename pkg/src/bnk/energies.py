"""Scalar model energies reported during fitting.

Four approximations to the negative log marginal likelihood are supported:
the variational free energy (vfe), two Laplace-style point estimates (le,
le2), and the power-EP energy (pepe). All of them consume the per-site
posterior marginals plus the Gaussian log partition logZ supplied by the
active backend; pepe additionally rebuilds the per-site cavities.
"""

import numpy as np

from functools import partial

_einsum = partial(np.einsum, optimize=True)

from .exceptions import NonPSDCavity
from .likelihoods import stack_observations
from .linalg import cholesky_psd, symmetrize
from .rules import _log_gaussian_power_expectation, _tilted_moments, cavities, quad_nodes

ENERGY_KINDS = ("vfe", "le", "le2", "pepe")


def expected_log_lik(lik, y, means, covs, quad):
    """Per-site E_q[log p(y_n | f_n)] by quadrature; shape (N,)."""
    f = quad_nodes(means, covs, quad)
    yb = stack_observations(lik, y, means.shape[0])[:, None, :]
    return _einsum("q,nq->n", quad.weights, lik.log_density(yb, f))


def _site_logpdfs(points, site_means, site_covs, trace_covs=None):
    """log N(points | site moments), plus the half-trace term when marginal
    covariances are supplied (closed form of E_q[log N(f | site)])."""
    n, d = points.shape
    out = np.empty(n)
    for i in range(n):
        chol, _ = cholesky_psd(site_covs[i])
        diff = points[i] - site_means[i]
        alpha = np.linalg.solve(chol, diff)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        out[i] = -0.5 * (d * np.log(2.0 * np.pi) + logdet + alpha @ alpha)
        if trace_covs is not None:
            solved = np.linalg.solve(chol.T, np.linalg.solve(chol, trace_covs[i]))
            out[i] -= 0.5 * np.trace(solved)
    return out


def energy(
    kind,
    lik,
    y,
    means,
    covs,
    sites,
    log_z_gaussian,
    quad,
    alpha=0.5,
    prior_gram=None,
    full_mean=None,
):
    """Evaluate one of the supported energies; returns a float.

    `le2` additionally needs the dense prior Gram and the stacked posterior
    mean, so it is only available on the dense backend. `pepe` recomputes
    every cavity from the current marginals and sites and raises
    NonPSDCavity if any of them is improper.
    """
    if kind not in ENERGY_KINDS:
        raise ValueError(f"unknown energy kind {kind!r}")
    y = stack_observations(lik, y, means.shape[0])
    site_means, site_covs = sites.mean_cov()
    if kind == "vfe":
        fit_term = expected_log_lik(lik, y, means, covs, quad).sum()
        site_term = _site_logpdfs(means, site_means, site_covs, trace_covs=covs).sum()
        return float(-fit_term + site_term - log_z_gaussian)
    if kind == "le":
        fit_term = lik.log_density(y, means).sum()
        site_term = _site_logpdfs(means, site_means, site_covs).sum()
        return float(-fit_term + site_term - log_z_gaussian)
    if kind == "le2":
        if prior_gram is None or full_mean is None:
            raise ValueError("le2 requires the dense prior Gram and stacked mean")
        fit_term = lik.log_density(y, means).sum()
        chol_k, _ = cholesky_psd(symmetrize(prior_gram), jitter_rel=1e-10)
        alpha_v = np.linalg.solve(chol_k, full_mean)
        quad_term = 0.5 * float(alpha_v @ alpha_v)
        n, d = means.shape
        cbar = np.zeros_like(prior_gram)
        logdet_cbar = 0.0
        for i in range(n):
            cbar[i * d : (i + 1) * d, i * d : (i + 1) * d] = site_covs[i]
            logdet_cbar += 2.0 * np.sum(np.log(np.diag(cholesky_psd(site_covs[i])[0])))
        chol_a, _ = cholesky_psd(prior_gram + cbar)
        logdet_a = 2.0 * np.sum(np.log(np.diag(chol_a)))
        return float(-fit_term + quad_term + 0.5 * logdet_a - 0.5 * logdet_cbar)
    # pepe
    cav_means, cav_covs, ok = cavities(means, covs, sites, alpha)
    if not np.all(ok):
        raise NonPSDCavity(f"{int((~ok).sum())} cavities failed during the energy")
    log_e, _, _, t_ok = _tilted_moments(cav_means, cav_covs, y, lik, alpha, quad)
    if not np.all(t_ok):
        raise NonPSDCavity("tilted expectation non-positive during the energy")
    log_en = _log_gaussian_power_expectation(cav_means, cav_covs, site_means, site_covs, alpha)
    log_z_sites = (log_e - log_en) / alpha
    return float(-log_z_sites.sum() - log_z_gaussian)
