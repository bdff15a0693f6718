"""Per-site update rules: each inference scheme as (J_n, H_nn) of a surrogate.

All schemes share one skeleton: compute the Jacobian and (approximate)
Hessian of a per-site surrogate target, blend them into the site natural
parameters with learning rate rho,

    lam2 <- (1 - rho) lam2 + rho * 0.5 * H
    lam1 <- (1 - rho) lam1 + rho * (J - H m)

and let a backend perform the conjugate global update. The schemes differ
only in the surrogate: the log likelihood at the mean (Newton), its
posterior expectation (VI), the tilted log partition over a cavity (power
EP), or the log density of a statistically linearised model (PL). The
Gauss-Newton, quasi-Newton and Riemannian variants replace or correct H so
the updated site precisions stay positive semi-definite.

Rule functions are vectorised over sites: means are (N, D), covariances
(N, D, D), observations (N, Dy); single-site calls may drop the leading
axis.
"""

from dataclasses import dataclass

import numpy as np

from functools import partial

_einsum = partial(np.einsum, optimize=True)

from .exceptions import ModeUnsupported, NonPSDCavity, NotPSD, SingularScaling
from .likelihoods import residual_decomposition
from .linalg import (
    batch_inv_psd,
    batch_inv_sym,
    sym_inv_sqrt,
    cholesky_psd,
    heuristic_psd_projection,
    inv_psd,
    symmetrize,
)
from .quadrature import default_quadrature

BASE_RULES = (
    "newton",
    "vi",
    "pep",
    "pl",
    "pl2",
    "taylor",
    "gn",
    "partial-gn",
    "generalised-gn",
    "vgn",
    "partial-vgn",
    "vggn",
    "newton-qn",
    "vi-qn",
    "pep-qn",
    "pl-qn",
    "newton-riemann",
    "vi-riemann",
    "pep-riemann",
)
RULES = BASE_RULES + tuple(f"{r}-heuristic" for r in BASE_RULES)

QN_RULES = ("newton-qn", "vi-qn", "pep-qn", "pl-qn")

# Energy reported alongside each rule family: the Laplace energy for the
# mode-seeking schemes, the free energy for the variational/linearisation
# ones, and the power-EP energy for the cavity-based ones.
_ENERGY_FOR_BASE = {
    "newton": "le",
    "taylor": "le",
    "gn": "le",
    "partial-gn": "le",
    "generalised-gn": "le",
    "newton-qn": "le",
    "newton-riemann": "le",
    "vi": "vfe",
    "vgn": "vfe",
    "partial-vgn": "vfe",
    "vggn": "vfe",
    "vi-qn": "vfe",
    "vi-riemann": "vfe",
    "pl": "vfe",
    "pl2": "vfe",
    "pl-qn": "vfe",
    "pep": "pepe",
    "pep-qn": "pepe",
    "pep-riemann": "pepe",
}

# Violations are counted against this floor on site-precision eigenvalues;
# the heuristic guard triggers slightly below it to ignore rounding noise.
PSD_VIOLATION_TOL = 1e-10
_GUARD_TOL = 1e-12


@dataclass(frozen=True)
class MethodConfig:
    """Inference scheme selection plus its scalar knobs.

    rho is the site learning rate, alpha the EP power, xi the quasi-Newton
    damping factor. A `-heuristic` suffix on the rule name turns on the
    diagonal PSD projection guard for that rule.
    """

    rule: str
    rho: float = 1.0
    alpha: float = 0.5
    xi: float = 0.8
    damped: bool = True
    quadrature: object = None
    psd_guard: str = "none"  # none | heuristic | reject
    heuristic_eps: float = 0.01

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"unknown rule {self.rule!r}")
        if not 0.0 < self.rho <= 1.0:
            raise ValueError("rho must lie in (0, 1]")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if not 0.0 < self.xi < 1.0:
            raise ValueError("xi must lie in (0, 1)")
        if self.psd_guard not in ("none", "heuristic", "reject"):
            raise ValueError("psd_guard must be none, heuristic, or reject")
        if self.rule.endswith("-heuristic"):
            object.__setattr__(self, "psd_guard", "heuristic")

    @property
    def base_rule(self):
        return self.rule[: -len("-heuristic")] if self.rule.endswith("-heuristic") else self.rule

    @property
    def energy_kind(self):
        return _ENERGY_FOR_BASE[self.base_rule]

    def quadrature_for(self, dim):
        return self.quadrature if self.quadrature is not None else default_quadrature(dim)


@dataclass
class SiteParams:
    """Natural parameters of the factorised approximate likelihood.

    lam1 is (N, D), lam2 is (N, D, D) with -2 lam2 the site precision, and
    log_z holds the per-site log constants maintained by power EP.
    """

    lam1: np.ndarray
    lam2: np.ndarray
    log_z: np.ndarray

    @classmethod
    def flat(cls, n, d, variance=1e6):
        """Near-flat proper sites: zero mean-pull, precision 1/variance."""
        lam1 = np.zeros((n, d))
        lam2 = np.tile(-0.5 / variance * np.eye(d), (n, 1, 1))
        return cls(lam1=lam1, lam2=lam2, log_z=np.zeros(n))

    @property
    def n_sites(self):
        return self.lam1.shape[0]

    @property
    def dim(self):
        return self.lam1.shape[1]

    def precision(self):
        return -2.0 * self.lam2

    def mean_cov(self):
        """Site moments (mean, cov); precisions must be invertible but may
        carry negative eigenvalues (tolerated until a global solve fails)."""
        cov = batch_inv_sym(self.precision())
        mean = _einsum("nde,ne->nd", cov, self.lam1)
        return mean, cov

    def copy(self):
        return SiteParams(self.lam1.copy(), self.lam2.copy(), self.log_z.copy())

    def min_precision_eigenvalue(self):
        return float(np.linalg.eigvalsh(self.precision()).min())


@dataclass(frozen=True)
class GaussianState:
    """A Gaussian in moment form; used for cavities and marginals."""

    mean: np.ndarray
    cov: np.ndarray


def _as_batch(arr, core_ndim):
    arr = np.asarray(arr, dtype=float)
    if arr.ndim == core_ndim:
        return arr[None], True
    return arr, False


def _maybe_squeeze(single, *arrays):
    if not single:
        return arrays if len(arrays) > 1 else arrays[0]
    out = tuple(a[0] if isinstance(a, np.ndarray) else a for a in arrays)
    return out if len(out) > 1 else out[0]


def _batch_cholesky(covs):
    covs = np.asarray(covs, dtype=float)
    try:
        return np.linalg.cholesky(covs)
    except np.linalg.LinAlgError:
        out = np.empty_like(covs)
        for i in range(covs.shape[0]):
            out[i], _ = cholesky_psd(covs[i])
        return out


def quad_nodes(means, covs, quad):
    """Per-site transformed nodes f = m + chol(C) x, shape (N, Q, D)."""
    chols = _batch_cholesky(covs)
    n, d = means.shape
    q = quad.nodes.shape[0]
    shifted = (chols.reshape(n * d, d) @ quad.nodes.T).reshape(n, d, q)
    return means[:, None, :] + shifted.transpose(0, 2, 1)


# --------------------------------------------------------------------------
# Mode-seeking rules (evaluated at the posterior mean)
# --------------------------------------------------------------------------


def newton_site(means, y, lik):
    """Exact Jacobian/Hessian of log p(y|f) at the mean."""
    means, single = _as_batch(means, 1)
    y, _ = _as_batch(lik.coerce_y(y), 1)
    jac = lik.dlog_density(y, means)
    hess = symmetrize(lik.d2log_density(y, means))
    return _maybe_squeeze(single, jac, hess)


def taylor_site(means, y, lik):
    """First-order linearisation at the mean with frozen conditional cov."""
    means, single = _as_batch(means, 1)
    y, _ = _as_batch(lik.coerce_y(y), 1)
    nu = lik.conditional_mean(means)
    sig_inv = batch_inv_psd(lik.conditional_cov(means))
    dnu = lik.dmean(means)
    resid = y - nu
    jac = _einsum("njd,njk,nk->nd", dnu, sig_inv, resid)
    hess = -_einsum("njd,njk,nke->nde", dnu, sig_inv, dnu)
    return _maybe_squeeze(single, jac, symmetrize(hess))


def gn_site(means, y, lik, mode="gn"):
    """Gauss-Newton Hessian approximations at the mean.

    `gn` and `partial-gn` need the continuous residual form of the model;
    `generalised-gn` applies to any likelihood and coincides with the
    Taylor rule.
    """
    if mode == "generalised-gn":
        return taylor_site(means, y, lik)
    if mode not in ("gn", "partial-gn"):
        raise ModeUnsupported(f"unknown Gauss-Newton mode {mode!r}")
    if not lik.gaussian_form:
        raise ModeUnsupported(f"mode {mode!r} needs a Gaussian-form likelihood")
    means, single = _as_batch(means, 1)
    y, _ = _as_batch(lik.coerce_y(y), 1)
    dec = residual_decomposition(lik, y, means)
    hess = -_einsum("njd,nje->nde", dec.G, dec.G)
    if mode == "partial-gn":
        hess = hess - _einsum("nd,ne->nde", dec.logz_grad, dec.logz_grad)
    jac = lik.dlog_density(y, means)
    return _maybe_squeeze(single, jac, symmetrize(hess))


# --------------------------------------------------------------------------
# Variational rules (expectations under the posterior marginal)
# --------------------------------------------------------------------------


def vi_site(means, covs, y, lik, quad):
    """Gradient/Hessian of E_q[log p(y|f)] w.r.t. the marginal mean.

    Uses the mean-derivative identities: both reduce to expectations of the
    integrand's own derivatives at the transformed nodes.
    """
    means, single = _as_batch(means, 1)
    covs, _ = _as_batch(covs, 2)
    y, _ = _as_batch(lik.coerce_y(y), 1)
    f = quad_nodes(means, covs, quad)
    yb = y[:, None, :]
    w = quad.weights
    jac = _einsum("q,nqd->nd", w, lik.dlog_density(yb, f))
    hess = _einsum("q,nqde->nde", w, lik.d2log_density(yb, f))
    return _maybe_squeeze(single, jac, symmetrize(hess))


def vgn_site(means, covs, y, lik, quad, mode="vgn"):
    """Expected Gauss-Newton Hessians: NSD node-wise, hence NSD in sum.

    The Jacobian is the exact expected-log-likelihood gradient (as in the
    plain variational rule); only the Hessian is approximated.
    """
    if mode not in ("vgn", "partial-vgn", "vggn"):
        raise ModeUnsupported(f"unknown variational Gauss-Newton mode {mode!r}")
    if mode in ("vgn", "partial-vgn") and not lik.gaussian_form:
        raise ModeUnsupported(f"mode {mode!r} needs a Gaussian-form likelihood")
    means, single = _as_batch(means, 1)
    covs, _ = _as_batch(covs, 2)
    y, _ = _as_batch(lik.coerce_y(y), 1)
    f = quad_nodes(means, covs, quad)
    yb = y[:, None, :]
    w = quad.weights
    jac = _einsum("q,nqd->nd", w, lik.dlog_density(yb, f))
    if mode == "vggn":
        dnu = lik.dmean(f)
        sig_inv = batch_inv_psd(lik.conditional_cov(f))
        hess = -_einsum("q,nqjd,nqjk,nqke->nde", w, dnu, sig_inv, dnu)
    elif not lik.has_cov_gradient:
        # Constant conditional covariance: whiten once per site, and the
        # normaliser gradient vanishes so both modes coincide.
        root = sym_inv_sqrt(lik.conditional_cov(means))  # (N, Dy, Dy)
        g_mat = _einsum("njk,nqkd->nqjd", root, lik.dmean(f))
        hess = -_einsum("q,nqjd,nqje->nde", w, g_mat, g_mat)
    else:
        dec = residual_decomposition(lik, yb, f)
        hess = -_einsum("q,nqjd,nqje->nde", w, dec.G, dec.G)
        if mode == "partial-vgn":
            hess = hess - _einsum("q,nqd,nqe->nde", w, dec.logz_grad, dec.logz_grad)
    return _maybe_squeeze(single, jac, symmetrize(hess))


# --------------------------------------------------------------------------
# Statistical linearisation
# --------------------------------------------------------------------------


def slr_statistics(means, covs, lik, quad):
    """Moments of the best affine likelihood fit under the marginal.

    Returns (Enu, dEnu, Omega): the expected conditional mean, its gradient
    w.r.t. the marginal mean, and the mean-square-error matrix
    Omega = S - Q^T C^{-1} Q.
    """
    f = quad_nodes(means, covs, quad)
    w = quad.weights
    nu = lik.conditional_mean(f)
    e_nu = _einsum("q,nqj->nj", w, nu)
    d_e_nu = _einsum("q,nqjd->njd", w, lik.dmean(f))
    cent = nu - e_nu[:, None, :]
    s_mat = _einsum("q,nqj,nqk->njk", w, cent, cent) + _einsum(
        "q,nqjk->njk", w, lik.conditional_cov(f)
    )
    q_mat = _einsum("q,nqd,nqj->ndj", w, f - means[:, None, :], cent)
    c_inv = batch_inv_psd(covs)
    omega = s_mat - _einsum("ndj,nde,nek->njk", q_mat, c_inv, q_mat)
    return e_nu, d_e_nu, symmetrize(omega)


def pl_site(means, covs, y, lik, quad):
    """Posterior-linearisation rule: Gauss-Newton on the linearised model."""
    means, single = _as_batch(means, 1)
    covs, _ = _as_batch(covs, 2)
    y, _ = _as_batch(lik.coerce_y(y), 1)
    e_nu, d_e_nu, omega = slr_statistics(means, covs, lik, quad)
    omega_inv = batch_inv_psd(omega)
    resid = y - e_nu
    jac = _einsum("njd,njk,nk->nd", d_e_nu, omega_inv, resid)
    hess = -_einsum("njd,njk,nke->nde", d_e_nu, omega_inv, d_e_nu)
    return _maybe_squeeze(single, jac, symmetrize(hess))


def _pl2_shifts(means, full):
    """Finite-difference stencil around each mean; step 1e-4 (1 + |m|)."""
    n, d = means.shape
    h = 1e-4 * (1.0 + np.abs(means))  # (N, D)
    offsets = [np.zeros((n, d))]
    index = {}
    for k in range(d):
        for sign in (+1.0, -1.0):
            index[(k, sign)] = len(offsets)
            e = np.zeros((n, d))
            e[:, k] = sign * h[:, k]
            offsets.append(e)
    if full:
        for a in range(d):
            for b in range(a + 1, d):
                for sa in (+1.0, -1.0):
                    for sb in (+1.0, -1.0):
                        index[(a, b, sa, sb)] = len(offsets)
                        e = np.zeros((n, d))
                        e[:, a] = sa * h[:, a]
                        e[:, b] = sb * h[:, b]
                        offsets.append(e)
    return np.stack(offsets, axis=1), index, h


def pl2_site(means, covs, y, lik, quad, mode="full"):
    """Second-order posterior linearisation.

    Tracks the dependence of the linearised model's covariance on the
    marginal mean. With the whitened residual D = Omega^{-1/2}(y - E_q[nu])
    and Z the Gaussian normaliser, the target is log Z - 0.5 D^T D; its
    derivatives are taken by central finite differences of the quadrature
    values. `partial-gn` keeps only the PSD-guaranteed pieces.
    """
    if mode not in ("full", "partial-gn"):
        raise ModeUnsupported(f"unknown second-order linearisation mode {mode!r}")
    means, single = _as_batch(means, 1)
    covs, _ = _as_batch(covs, 2)
    y, _ = _as_batch(lik.coerce_y(y), 1)
    n, d = means.shape
    dy = lik.obs_dim
    offsets, index, h = _pl2_shifts(means, full=(mode == "full"))
    p = offsets.shape[1]
    m_flat = (means[:, None, :] + offsets).reshape(n * p, d)
    c_flat = np.repeat(covs, p, axis=0)
    e_nu, _, omega = slr_statistics(m_flat, c_flat, lik, quad)
    # Whitened residual and normaliser at every stencil point.
    roots = []
    logdets = []
    for i in range(n * p):
        chol, _ = cholesky_psd(omega[i])
        roots.append(np.linalg.inv(chol))
        logdets.append(2.0 * np.sum(np.log(np.diag(chol))))
    roots = np.array(roots)  # Omega^{-1/2} (triangular variant), (N*P, Dy, Dy)
    logz = -0.5 * (dy * np.log(2.0 * np.pi) + np.array(logdets))
    resid = np.repeat(y, p, axis=0) - e_nu
    d_vec = _einsum("ijk,ik->ij", roots, resid)
    d_vec = d_vec.reshape(n, p, dy)
    logz = logz.reshape(n, p)

    def at(key):
        return index[key]

    d0 = d_vec[:, 0, :]
    grad_d = np.empty((n, dy, d))
    grad_logz = np.empty((n, d))
    for k in range(d):
        hi, lo = at((k, +1.0)), at((k, -1.0))
        grad_d[:, :, k] = (d_vec[:, hi] - d_vec[:, lo]) / (2.0 * h[:, k : k + 1])
        grad_logz[:, k] = (logz[:, hi] - logz[:, lo]) / (2.0 * h[:, k])
    jac = grad_logz - _einsum("njd,nj->nd", grad_d, d0)
    if mode == "partial-gn":
        hess = -_einsum("njd,nje->nde", grad_d, grad_d)
        hess = hess - _einsum("nd,ne->nde", grad_logz, grad_logz)
        return _maybe_squeeze(single, jac, symmetrize(hess))
    hess_d = np.empty((n, dy, d, d))
    hess_logz = np.empty((n, d, d))
    for k in range(d):
        hi, lo = at((k, +1.0)), at((k, -1.0))
        hess_d[:, :, k, k] = (d_vec[:, hi] - 2.0 * d0 + d_vec[:, lo]) / h[:, k : k + 1] ** 2
        hess_logz[:, k, k] = (logz[:, hi] - 2.0 * logz[:, 0] + logz[:, lo]) / h[:, k] ** 2
    for a in range(d):
        for b in range(a + 1, d):
            pp, pm = at((a, b, +1.0, +1.0)), at((a, b, +1.0, -1.0))
            mp, mm = at((a, b, -1.0, +1.0)), at((a, b, -1.0, -1.0))
            denom = 4.0 * h[:, a] * h[:, b]
            cross_d = (d_vec[:, pp] - d_vec[:, pm] - d_vec[:, mp] + d_vec[:, mm]) / denom[:, None]
            cross_z = (logz[:, pp] - logz[:, pm] - logz[:, mp] + logz[:, mm]) / denom
            hess_d[:, :, a, b] = cross_d
            hess_d[:, :, b, a] = cross_d
            hess_logz[:, a, b] = cross_z
            hess_logz[:, b, a] = cross_z
    hess = hess_logz - _einsum("njd,nje->nde", grad_d, grad_d)
    hess = hess - _einsum("nj,njde->nde", d0, hess_d)
    return _maybe_squeeze(single, jac, symmetrize(hess))


# --------------------------------------------------------------------------
# Power EP
# --------------------------------------------------------------------------


def cavity(post_mean, post_cov, site, alpha):
    """Marginal with an alpha-fraction of one site removed.

    `site` is the pair (lam1_n, lam2_n). Raises NonPSDCavity when the
    remaining precision is not positive definite (the site overwhelms the
    marginal; shrinking rho usually repairs this).
    """
    lam1, lam2 = site
    post_prec = inv_psd(np.atleast_2d(post_cov))
    cav_prec = post_prec - alpha * (-2.0 * np.atleast_2d(lam2))
    if np.linalg.eigvalsh(cav_prec).min() <= 0.0:
        raise NonPSDCavity("cavity precision is not positive definite")
    cav_cov = inv_psd(cav_prec)
    lam1_post = post_prec @ np.atleast_1d(post_mean)
    cav_mean = cav_cov @ (lam1_post - alpha * np.atleast_1d(lam1))
    return GaussianState(mean=cav_mean, cov=cav_cov)


def cavities(means, covs, sites, alpha):
    """Batched cavity computation; returns (means, covs, ok) with a mask
    instead of raising, so sweeps can skip failing sites."""
    n, d = means.shape
    cav_means = means.copy()
    cav_covs = covs.copy()
    ok = np.ones(n, dtype=bool)
    for i in range(n):
        try:
            state = cavity(means[i], covs[i], (sites.lam1[i], sites.lam2[i]), alpha)
        except (NonPSDCavity, NotPSD):
            ok[i] = False
            continue
        cav_means[i] = state.mean
        cav_covs[i] = state.cov
    return cav_means, cav_covs, ok


def _tilted_moments(cav_means, cav_covs, y, lik, alpha, quad):
    """Quadrature pieces of the tilted distribution.

    Returns (log_e, grad, hess_raw) where log_e = log E_cav[p^alpha],
    grad = d log_e / d cavity mean and hess_raw = E[d2 p^alpha]/E[p^alpha]
    (the covariance-derivative building block); the mean Hessian of log_e
    is hess_raw - grad grad^T. Sites where the weighted sum of p^alpha is
    not positive are flagged in the returned mask.
    """
    f = quad_nodes(cav_means, cav_covs, quad)
    yb = y[:, None, :]
    w = quad.weights
    lp = lik.log_density(yb, f)
    t = alpha * lp
    shift = t.max(axis=1, keepdims=True)
    e = np.exp(t - shift)
    z = _einsum("q,nq->n", w, e)
    ok = z > 0.0
    z_safe = np.where(ok, z, 1.0)
    log_e = shift[:, 0] + np.log(z_safe)
    dlp = lik.dlog_density(yb, f)
    d2lp = lik.d2log_density(yb, f)
    grad = _einsum("q,nq,nqd->nd", w, e, alpha * dlp) / z_safe[:, None]
    integrand = alpha * d2lp + alpha**2 * _einsum("nqd,nqe->nqde", dlp, dlp)
    hess_raw = _einsum("q,nq,nqde->nde", w, e, integrand) / z_safe[:, None, None]
    return log_e, grad, hess_raw, ok


def _scale_through(hess_like, cav_prec, alpha, grad, hess):
    """Apply the tilted-update scaling R = P (alpha B + P)^{-1} implicitly.

    Returns (R grad, R hess) using the symmetric forms
    R g = g - alpha B X g and R S = S - alpha B X S with X = (alpha B + P)^{-1},
    where B is `hess_like` (the Hessian estimate used inside R).
    """
    n, d = grad.shape
    jac = np.empty_like(grad)
    out_hess = np.empty_like(hess)
    ok = np.ones(n, dtype=bool)
    for i in range(n):
        inner = alpha * hess_like[i] + cav_prec[i]
        try:
            x = np.linalg.solve(inner, np.eye(d))
        except np.linalg.LinAlgError:
            ok[i] = False
            jac[i] = 0.0
            out_hess[i] = 0.0
            continue
        bx = hess_like[i] @ x
        jac[i] = grad[i] - alpha * bx @ grad[i]
        out_hess[i] = hess[i] - alpha * bx @ hess[i]
    return jac, symmetrize(out_hess), ok


def _log_gaussian_power_expectation(cav_means, cav_covs, site_means, site_covs, alpha):
    """log E_cav[N^alpha(f | site_mean, site_cov)] in closed form.

    Uses N^alpha(f|m,C) = c N(f|m, C/alpha) with
    log c = (1-alpha)(D/2) log 2pi - (D/2) log alpha + ((1-alpha)/2) log|C|.
    """
    n, d = cav_means.shape
    out = np.empty(n)
    for i in range(n):
        sign, logdet = np.linalg.slogdet(site_covs[i])
        log_c = (
            0.5 * (1.0 - alpha) * d * np.log(2.0 * np.pi)
            - 0.5 * d * np.log(alpha)
            + 0.5 * (1.0 - alpha) * logdet
        )
        merged = site_covs[i] / alpha + cav_covs[i]
        diff = site_means[i] - cav_means[i]
        chol, _ = cholesky_psd(merged)
        alpha_v = np.linalg.solve(chol, diff)
        out[i] = log_c - 0.5 * (
            d * np.log(2.0 * np.pi) + 2.0 * np.sum(np.log(np.diag(chol))) + alpha_v @ alpha_v
        )
    return out


def pep_site(cav, y, lik, alpha, quad, site=None):
    """Power-EP rule on a cavity state.

    cav may be a GaussianState (single site) or a pair of batched arrays.
    Returns (J, H, log_z); log_z requires the current `site` moments and is
    zero-filled when they are not supplied. Raises SingularScaling when the
    scaling solve fails for a single-site call.
    """
    if isinstance(cav, GaussianState):
        cav_means, single = _as_batch(cav.mean, 1)
        cav_covs, _ = _as_batch(cav.cov, 2)
    else:
        cav_means, single = _as_batch(cav[0], 1)
        cav_covs, _ = _as_batch(cav[1], 2)
    y, _ = _as_batch(lik.coerce_y(y), 1)
    log_e, grad_loge, hess_raw, ok = _tilted_moments(cav_means, cav_covs, y, lik, alpha, quad)
    grad = grad_loge / alpha
    hess = (hess_raw - _einsum("nd,ne->nde", grad_loge, grad_loge)) / alpha
    cav_prec = batch_inv_psd(cav_covs)
    jac, out_hess, scale_ok = _scale_through(hess, cav_prec, alpha, grad, hess)
    ok = ok & scale_ok
    if single and not ok[0]:
        raise SingularScaling("tilted scaling factor could not be formed")
    log_z = np.zeros(cav_means.shape[0])
    if site is not None:
        site_means, site_covs = site
        site_means, _ = _as_batch(site_means, 1)
        site_covs, _ = _as_batch(site_covs, 2)
        log_en = _log_gaussian_power_expectation(cav_means, cav_covs, site_means, site_covs, alpha)
        log_z = (log_e - log_en) / alpha
    if single:
        return _maybe_squeeze(True, jac, out_hess, log_z)
    return jac, out_hess, log_z, ok


# --------------------------------------------------------------------------
# Quasi-Newton
# --------------------------------------------------------------------------


def bfgs_update(b_mat, s, g, damped=False, xi=0.8):
    """Rank-two negative-semi-definite-preserving update of B.

    Undamped: applies the standard formula only when the curvature condition
    s^T g < 0 holds, otherwise returns B unchanged (rejection is a normal
    outcome). Damped: interpolates g toward B s just enough that the update
    is always applicable and NSD-preserving; the secant property then holds
    against the interpolant r instead of g.
    """
    b_mat = np.asarray(b_mat, dtype=float)
    s = np.asarray(s, dtype=float).ravel()
    g = np.asarray(g, dtype=float).ravel()
    if not np.any(s):
        return b_mat
    bs = b_mat @ s
    sbs = float(s @ bs)
    sg = float(s @ g)
    tiny = 1e-14 * max(1.0, float(s @ s)) * max(1.0, float(np.abs(b_mat).max()))
    if not damped:
        if sg >= 0.0:
            return b_mat
        out = b_mat + np.outer(g, g) / sg
        if abs(sbs) > tiny:
            out = out - np.outer(bs, bs) / sbs
        return symmetrize(out)
    if sg <= (1.0 - xi) * sbs:
        psi = 1.0
    else:
        denom = sbs - sg
        psi = xi * sbs / denom if abs(denom) > tiny else 0.0
    r = psi * g + (1.0 - psi) * bs
    sr = float(s @ r)
    out = b_mat.copy()
    if abs(sbs) > tiny:
        out = out - np.outer(bs, bs) / sbs
    if sr < -tiny:
        out = out + np.outer(r, r) / sr
    return symmetrize(out)


def damping_interpolant(b_mat, s, g, xi):
    """The vector r used by the damped update (for contract checks)."""
    bs = np.asarray(b_mat) @ np.asarray(s)
    sbs = float(np.asarray(s) @ bs)
    sg = float(np.asarray(s) @ np.asarray(g))
    if sg <= (1.0 - xi) * sbs:
        psi = 1.0
    else:
        denom = sbs - sg
        psi = xi * sbs / denom if abs(denom) > 1e-300 else 0.0
    return psi * np.asarray(g) + (1.0 - psi) * bs


def _clamp_nsd(mat):
    """Project a symmetric matrix onto the NSD cone (eigenvalue clip)."""
    vals, vecs = np.linalg.eigh(symmetrize(mat))
    vals = np.minimum(vals, 0.0)
    return _einsum("...ik,...k,...jk->...ij", vecs, vals, vecs)


@dataclass
class QuasiNewtonState:
    """Per-site curvature estimates over the extended coordinate eta.

    For the mean-only family eta is the marginal mean (length D); for the
    variational/cavity families eta stacks the mean with the fully
    vectorised marginal covariance (length D + D^2). B stays NSD throughout,
    enforced by the curvature check or damping.
    """

    b_mat: np.ndarray  # (N, E, E)
    eta: np.ndarray  # (N, E)
    grad: np.ndarray  # (N, E)
    initialized: np.ndarray  # (N,) bool

    @classmethod
    def alloc(cls, n_sites, eta_dim):
        return cls(
            b_mat=np.tile(-np.eye(eta_dim), (n_sites, 1, 1)),
            eta=np.zeros((n_sites, eta_dim)),
            grad=np.zeros((n_sites, eta_dim)),
            initialized=np.zeros(n_sites, dtype=bool),
        )

    def copy(self):
        return QuasiNewtonState(
            self.b_mat.copy(), self.eta.copy(), self.grad.copy(), self.initialized.copy()
        )


def qn_eta_dim(family, d):
    return d if family == "newton-qn" else d + d * d


def _qn_eta_grad_seed(family, means, covs, y, lik, quad, alpha, sites):
    """Per-family (eta, grad over eta, exact seed Hessian, extras)."""
    n, d = means.shape
    if family == "newton-qn":
        jac = lik.dlog_density(y, means)
        seed = symmetrize(lik.d2log_density(y, means))
        return means.copy(), jac, seed, {}
    if family == "vi-qn":
        f = quad_nodes(means, covs, quad)
        yb = y[:, None, :]
        w = quad.weights
        g_mean = _einsum("q,nqd->nd", w, lik.dlog_density(yb, f))
        e_hess = symmetrize(_einsum("q,nqde->nde", w, lik.d2log_density(yb, f)))
        eta = np.concatenate([means, covs.reshape(n, d * d)], axis=1)
        grad = np.concatenate([g_mean, 0.5 * e_hess.reshape(n, d * d)], axis=1)
        return eta, grad, e_hess, {}
    if family == "pl-qn":
        f = quad_nodes(means, covs, quad)
        w = quad.weights
        e_nu, d_e_nu, omega = slr_statistics(means, covs, lik, quad)
        omega_inv = batch_inv_psd(omega)
        resid = y - e_nu
        g_mean = _einsum("njd,njk,nk->nd", d_e_nu, omega_inv, resid)
        # Covariance gradient of E_q[nu] by the covariance-derivative identity.
        d2nu = _einsum("q,nqjde->njde", w, lik.d2mean(f))
        g_cov = 0.5 * _einsum("njde,njk,nk->nde", d2nu, omega_inv, resid)
        eta = np.concatenate([means, covs.reshape(n, d * d)], axis=1)
        grad = np.concatenate([g_mean, g_cov.reshape(n, d * d)], axis=1)
        seed = symmetrize(-_einsum("njd,njk,nke->nde", d_e_nu, omega_inv, d_e_nu))
        return eta, grad, seed, {}
    if family == "pep-qn":
        cav_means, cav_covs, ok = cavities(means, covs, sites, alpha)
        log_e, grad_loge, hess_raw, t_ok = _tilted_moments(
            cav_means, cav_covs, y, lik, alpha, quad
        )
        ok = ok & t_ok
        g_mean = grad_loge / alpha
        g_cov = 0.5 * hess_raw / alpha
        exact_hess = (hess_raw - _einsum("nd,ne->nde", grad_loge, grad_loge)) / alpha
        eta = np.concatenate([cav_means, cav_covs.reshape(n, d * d)], axis=1)
        grad = np.concatenate([g_mean, g_cov.reshape(n, d * d)], axis=1)
        extras = {
            "cav_means": cav_means,
            "cav_covs": cav_covs,
            "cav_prec": batch_inv_psd(cav_covs),
            "ok": ok,
        }
        return eta, grad, symmetrize(exact_hess), extras
    raise ModeUnsupported(f"unknown quasi-Newton family {family!r}")


def qn_site(family, state, means, covs, y, lik, quad, cfg, sites=None):
    """One quasi-Newton sweep for all sites.

    Updates `state` in place: applies the (damped) rank-two update using
    differences of eta and its gradient since the previous sweep, seeding
    first-time sites with the family's exact (NSD-clamped) Hessian. Returns
    (J, H, update_means, ok_mask).
    """
    n, d = means.shape
    y = lik.coerce_y(y)
    eta, grad, seed, extras = _qn_eta_grad_seed(
        family, means, covs, y, lik, quad, cfg.alpha, sites
    )
    e = eta.shape[1]
    ok = extras.get("ok", np.ones(n, dtype=bool))
    for i in range(n):
        if not ok[i]:
            continue
        if state.initialized[i]:
            s = eta[i] - state.eta[i]
            g = grad[i] - state.grad[i]
            state.b_mat[i] = bfgs_update(state.b_mat[i], s, g, damped=cfg.damped, xi=cfg.xi)
        else:
            b0 = -np.eye(e)
            b0[:d, :d] = _clamp_nsd(seed[i])
            state.b_mat[i] = b0
            state.initialized[i] = True
        state.eta[i] = eta[i]
        state.grad[i] = grad[i]
    top = state.b_mat[:, :d, :d]
    if family == "pep-qn":
        jac, hess, scale_ok = _scale_through(
            top, extras["cav_prec"], cfg.alpha, grad[:, :d], top
        )
        ok = ok & scale_ok
        update_means = extras["cav_means"]
    else:
        jac = grad[:, :d]
        hess = symmetrize(top.copy())
        update_means = means
    return jac, hess, update_means, ok


# --------------------------------------------------------------------------
# Riemannian retraction and the damped local update
# --------------------------------------------------------------------------


def riemann_correction(h_raw, site_cov, rho):
    """Retraction term keeping natural-parameter steps near the PSD cone.

    H' = H - (rho/2) G site_cov G with G = site_cov^{-1} + H. At a
    stationary site (G = 0) the correction vanishes.
    """
    h_raw, single = _as_batch(h_raw, 2)
    site_cov, _ = _as_batch(site_cov, 2)
    site_prec = batch_inv_psd(site_cov)
    g_mat = site_prec + h_raw
    corr = h_raw - 0.5 * rho * _einsum("nde,nef,nfg->ndg", g_mat, site_cov, g_mat)
    return _maybe_squeeze(single, symmetrize(corr))


def apply_local_update(sites, jac, hess, means, rho, psd_guard="none", eps=0.01, mask=None):
    """Damped natural-parameter site update with optional PSD guarding.

    Returns (new_sites, stats) where stats counts heuristic projections,
    rejections, and residual violations (site-precision eigenvalues below
    -1e-10 after guarding). With guard `reject`, offending sites keep their
    previous parameters.
    """
    jac, _ = _as_batch(jac, 1)
    hess, _ = _as_batch(hess, 2)
    means, _ = _as_batch(means, 1)
    lam2_new = (1.0 - rho) * sites.lam2 + rho * 0.5 * hess
    lam1_new = (1.0 - rho) * sites.lam1 + rho * (
        jac - _einsum("nde,ne->nd", hess, means)
    )
    if mask is not None:
        lam1_new[~mask] = sites.lam1[~mask]
        lam2_new[~mask] = sites.lam2[~mask]
    stats = {"projected": 0, "rejected": 0, "violations": 0}
    prec = -2.0 * lam2_new
    min_eigs = np.linalg.eigvalsh(prec)[..., 0]
    bad = min_eigs < -_GUARD_TOL
    if psd_guard == "heuristic" and np.any(bad):
        # Project the offending Hessians onto diagonal NSD and redo the
        # whole update from them, so both natural parameters stay mutually
        # consistent (an indefinite H fed only into lam1 makes the site
        # mean run away).
        hess_fixed = -heuristic_psd_projection(-hess[bad], eps=eps)
        lam2_new[bad] = (1.0 - rho) * sites.lam2[bad] + rho * 0.5 * hess_fixed
        lam1_new[bad] = (1.0 - rho) * sites.lam1[bad] + rho * (
            jac[bad] - _einsum("nde,ne->nd", hess_fixed, means[bad])
        )
        stats["projected"] = int(bad.sum())
    elif psd_guard == "reject" and np.any(bad):
        lam1_new[bad] = sites.lam1[bad]
        lam2_new[bad] = sites.lam2[bad]
        stats["rejected"] = int(bad.sum())
    final_min = np.linalg.eigvalsh(-2.0 * lam2_new)[..., 0]
    stats["violations"] = int((final_min < -PSD_VIOLATION_TOL).sum())
    return SiteParams(lam1=lam1_new, lam2=lam2_new, log_z=sites.log_z.copy()), stats


# --------------------------------------------------------------------------
# Rule dispatcher used by the backends
# --------------------------------------------------------------------------


@dataclass
class SweepResult:
    jac: np.ndarray
    hess: np.ndarray
    update_means: np.ndarray
    mask: np.ndarray
    log_z: np.ndarray = None


def site_sweep(cfg, lik, y, means, covs, sites, qn_state=None):
    """Evaluate the configured rule at every site against frozen marginals."""
    base = cfg.base_rule
    quad = cfg.quadrature_for(lik.latent_dim)
    y = lik.coerce_y(y)
    n = means.shape[0]
    ok = np.ones(n, dtype=bool)
    log_z = None
    update_means = means
    if base == "newton":
        jac, hess = newton_site(means, y, lik)
    elif base == "taylor":
        jac, hess = taylor_site(means, y, lik)
    elif base in ("gn", "partial-gn", "generalised-gn"):
        jac, hess = gn_site(means, y, lik, mode=base)
    elif base == "vi":
        jac, hess = vi_site(means, covs, y, lik, quad)
    elif base in ("vgn", "partial-vgn", "vggn"):
        jac, hess = vgn_site(means, covs, y, lik, quad, mode=base)
    elif base == "pl":
        jac, hess = pl_site(means, covs, y, lik, quad)
    elif base == "pl2":
        jac, hess = pl2_site(means, covs, y, lik, quad, mode="full")
    elif base == "pep":
        cav_means, cav_covs, ok = cavities(means, covs, sites, cfg.alpha)
        site_means, site_covs = sites.mean_cov()
        jac, hess, log_z, pep_ok = pep_site(
            (cav_means, cav_covs), y, lik, cfg.alpha, quad, site=(site_means, site_covs)
        )
        ok = ok & pep_ok
        update_means = cav_means
    elif base in QN_RULES:
        jac, hess, update_means, ok = qn_site(
            base, qn_state, means, covs, y, lik, quad, cfg, sites=sites
        )
    elif base in ("newton-riemann", "vi-riemann", "pep-riemann"):
        _, site_covs = sites.mean_cov()
        if base == "newton-riemann":
            jac, hess_raw = newton_site(means, y, lik)
        elif base == "vi-riemann":
            jac, hess_raw = vi_site(means, covs, y, lik, quad)
        else:
            cav_means, cav_covs, ok = cavities(means, covs, sites, cfg.alpha)
            site_means, site_covs = sites.mean_cov()
            jac, hess_raw, log_z, pep_ok = pep_site(
                (cav_means, cav_covs), y, lik, cfg.alpha, quad, site=(site_means, site_covs)
            )
            ok = ok & pep_ok
            update_means = cav_means
        hess = riemann_correction(hess_raw, site_covs, cfg.rho)
    else:
        raise ModeUnsupported(f"rule {base!r} is not implemented")
    return SweepResult(jac=jac, hess=hess, update_means=update_means, mask=ok, log_z=log_z)
