"""Global conjugate updates over three model classes.

DenseModel solves the full Gram system, SparseModel works through inducing
variables with optional minibatch site updates, and MarkovModel runs a
Kalman filter and Rauch-Tung-Striebel smoother over the state-space form of
the kernel. Each backend exposes the same loop: read off posterior
marginals, let the configured rule refresh the sites, repeat until the
energy settles. A fitted model is immutable for prediction purposes.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from functools import partial

_einsum = partial(np.einsum, optimize=True)
import scipy.linalg

from .energies import energy
from .exceptions import NonPSDCavity, NotPSD
from .kernels import discretize
from .likelihoods import stack_observations
from .linalg import batch_inv_psd, cholesky_psd, symmetrize
from .rules import (
    QN_RULES,
    QuasiNewtonState,
    SiteParams,
    apply_local_update,
    qn_eta_dim,
    site_sweep,
)

_RIEMANN_RULES = ("newton-riemann", "vi-riemann", "pep-riemann")


@dataclass
class FitTrace:
    """Per-sweep energy and stability record of one fit."""

    energies: list = field(default_factory=list)
    stats: list = field(default_factory=list)
    converged: bool = False
    stopped_early: bool = False
    failure: str = ""

    @property
    def n_sweeps(self):
        return len(self.energies)

    @property
    def final_energy(self):
        return self.energies[-1] if self.energies else np.nan


def _chol_small(mat):
    """Cholesky for small innovation/predictive covariances; falls back to
    the escalating-jitter path only when the plain factorisation fails."""
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        chol, _ = cholesky_psd(mat)
        return chol


def _extract_marginals(mean_full, cov_full, n, d):
    means = mean_full.reshape(n, d)
    covs = np.empty((n, d, d))
    for i in range(n):
        covs[i] = cov_full[i * d : (i + 1) * d, i * d : (i + 1) * d]
    return means, covs


class _FitLoopMixin:
    """Shared fit loop: marginals -> energy -> rule sweep -> site update."""

    def _posterior_marginals(self):
        raise NotImplementedError

    def _energy(self, cfg, means, covs, log_z, quad):
        return energy(
            cfg.energy_kind,
            self.likelihood,
            self.y,
            means,
            covs,
            self.sites,
            log_z,
            quad,
            alpha=cfg.alpha,
        )

    def fit(self, cfg, max_iters=100, rtol=1e-6, callback=None):
        """Iterate sweeps until |dE| <= rtol (1 + |E|) or max_iters.

        Rules based on the Riemannian retraction keep running past occasional
        non-PSD failures by restoring the best-energy stable state; other
        rules propagate the failure.
        """
        lik = self.likelihood
        quad = cfg.quadrature_for(lik.latent_dim)
        snapshot_on_failure = cfg.base_rule in _RIEMANN_RULES
        qn_state = None
        if cfg.base_rule in QN_RULES:
            qn_state = QuasiNewtonState.alloc(self.n_sites, qn_eta_dim(cfg.base_rule, lik.latent_dim))
        trace = FitTrace()
        best_sites, best_energy = None, np.inf
        prev_e = None
        for sweep in range(max_iters):
            tic = time.perf_counter()
            try:
                means, covs, log_z = self._posterior_marginals()
                e = self._energy(cfg, means, covs, log_z, quad)
                if not np.isfinite(e):
                    raise NotPSD("energy is not finite")
            except (NotPSD, NonPSDCavity, np.linalg.LinAlgError) as err:
                trace.stopped_early = True
                trace.failure = f"{type(err).__name__}: {err}"
                if snapshot_on_failure and best_sites is not None:
                    self.sites = best_sites
                    return trace
                raise
            row = {"iteration": sweep, "energy": e, "wall_ms": 0.0}
            if e < best_energy:
                best_energy = e
                best_sites = self.sites.copy()
            done = prev_e is not None and abs(e - prev_e) <= rtol * (1.0 + abs(e))
            if not done:
                prev_e = e
                sweep_result = site_sweep(cfg, lik, self.y, means, covs, self.sites, qn_state)
                self.sites, stats = apply_local_update(
                    self.sites,
                    sweep_result.jac,
                    sweep_result.hess,
                    sweep_result.update_means,
                    cfg.rho,
                    psd_guard=cfg.psd_guard,
                    eps=cfg.heuristic_eps,
                    mask=sweep_result.mask,
                )
                if sweep_result.log_z is not None:
                    self.sites.log_z = np.where(
                        sweep_result.mask, sweep_result.log_z, self.sites.log_z
                    )
                row.update(stats)
                row["skipped"] = int((~sweep_result.mask).sum())
            else:
                row.update({"projected": 0, "rejected": 0, "violations": 0, "skipped": 0})
            row["wall_ms"] = 1e3 * (time.perf_counter() - tic)
            if callback is not None:
                row.update(callback(self, means, covs) or {})
            trace.energies.append(e)
            trace.stats.append(row)
            if done:
                trace.converged = True
                break
        return trace


class DenseModel(_FitLoopMixin):
    """Full-Gram Gaussian-process model over N sites of latent width D."""

    def __init__(self, kernel, likelihood, x, y, site_variance=1e6):
        if kernel.latent_dim != likelihood.latent_dim:
            raise ValueError("kernel and likelihood latent dimensions differ")
        self.kernel = kernel
        self.likelihood = likelihood
        self.x = np.asarray(x, dtype=float)
        if self.x.ndim == 1:
            self.x = self.x[:, None]
        self.n_sites = self.x.shape[0]
        self.y = stack_observations(likelihood, y, self.n_sites)
        self.gram = kernel.gram(self.x)
        self.latent_dim = likelihood.latent_dim
        self.sites = SiteParams.flat(self.n_sites, self.latent_dim, variance=site_variance)

    def posterior(self):
        """Stacked posterior (mean, cov, logZ) via the stabilised solve
        m = K (K + Cbar)^{-1} mbar with the site moments playing the data role."""
        site_means, site_covs = self.sites.mean_cov()
        n, d = self.n_sites, self.latent_dim
        cbar = np.zeros_like(self.gram)
        for i in range(n):
            cbar[i * d : (i + 1) * d, i * d : (i + 1) * d] = site_covs[i]
        mbar = site_means.reshape(-1)
        a_mat = self.gram + cbar
        chol, _ = cholesky_psd(a_mat)
        solve = lambda rhs: scipy.linalg.cho_solve((chol, True), rhs, check_finite=False)
        mean = self.gram @ solve(mbar)
        cov = symmetrize(self.gram - self.gram @ solve(self.gram))
        alpha = scipy.linalg.solve_triangular(chol, mbar, lower=True)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        log_z = -0.5 * (mbar.size * np.log(2.0 * np.pi) + logdet + alpha @ alpha)
        return mean, cov, log_z

    def _posterior_marginals(self):
        mean, cov, log_z = self.posterior()
        means, covs = _extract_marginals(mean, cov, self.n_sites, self.latent_dim)
        return means, covs, log_z

    def marginals(self):
        return self._posterior_marginals()

    def energy_value(self, cfg):
        means, covs, log_z = self._posterior_marginals()
        quad = cfg.quadrature_for(self.likelihood.latent_dim)
        if cfg.energy_kind == "le2":
            mean, _, _ = self.posterior()
            return energy(
                "le2",
                self.likelihood,
                self.y,
                means,
                covs,
                self.sites,
                log_z,
                quad,
                alpha=cfg.alpha,
                prior_gram=self.gram,
                full_mean=mean,
            )
        return self._energy(cfg, means, covs, log_z, quad)

    def predict(self, x_star):
        """Latent predictive (means, covs) per test input by conditioning."""
        x_star = np.asarray(x_star, dtype=float)
        if x_star.ndim == 1:
            x_star = x_star[:, None]
        site_means, site_covs = self.sites.mean_cov()
        n, d = self.n_sites, self.latent_dim
        cbar = np.zeros_like(self.gram)
        for i in range(n):
            cbar[i * d : (i + 1) * d, i * d : (i + 1) * d] = site_covs[i]
        mbar = site_means.reshape(-1)
        chol, _ = cholesky_psd(self.gram + cbar)
        solve = lambda rhs: scipy.linalg.cho_solve((chol, True), rhs, check_finite=False)
        k_star = self.kernel.gram(x_star, self.x)
        mean = k_star @ solve(mbar)
        cov = self.kernel.gram(x_star) - k_star @ solve(k_star.T)
        return _extract_marginals(mean, symmetrize(cov), x_star.shape[0], d)


class MarkovModel(_FitLoopMixin):
    """State-space model over strictly increasing 1-D inputs; O(N) sweeps."""

    def __init__(self, kernel, likelihood, x, y, site_variance=1e6):
        if kernel.latent_dim != likelihood.latent_dim:
            raise ValueError("kernel and likelihood latent dimensions differ")
        x = np.asarray(x, dtype=float).reshape(-1)
        if np.any(np.diff(x) <= 0):
            raise ValueError("Markov backend needs strictly increasing inputs")
        self.kernel = kernel
        self.likelihood = likelihood
        self.x = x
        self.n_sites = x.size
        self.y = stack_observations(likelihood, y, self.n_sites)
        self.ss = kernel.to_state_space()
        self.latent_dim = likelihood.latent_dim
        self.sites = SiteParams.flat(self.n_sites, self.latent_dim, variance=site_variance)
        self._trans = self._transitions(x)

    def _transitions(self, x):
        """Per-step (A, Q); repeated step sizes share one matrix exponential."""
        steps = np.diff(x)
        cache = {}
        trans = [None]  # no transition into the first input
        for dt in steps:
            key = round(float(dt), 12)
            if key not in cache:
                cache[key] = discretize(self.ss, dt)
            trans.append(cache[key])
        return trans

    def kalman_rts(self, site_means=None, site_covs=None, has_site=None, trans=None):
        """Forward filter + backward smoother over the site pseudo-observations.

        Returns (means, covs, logZ, state_means, state_covs) with the
        per-site latent marginals f_n = H fbar_n. logZ accumulates the
        innovation log densities, matching the dense Gaussian partition.
        """
        if site_means is None:
            site_means, site_covs = self.sites.mean_cov()
        trans = self._trans if trans is None else trans
        n = len(trans)
        has_site = np.ones(n, dtype=bool) if has_site is None else has_site
        ss = self.ss
        s = ss.state_dim
        h = ss.H
        filt_means = np.empty((n, s))
        filt_covs = np.empty((n, s, s))
        log_z = 0.0
        site_idx = 0
        mean, cov = np.zeros(s), ss.P0.copy()
        log2pi = np.log(2.0 * np.pi)
        for i in range(n):
            if i > 0:
                a, q = trans[i]
                mean = a @ mean
                cov = a @ cov @ a.T + q
                cov = 0.5 * (cov + cov.T)
            if has_site[i]:
                obs_mean = site_means[site_idx]
                obs_cov = site_covs[site_idx]
                cross = cov @ h.T  # (S, D)
                innov_cov = h @ cross + obs_cov
                chol = _chol_small(innov_cov)
                resid = obs_mean - h @ mean
                alpha = np.linalg.solve(chol, resid)
                log_z += -0.5 * (
                    resid.size * log2pi + 2.0 * np.sum(np.log(np.diag(chol))) + alpha @ alpha
                )
                gain = np.linalg.solve(chol.T, np.linalg.solve(chol, cross.T)).T
                mean = mean + gain @ resid
                cov = cov - gain @ innov_cov @ gain.T
                cov = 0.5 * (cov + cov.T)
                site_idx += 1
            filt_means[i] = mean
            filt_covs[i] = cov
        smooth_means = filt_means.copy()
        smooth_covs = filt_covs.copy()
        for i in range(n - 2, -1, -1):
            a, q = trans[i + 1]
            pred_cov = a @ filt_covs[i] @ a.T + q
            pred_cov = 0.5 * (pred_cov + pred_cov.T)
            chol = _chol_small(pred_cov)
            gain = np.linalg.solve(chol.T, np.linalg.solve(chol, a @ filt_covs[i])).T
            smooth_means[i] = filt_means[i] + gain @ (smooth_means[i + 1] - a @ filt_means[i])
            sc = filt_covs[i] + gain @ (smooth_covs[i + 1] - pred_cov) @ gain.T
            smooth_covs[i] = 0.5 * (sc + sc.T)
        means = smooth_means @ h.T
        covs = _einsum("ds,nse,ke->ndk", h, smooth_covs, h)
        return means, covs, log_z, smooth_means, smooth_covs

    def _posterior_marginals(self):
        means, covs, log_z, _, _ = self.kalman_rts()
        return means, covs, log_z

    def marginals(self):
        return self._posterior_marginals()

    def energy_value(self, cfg):
        means, covs, log_z = self._posterior_marginals()
        quad = cfg.quadrature_for(self.likelihood.latent_dim)
        return self._energy(cfg, means, covs, log_z, quad)

    def predict(self, x_star):
        """Marginals at arbitrary inputs by smoothing over a merged grid."""
        x_star = np.asarray(x_star, dtype=float).reshape(-1)
        grid = np.unique(np.concatenate([self.x, x_star]))
        has_site = np.isin(grid, self.x)
        trans = [None]
        for dt in np.diff(grid):
            trans.append(discretize(self.ss, dt) if dt > 0 else None)
        site_means, site_covs = self.sites.mean_cov()
        means, covs, _, _, _ = self.kalman_rts(
            site_means=site_means, site_covs=site_covs, has_site=has_site, trans=trans
        )
        pos = np.searchsorted(grid, x_star)
        return means[pos], covs[pos]


class SparseModel(_FitLoopMixin):
    """Inducing-point model; sites live per datapoint, the posterior on u."""

    def __init__(self, kernel, likelihood, x, y, z, site_variance=1e6):
        if kernel.latent_dim != likelihood.latent_dim:
            raise ValueError("kernel and likelihood latent dimensions differ")
        self.kernel = kernel
        self.likelihood = likelihood
        self.x = np.asarray(x, dtype=float)
        if self.x.ndim == 1:
            self.x = self.x[:, None]
        self.z = np.asarray(z, dtype=float)
        if self.z.ndim == 1:
            self.z = self.z[:, None]
        if self.z.shape[0] > self.x.shape[0]:
            raise ValueError("need at most as many inducing inputs as data")
        self.n_sites = self.x.shape[0]
        self.y = stack_observations(likelihood, y, self.n_sites)
        self.latent_dim = likelihood.latent_dim
        d = self.latent_dim
        self.k_uu = kernel.gram(self.z)
        k_fu_flat = kernel.gram(self.x, self.z)  # (N D, M D)
        self.k_fu = k_fu_flat.reshape(self.n_sites, d, -1)
        chol_uu, _ = cholesky_psd(self.k_uu, jitter_rel=1e-10)
        self.w_fu = np.empty_like(self.k_fu)
        for i in range(self.n_sites):
            self.w_fu[i] = scipy.linalg.cho_solve((chol_uu, True), self.k_fu[i].T).T
        self.k_nn = np.empty((self.n_sites, d, d))
        for i in range(self.n_sites):
            block = kernel.gram(self.x[i : i + 1])
            self.k_nn[i] = block
        self.sites = SiteParams.flat(self.n_sites, d, variance=site_variance)

    def _site_naturals_u(self):
        lam1_u = _einsum("ndm,nd->m", self.w_fu, self.sites.lam1)
        lam2_u = _einsum("ndm,nde,nek->mk", self.w_fu, self.sites.lam2, self.w_fu)
        return lam1_u, symmetrize(lam2_u)

    def inducing_posterior(self):
        """(m_u, C_u, logZ) through the site-projected conjugate update."""
        lam1_u, lam2_u = self._site_naturals_u()
        cbar_u = -0.5 * np.linalg.inv(lam2_u)
        cbar_u = symmetrize(cbar_u)
        mbar_u = cbar_u @ lam1_u
        a_mat = self.k_uu + cbar_u
        chol, _ = cholesky_psd(a_mat)
        solve = lambda rhs: scipy.linalg.cho_solve((chol, True), rhs, check_finite=False)
        m_u = self.k_uu @ solve(mbar_u)
        c_u = symmetrize(self.k_uu - self.k_uu @ solve(self.k_uu))
        alpha = scipy.linalg.solve_triangular(chol, mbar_u, lower=True)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        log_z = -0.5 * (mbar_u.size * np.log(2.0 * np.pi) + logdet + alpha @ alpha)
        return m_u, c_u, log_z

    def _marginals_from(self, m_u, c_u, idx=None):
        idx = np.arange(self.n_sites) if idx is None else idx
        w = self.w_fu[idx]
        means = _einsum("ndm,m->nd", w, m_u)
        covs = (
            self.k_nn[idx]
            - _einsum("ndm,nem->nde", w, self.k_fu[idx])
            + _einsum("ndm,mk,nek->nde", w, c_u, w)
        )
        return means, symmetrize(covs)

    def _posterior_marginals(self):
        m_u, c_u, log_z = self.inducing_posterior()
        means, covs = self._marginals_from(m_u, c_u)
        return means, covs, log_z

    def marginals(self):
        return self._posterior_marginals()

    def sparse_step(self, cfg, batch=None, qn_state=None):
        """One sweep touching only the sites in `batch` (all by default)."""
        batch = np.arange(self.n_sites) if batch is None else np.asarray(batch)
        m_u, c_u, _ = self.inducing_posterior()
        means, covs = self._marginals_from(m_u, c_u, batch)
        sub_sites = SiteParams(
            self.sites.lam1[batch], self.sites.lam2[batch], self.sites.log_z[batch]
        )
        sub_state = qn_state
        partial_batch = qn_state is not None and batch.size != self.n_sites
        if partial_batch:
            sub_state = QuasiNewtonState(
                qn_state.b_mat[batch].copy(),
                qn_state.eta[batch].copy(),
                qn_state.grad[batch].copy(),
                qn_state.initialized[batch].copy(),
            )
        sweep = site_sweep(
            cfg, self.likelihood, self.y[batch], means, covs, sub_sites, sub_state
        )
        if partial_batch:
            qn_state.b_mat[batch] = sub_state.b_mat
            qn_state.eta[batch] = sub_state.eta
            qn_state.grad[batch] = sub_state.grad
            qn_state.initialized[batch] = sub_state.initialized
        new_sub, stats = apply_local_update(
            sub_sites,
            sweep.jac,
            sweep.hess,
            sweep.update_means,
            cfg.rho,
            psd_guard=cfg.psd_guard,
            eps=cfg.heuristic_eps,
            mask=sweep.mask,
        )
        self.sites.lam1[batch] = new_sub.lam1
        self.sites.lam2[batch] = new_sub.lam2
        if sweep.log_z is not None:
            self.sites.log_z[batch] = np.where(sweep.mask, sweep.log_z, sub_sites.log_z)
        return (m_u, c_u), stats

    def energy_value(self, cfg, shared_cavity=False):
        means, covs, log_z = self._posterior_marginals()
        quad = cfg.quadrature_for(self.likelihood.latent_dim)
        if cfg.energy_kind == "pepe" and shared_cavity:
            return self._shared_cavity_pepe(cfg, quad, log_z)
        return self._energy(cfg, means, covs, log_z, quad)

    def _shared_cavity_pepe(self, cfg, quad, log_z):
        """Stochastic-EP energy variant: every site shares the cavity built
        from the (N-1)/N power of the aggregated likelihood factor."""
        from .rules import _log_gaussian_power_expectation, _tilted_moments

        lam1_u, lam2_u = self._site_naturals_u()
        chol_uu, _ = cholesky_psd(self.k_uu, jitter_rel=1e-10)
        prior_prec = scipy.linalg.cho_solve((chol_uu, True), np.eye(self.k_uu.shape[0]))
        frac = 1.0 - cfg.alpha / self.n_sites
        cav_prec_u = symmetrize(prior_prec + frac * (-2.0 * lam2_u))
        chol_cav, _ = cholesky_psd(cav_prec_u)
        c_cav = scipy.linalg.cho_solve((chol_cav, True), np.eye(cav_prec_u.shape[0]))
        m_cav = c_cav @ (frac * lam1_u)
        cav_means, cav_covs = self._marginals_from(m_cav, symmetrize(c_cav))
        site_means, site_covs = self.sites.mean_cov()
        log_e, _, _, ok = _tilted_moments(
            cav_means, cav_covs, self.y, self.likelihood, cfg.alpha, quad
        )
        if not np.all(ok):
            raise NonPSDCavity("tilted expectation non-positive in shared-cavity energy")
        log_en = _log_gaussian_power_expectation(
            cav_means, cav_covs, site_means, site_covs, cfg.alpha
        )
        log_z_sites = (log_e - log_en) / cfg.alpha
        return float(-log_z_sites.sum() - log_z)

    def fit(self, cfg, max_iters=100, rtol=1e-6, batch_size=None, seed=0, callback=None):
        """Sweep with optional stochastic minibatches of site updates."""
        rng = np.random.default_rng(seed)
        quad = cfg.quadrature_for(self.likelihood.latent_dim)
        qn_state = None
        if cfg.base_rule in QN_RULES:
            qn_state = QuasiNewtonState.alloc(
                self.n_sites, qn_eta_dim(cfg.base_rule, self.likelihood.latent_dim)
            )
        trace = FitTrace()
        prev_e = None
        for sweep in range(max_iters):
            tic = time.perf_counter()
            means, covs, log_z = self._posterior_marginals()
            e = self._energy(cfg, means, covs, log_z, quad)
            row = {"iteration": sweep, "energy": e}
            done = prev_e is not None and abs(e - prev_e) <= rtol * (1.0 + abs(e))
            if not done:
                prev_e = e
                if batch_size is None or batch_size >= self.n_sites:
                    batch = None
                else:
                    batch = rng.choice(self.n_sites, size=batch_size, replace=False)
                sub_state = qn_state  # per-site state is indexed inside sparse_step
                _, stats = self.sparse_step(cfg, batch=batch, qn_state=sub_state)
                row.update(stats)
            else:
                row.update({"projected": 0, "rejected": 0, "violations": 0})
            row["wall_ms"] = 1e3 * (time.perf_counter() - tic)
            if callback is not None:
                row.update(callback(self, means, covs) or {})
            trace.energies.append(e)
            trace.stats.append(row)
            if done:
                trace.converged = True
                break
        return trace

    def predict(self, x_star):
        x_star = np.asarray(x_star, dtype=float)
        if x_star.ndim == 1:
            x_star = x_star[:, None]
        m_u, c_u, _ = self.inducing_posterior()
        d = self.latent_dim
        k_su = self.kernel.gram(x_star, self.z).reshape(x_star.shape[0], d, -1)
        chol_uu, _ = cholesky_psd(self.k_uu, jitter_rel=1e-10)
        w = np.empty_like(k_su)
        for i in range(x_star.shape[0]):
            w[i] = scipy.linalg.cho_solve((chol_uu, True), k_su[i].T).T
        means = _einsum("ndm,m->nd", w, m_u)
        covs = np.empty((x_star.shape[0], d, d))
        for i in range(x_star.shape[0]):
            k_ss = self.kernel.gram(x_star[i : i + 1])
            covs[i] = k_ss - w[i] @ k_su[i].T + w[i] @ c_u @ w[i].T
        return means, symmetrize(covs)
