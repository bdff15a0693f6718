"""Observation models: log densities, conditional moments, residuals.

Every likelihood exposes log p(y|f) with analytic first and second latent
derivatives, the conditional moments nu(f) = E[y|f] and Sigma(f) = Cov[y|f]
with their derivatives, and (for models of the Gaussian-conditional form
log p = log Z(f) - 0.5 V^T V) the log-normaliser pieces needed by the
Gauss-Newton family. All methods broadcast over leading axes: f has trailing
shape (D,), y has trailing shape (Dy,).
"""

from dataclasses import dataclass

import numpy as np

from functools import partial

_einsum = partial(np.einsum, optimize=True)
from scipy.special import gammaln

from .exceptions import DomainError
from .linalg import sym_inv_sqrt, sym_inv_sqrt_directional


def softplus(x):
    """log(1 + exp(x)) with the stable large-|x| branch."""
    x = np.asarray(x, dtype=float)
    return np.logaddexp(0.0, x)


def sigmoid(x):
    """Logistic function, stable on both tails."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus_dd(x):
    """Second derivative of softplus: sigma(x) (1 - sigma(x))."""
    s = sigmoid(x)
    return s * (1.0 - s)


class Likelihood:
    """Base class fixing shapes; subclasses fill in the model specifics."""

    latent_dim = 1
    obs_dim = 1
    gaussian_form = False  # True when log p = log Z(f) - 0.5 |V(f)|^2
    has_cov_gradient = False  # True when Cov[y|f] varies with f

    def _f(self, f):
        f = np.asarray(f, dtype=float)
        if f.ndim == 0 or f.shape[-1] != self.latent_dim:
            if self.latent_dim == 1:
                f = f[..., None]
            else:
                raise ValueError(f"latent trailing dim must be {self.latent_dim}")
        return f

    def _y(self, y):
        y = np.asarray(y, dtype=float)
        if y.ndim == 0 or y.shape[-1] != self.obs_dim:
            if self.obs_dim == 1:
                y = y[..., None]
            else:
                raise ValueError(f"observation trailing dim must be {self.obs_dim}")
        return y

    def coerce_y(self, y):
        """Public shape normaliser: ensure a trailing observation axis."""
        return self._y(y)

    def coerce_f(self, f):
        """Public shape normaliser: ensure a trailing latent axis."""
        return self._f(f)

    # -- log density and latent derivatives ---------------------------------
    def log_density(self, y, f):
        raise NotImplementedError

    def dlog_density(self, y, f):
        raise NotImplementedError

    def d2log_density(self, y, f):
        raise NotImplementedError

    # -- conditional moments and derivatives --------------------------------
    def conditional_mean(self, f):
        raise NotImplementedError

    def conditional_cov(self, f):
        raise NotImplementedError

    def dmean(self, f):
        raise NotImplementedError

    def d2mean(self, f):
        f = self._f(f)
        return np.zeros(f.shape[:-1] + (self.obs_dim, self.latent_dim, self.latent_dim))

    def dcov(self, f):
        f = self._f(f)
        return np.zeros(f.shape[:-1] + (self.obs_dim, self.obs_dim, self.latent_dim))

    # -- Gaussian-form normaliser --------------------------------------------
    def log_normaliser(self, f):
        """log Z(f) = -Dy/2 log 2pi - 1/2 log|Sigma(f)| for Gaussian-form models."""
        f = self._f(f)
        sig = self.conditional_cov(f)
        _, logdet = np.linalg.slogdet(sig)
        return -0.5 * (self.obs_dim * np.log(2.0 * np.pi) + logdet)

    def dlog_normaliser(self, f):
        """Gradient of log Z: -0.5 tr(Sigma^{-1} dSigma/df_k) per latent dim."""
        f = self._f(f)
        sig = self.conditional_cov(f)
        dsig = self.dcov(f)
        sig_inv = np.linalg.inv(sig)
        return -0.5 * _einsum("...ij,...jik->...k", sig_inv, dsig)


class _ConstantCovGaussian(Likelihood):
    """Gaussian-form likelihood with f-independent Cov[y|f].

    Subclasses supply conditional_mean/dmean/d2mean and a constant
    covariance; the log density and its derivatives follow generically:
    grad = dnu^T S^{-1} r and hess = -dnu^T S^{-1} dnu + sum_j (S^{-1} r)_j d2nu_j.
    """

    gaussian_form = True

    def _cov_const(self):
        raise NotImplementedError

    def conditional_cov(self, f):
        f = self._f(f)
        cov = self._cov_const()
        return np.broadcast_to(cov, f.shape[:-1] + cov.shape).copy()

    def log_density(self, y, f):
        y, f = self._y(y), self._f(f)
        r = y - self.conditional_mean(f)
        cov = self._cov_const()
        prec = np.linalg.inv(cov)
        _, logdet = np.linalg.slogdet(cov)
        quad = _einsum("...i,ij,...j->...", r, prec, r)
        return -0.5 * (self.obs_dim * np.log(2.0 * np.pi) + logdet + quad)

    def dlog_density(self, y, f):
        y, f = self._y(y), self._f(f)
        r = y - self.conditional_mean(f)
        prec = np.linalg.inv(self._cov_const())
        return _einsum("...jk,ji,...i->...k", self.dmean(f), prec, r)

    def d2log_density(self, y, f):
        y, f = self._y(y), self._f(f)
        dnu = self.dmean(f)
        prec = np.linalg.inv(self._cov_const())
        gn = -_einsum("...ja,ji,...ib->...ab", dnu, prec, dnu)
        r = y - self.conditional_mean(f)
        wres = _einsum("ij,...j->...i", prec, r)
        return gn + _einsum("...j,...jab->...ab", wres, self.d2mean(f))


@dataclass(frozen=True)
class Gaussian(_ConstantCovGaussian):
    """Homoscedastic Gaussian noise, the conjugate reference model."""

    variance: float = 1.0

    def _cov_const(self):
        return np.array([[self.variance]])

    def conditional_mean(self, f):
        return self._f(f)

    def dmean(self, f):
        f = self._f(f)
        return np.broadcast_to(np.eye(1), f.shape[:-1] + (1, 1)).copy()


@dataclass(frozen=True)
class ProductGaussian(_ConstantCovGaussian):
    """Signal times positive envelope: y ~ N(f1 * softplus(f2), variance)."""

    variance: float = 0.1
    latent_dim = 2

    def _cov_const(self):
        return np.array([[self.variance]])

    def conditional_mean(self, f):
        f = self._f(f)
        return (f[..., 0] * softplus(f[..., 1]))[..., None]

    def dmean(self, f):
        f = self._f(f)
        out = np.empty(f.shape[:-1] + (1, 2))
        out[..., 0, 0] = softplus(f[..., 1])
        out[..., 0, 1] = f[..., 0] * sigmoid(f[..., 1])
        return out

    def d2mean(self, f):
        f = self._f(f)
        out = np.zeros(f.shape[:-1] + (1, 2, 2))
        sp_d = sigmoid(f[..., 1])
        out[..., 0, 0, 1] = sp_d
        out[..., 0, 1, 0] = sp_d
        out[..., 0, 1, 1] = f[..., 0] * softplus_dd(f[..., 1])
        return out


@dataclass(frozen=True)
class HeteroscedasticGaussian(Likelihood):
    """Two latents: y ~ N(f1, softplus(f2)^2); the noise scale is itself inferred."""

    latent_dim = 2
    gaussian_form = True
    has_cov_gradient = True

    def _sd(self, f):
        return softplus(f[..., 1])

    def log_density(self, y, f):
        y, f = self._y(y), self._f(f)
        s = self._sd(f)
        r = y[..., 0] - f[..., 0]
        return -0.5 * np.log(2.0 * np.pi) - np.log(s) - 0.5 * (r / s) ** 2

    def dlog_density(self, y, f):
        y, f = self._y(y), self._f(f)
        s = self._sd(f)
        sp = sigmoid(f[..., 1])
        r = y[..., 0] - f[..., 0]
        out = np.empty(f.shape)
        out[..., 0] = r / s**2
        out[..., 1] = sp / s * ((r / s) ** 2 - 1.0)
        return out

    def d2log_density(self, y, f):
        y, f = self._y(y), self._f(f)
        s = self._sd(f)
        sp = sigmoid(f[..., 1])
        spp = softplus_dd(f[..., 1])
        r = y[..., 0] - f[..., 0]
        out = np.empty(f.shape[:-1] + (2, 2))
        out[..., 0, 0] = -1.0 / s**2
        cross = -2.0 * r * sp / s**3
        out[..., 0, 1] = cross
        out[..., 1, 0] = cross
        out[..., 1, 1] = spp * (r**2 / s**3 - 1.0 / s) + sp**2 * (
            1.0 / s**2 - 3.0 * r**2 / s**4
        )
        return out

    def conditional_mean(self, f):
        f = self._f(f)
        return f[..., :1]

    def conditional_cov(self, f):
        f = self._f(f)
        return (self._sd(f) ** 2)[..., None, None]

    def dmean(self, f):
        f = self._f(f)
        out = np.zeros(f.shape[:-1] + (1, 2))
        out[..., 0, 0] = 1.0
        return out

    def dcov(self, f):
        f = self._f(f)
        out = np.zeros(f.shape[:-1] + (1, 1, 2))
        out[..., 0, 0, 1] = 2.0 * self._sd(f) * sigmoid(f[..., 1])
        return out

    def log_normaliser(self, f):
        f = self._f(f)
        return -0.5 * np.log(2.0 * np.pi) - np.log(self._sd(f))

    def dlog_normaliser(self, f):
        f = self._f(f)
        out = np.zeros(f.shape)
        out[..., 1] = -sigmoid(f[..., 1]) / self._sd(f)
        return out


# Column-major packing of the 3x2 weight field into the latent vector:
# f = [f1, f2, W11, W21, W31, W12, W22, W32].
_GPRN_OUT = 3
_GPRN_IN = 2


@dataclass(frozen=True)
class Gprn(_ConstantCovGaussian):
    """Regression network: y ~ N(W(x) f(x), Sigma) with 8 latent processes."""

    noise_cov: np.ndarray
    latent_dim = _GPRN_IN + _GPRN_IN * _GPRN_OUT
    obs_dim = _GPRN_OUT

    def __post_init__(self):
        cov = np.asarray(self.noise_cov, dtype=float)
        if cov.shape != (_GPRN_OUT, _GPRN_OUT):
            raise ValueError("noise covariance must be 3x3")
        if np.any(np.linalg.eigvalsh(0.5 * (cov + cov.T)) <= 0):
            raise ValueError("noise covariance must be positive definite")
        object.__setattr__(self, "noise_cov", 0.5 * (cov + cov.T))

    def _cov_const(self):
        return self.noise_cov

    @staticmethod
    def _split(f):
        lat = f[..., :_GPRN_IN]
        w = f[..., _GPRN_IN:].reshape(f.shape[:-1] + (_GPRN_IN, _GPRN_OUT))
        return lat, np.swapaxes(w, -1, -2)  # (..., 3, 2)

    def conditional_mean(self, f):
        f = self._f(f)
        lat, w = self._split(f)
        return _einsum("...ji,...i->...j", w, lat)

    def dmean(self, f):
        f = self._f(f)
        lat, w = self._split(f)
        out = np.zeros(f.shape[:-1] + (_GPRN_OUT, self.latent_dim))
        out[..., :, :_GPRN_IN] = w
        for i in range(_GPRN_IN):
            for j in range(_GPRN_OUT):
                out[..., j, _GPRN_IN + i * _GPRN_OUT + j] = lat[..., i]
        return out

    def d2mean(self, f):
        f = self._f(f)
        out = np.zeros(f.shape[:-1] + (_GPRN_OUT, self.latent_dim, self.latent_dim))
        for i in range(_GPRN_IN):
            for j in range(_GPRN_OUT):
                k = _GPRN_IN + i * _GPRN_OUT + j
                out[..., j, i, k] = 1.0
                out[..., j, k, i] = 1.0
        return out


class MaskedGprn(Gprn):
    """Regression network with some output streams unobserved at some sites.

    Masked components carry an inflated noise variance so they contribute
    (up to ~1e-8) no information; their y entries are ignored and should be
    zero-filled. The mask is aligned with the leading (site) axis, so this
    likelihood must be evaluated with site-batched arrays.
    """

    def __init__(self, noise_cov, missing):
        super().__init__(noise_cov=noise_cov)
        missing = np.asarray(missing, dtype=bool)
        if missing.ndim != 2 or missing.shape[1] != _GPRN_OUT:
            raise ValueError("missing mask must have shape (N, 3)")
        covs = np.tile(self.noise_cov, (missing.shape[0], 1, 1))
        idx = np.arange(_GPRN_OUT)
        big = 1e6
        for n in range(missing.shape[0]):
            covs[n, idx[missing[n]], idx[missing[n]]] += big
        object.__setattr__(self, "missing", missing)
        object.__setattr__(self, "_site_cov", covs)
        object.__setattr__(self, "_site_prec", np.linalg.inv(covs))
        sign, logdet = np.linalg.slogdet(covs)
        object.__setattr__(self, "_site_logdet", logdet)

    def _aligned(self, arr, f):
        """Reshape a per-site array to broadcast against f's leading axes."""
        extra = f.ndim - 2  # axes between the site axis and the latent axis
        return arr.reshape(arr.shape[:1] + (1,) * extra + arr.shape[1:])

    def conditional_cov(self, f):
        f = self._f(f)
        cov = self._aligned(self._site_cov, f)
        return np.broadcast_to(cov, f.shape[:-1] + (_GPRN_OUT, _GPRN_OUT)).copy()

    def log_density(self, y, f):
        y, f = self._y(y), self._f(f)
        r = y - self.conditional_mean(f)
        prec = self._aligned(self._site_prec, f)
        quad = _einsum("...i,...ij,...j->...", r, prec, r)
        logdet = self._aligned(self._site_logdet[:, None], f)[..., 0]
        return -0.5 * (_GPRN_OUT * np.log(2.0 * np.pi) + logdet + quad)

    def dlog_density(self, y, f):
        y, f = self._y(y), self._f(f)
        r = y - self.conditional_mean(f)
        prec = self._aligned(self._site_prec, f)
        return _einsum("...jk,...ji,...i->...k", self.dmean(f), prec, r)

    def d2log_density(self, y, f):
        y, f = self._y(y), self._f(f)
        dnu = self.dmean(f)
        prec = self._aligned(self._site_prec, f)
        gn = -_einsum("...ja,...ji,...ib->...ab", dnu, prec, dnu)
        r = y - self.conditional_mean(f)
        wres = _einsum("...ij,...j->...i", prec, r)
        return gn + _einsum("...j,...jab->...ab", wres, self.d2mean(f))


@dataclass(frozen=True)
class Bernoulli(Likelihood):
    """Binary observations with the logistic link: p(y=1|f) = sigma(f)."""

    has_cov_gradient = True

    def _y(self, y):
        y = super()._y(y)
        if not np.all((y == 0.0) | (y == 1.0)):
            raise DomainError("Bernoulli observations must lie in {0, 1}")
        return y

    def log_density(self, y, f):
        y, f = self._y(y), self._f(f)
        return y[..., 0] * f[..., 0] - softplus(f[..., 0])

    def dlog_density(self, y, f):
        y, f = self._y(y), self._f(f)
        return (y[..., 0] - sigmoid(f[..., 0]))[..., None]

    def d2log_density(self, y, f):
        f = self._f(f)
        return -softplus_dd(f[..., 0])[..., None, None]

    def conditional_mean(self, f):
        f = self._f(f)
        return sigmoid(f[..., 0])[..., None]

    def conditional_cov(self, f):
        f = self._f(f)
        p = sigmoid(f[..., 0])
        return (p * (1.0 - p))[..., None, None]

    def dmean(self, f):
        f = self._f(f)
        return softplus_dd(f[..., 0])[..., None, None]

    def d2mean(self, f):
        f = self._f(f)
        p = sigmoid(f[..., 0])
        return (p * (1.0 - p) * (1.0 - 2.0 * p))[..., None, None, None]

    def dcov(self, f):
        f = self._f(f)
        p = sigmoid(f[..., 0])
        return (p * (1.0 - p) * (1.0 - 2.0 * p))[..., None, None, None]


@dataclass(frozen=True)
class Poisson(Likelihood):
    """Count observations with the exponential link: rate = exp(f)."""

    has_cov_gradient = True

    def _y(self, y):
        y = super()._y(y)
        if np.any(y < 0) or not np.all(y == np.round(y)):
            raise DomainError("Poisson observations must be non-negative integers")
        return y

    def log_density(self, y, f):
        y, f = self._y(y), self._f(f)
        return y[..., 0] * f[..., 0] - np.exp(f[..., 0]) - gammaln(y[..., 0] + 1.0)

    def dlog_density(self, y, f):
        y, f = self._y(y), self._f(f)
        return (y[..., 0] - np.exp(f[..., 0]))[..., None]

    def d2log_density(self, y, f):
        f = self._f(f)
        return -np.exp(f[..., 0])[..., None, None]

    def conditional_mean(self, f):
        f = self._f(f)
        return np.exp(f[..., 0])[..., None]

    def conditional_cov(self, f):
        f = self._f(f)
        return np.exp(f[..., 0])[..., None, None]

    def dmean(self, f):
        f = self._f(f)
        return np.exp(f[..., 0])[..., None, None]

    def d2mean(self, f):
        f = self._f(f)
        return np.exp(f[..., 0])[..., None, None, None]

    def dcov(self, f):
        f = self._f(f)
        return np.exp(f[..., 0])[..., None, None, None]


def stack_observations(lik, y, n_sites):
    """Coerce observations to the unambiguous batched shape (N, Dy)."""
    y = np.asarray(y, dtype=float)
    if y.ndim == 1 and lik.obs_dim == 1:
        y = y[:, None]
    if y.shape != (n_sites, lik.obs_dim):
        raise ValueError(f"observations must have shape ({n_sites}, {lik.obs_dim})")
    return y


def conditional_moments(lik, f):
    """Pair (nu(f), Sigma(f)) = (E[y|f], Cov[y|f])."""
    return lik.conditional_mean(f), lik.conditional_cov(f)


@dataclass(frozen=True)
class ResidualDecomposition:
    """Whitened residual V, its Jacobian G, and the normaliser gradient."""

    V: np.ndarray  # (..., Dy)
    G: np.ndarray  # (..., Dy, D)
    logz_grad: np.ndarray  # (..., D) or None for non-Gaussian-form models


def residual_decomposition(lik, y, f):
    """Least-squares pieces of the log density at f.

    For Gaussian-form models V = Sigma^{-1/2}(y - nu) and G is its full
    latent Jacobian, including the derivative of the symmetric inverse
    square root. For other models the generalised form
    G = Sigma^{-1/2} dnu is returned with no normaliser gradient.
    """
    f = lik._f(f)
    y = lik._y(y)
    nu = lik.conditional_mean(f)
    sig = lik.conditional_cov(f)
    a = sym_inv_sqrt(sig)
    resid = np.broadcast_to(y, nu.shape) - nu
    v = _einsum("...ij,...j->...i", a, resid)
    dnu = lik.dmean(f)
    if not lik.gaussian_form:
        return ResidualDecomposition(V=v, G=_einsum("...ij,...jk->...ik", a, dnu), logz_grad=None)
    if not lik.has_cov_gradient:
        g = -_einsum("...ij,...jk->...ik", a, dnu)
        return ResidualDecomposition(V=v, G=g, logz_grad=lik.dlog_normaliser(f))
    da = sym_inv_sqrt_directional(sig, lik.dcov(f))
    g = _einsum("...ijk,...j->...ik", da, resid) - _einsum("...ij,...jk->...ik", a, dnu)
    return ResidualDecomposition(V=v, G=g, logz_grad=lik.dlog_normaliser(f))
