import numpy as np
import pytest

from bnk.exceptions import ModeUnsupported, NonPSDCavity
from bnk.likelihoods import (
    Bernoulli,
    Gaussian,
    Gprn,
    HeteroscedasticGaussian,
    Poisson,
    ProductGaussian,
)
from bnk.quadrature import gauss_hermite, unscented_5
from bnk.rules import (
    GaussianState,
    MethodConfig,
    QuasiNewtonState,
    SiteParams,
    apply_local_update,
    bfgs_update,
    cavity,
    damping_interpolant,
    gn_site,
    newton_site,
    pep_site,
    pl2_site,
    pl_site,
    qn_eta_dim,
    qn_site,
    riemann_correction,
    slr_statistics,
    taylor_site,
    vgn_site,
    vi_site,
)

GPRN_SIGMA = np.array(
    [[0.02, -0.015, -0.005], [-0.015, 0.04, 0.01], [-0.005, 0.01, 0.06]]
)


class ConstantMean(Gaussian):
    """Gaussian observation whose conditional mean ignores the latent."""

    def conditional_mean(self, f):
        f = self._f(f)
        return np.full(f.shape[:-1] + (1,), 0.7)

    def dmean(self, f):
        f = self._f(f)
        return np.zeros(f.shape[:-1] + (1, 1))

    def d2mean(self, f):
        f = self._f(f)
        return np.zeros(f.shape[:-1] + (1, 1, 1))


def all_likelihoods():
    return [
        Gaussian(variance=0.8),
        HeteroscedasticGaussian(),
        ProductGaussian(variance=0.1),
        Gprn(noise_cov=GPRN_SIGMA),
        Bernoulli(),
        Poisson(),
    ]


def random_marginal(lik, rng, scale=0.5):
    d = lik.latent_dim
    m = rng.normal(size=d)
    a = rng.normal(size=(d, d))
    c = scale * (a @ a.T / d + np.eye(d))
    if isinstance(lik, Bernoulli):
        y = np.array([float(rng.integers(0, 2))])
    elif isinstance(lik, Poisson):
        y = np.array([float(rng.poisson(1.0))])
    else:
        y = rng.normal(size=lik.obs_dim)
    return y, m, c


def model_consistent_draw(lik, rng, mean_scale=0.3, cov_scale=0.05):
    """Moderate marginal plus an observation drawn from the model at f = m."""
    d = lik.latent_dim
    m = rng.normal(scale=mean_scale, size=d)
    a = rng.normal(size=(d, d))
    c = cov_scale * (a @ a.T / d + np.eye(d))
    nu = lik.conditional_mean(m)
    sig = lik.conditional_cov(m)
    if isinstance(lik, Bernoulli):
        y = np.array([float(rng.uniform() < nu[0])])
    elif isinstance(lik, Poisson):
        y = np.array([float(rng.poisson(nu[0]))])
    else:
        y = nu + np.linalg.cholesky(sig) @ rng.normal(size=lik.obs_dim)
    return y, m, c


def quad_for(lik):
    return gauss_hermite(lik.latent_dim, 12) if lik.latent_dim <= 3 else unscented_5(lik.latent_dim)


# --------------------------------------------------------------------------
# Newton / Taylor / Gauss-Newton at the mean
# --------------------------------------------------------------------------


def test_newton_site_gaussian():
    jac, hess = newton_site(np.array([1.0]), np.array([3.0]), Gaussian(variance=2.0))
    assert np.allclose(jac, 1.0)
    assert np.allclose(hess, -0.5)


def test_newton_site_bernoulli():
    jac, hess = newton_site(np.array([0.0]), np.array([1.0]), Bernoulli())
    assert np.allclose(jac, 0.5)
    assert np.allclose(hess, -0.25)


def test_newton_site_matches_finite_differences():
    lik = HeteroscedasticGaussian()
    y = np.array([0.0])
    m = np.array([0.0, 0.0])
    jac, hess = newton_site(m, y, lik)
    h = 1e-6
    fd = np.zeros(2)
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        fd[i] = (lik.log_density(y, m + e) - lik.log_density(y, m - e)) / (2 * h)
    assert np.allclose(jac, fd, rtol=1e-5, atol=1e-8)


def test_taylor_site_gaussian_exact():
    lik = Gaussian(variance=2.0)
    jac, hess = taylor_site(np.array([1.0]), np.array([3.0]), lik)
    assert np.allclose(jac, 1.0)
    assert np.allclose(hess, -0.5)


def test_taylor_site_bernoulli():
    _, hess = taylor_site(np.array([0.0]), np.array([1.0]), Bernoulli())
    assert np.allclose(hess, -0.25)  # (dnu)^2 / Sigma = 0.25^2 / 0.25


def test_taylor_site_hetero_rank_one():
    _, hess = taylor_site(np.array([0.0, 0.0]), np.array([0.5]), HeteroscedasticGaussian())
    assert np.linalg.matrix_rank(hess, tol=1e-12) <= 1


def test_gn_gaussian_exact():
    lik = Gaussian(variance=2.0)
    _, hess = gn_site(np.array([1.0]), np.array([3.0]), lik, mode="gn")
    assert np.allclose(hess, -0.5)


def test_partial_gn_differs_and_both_nsd():
    lik = HeteroscedasticGaussian()
    m, y = np.array([0.0, 0.0]), np.array([1.0])
    _, h_gn = gn_site(m, y, lik, mode="gn")
    _, h_pgn = gn_site(m, y, lik, mode="partial-gn")
    assert not np.allclose(h_gn, h_pgn)
    assert np.linalg.eigvalsh(h_gn).max() <= 1e-12
    assert np.linalg.eigvalsh(h_pgn).max() <= 1e-12


def test_generalised_gn_poisson():
    _, hess = gn_site(np.array([0.0]), np.array([0.0]), Poisson(), mode="generalised-gn")
    assert np.allclose(hess, -1.0)


def test_gn_mode_rejects_discrete():
    with pytest.raises(ModeUnsupported):
        gn_site(np.array([0.0]), np.array([1.0]), Bernoulli(), mode="gn")


def test_taylor_equals_generalised_gn_everywhere():
    rng = np.random.default_rng(21)
    for lik in all_likelihoods():
        for _ in range(20):
            y, m, _ = random_marginal(lik, rng)
            j_t, h_t = taylor_site(m, y, lik)
            j_g, h_g = gn_site(m, y, lik, mode="generalised-gn")
            assert np.allclose(j_t, j_g, atol=1e-12)
            assert np.allclose(h_t, h_g, atol=1e-12)


# --------------------------------------------------------------------------
# Variational rules
# --------------------------------------------------------------------------


def test_vi_site_gaussian_equals_newton():
    lik = Gaussian(variance=2.0)
    quad = gauss_hermite(1, 10)
    m, c, y = np.array([1.0]), np.array([[0.7]]), np.array([3.0])
    j_vi, h_vi = vi_site(m, c, y, lik, quad)
    j_n, h_n = newton_site(m, y, lik)
    assert np.allclose(j_vi, j_n, atol=1e-10)
    assert np.allclose(h_vi, h_n, atol=1e-10)


def test_vi_site_delta_limit():
    lik = HeteroscedasticGaussian()
    quad = gauss_hermite(2, 10)
    m, y = np.array([0.3, -0.2]), np.array([0.5])
    j_vi, h_vi = vi_site(m, 1e-10 * np.eye(2), y, lik, quad)
    j_n, h_n = newton_site(m, y, lik)
    assert np.allclose(j_vi, j_n, atol=1e-6)
    assert np.allclose(h_vi, h_n, atol=1e-6)


def test_vi_site_matches_fd_of_expected_log_lik():
    lik = HeteroscedasticGaussian()
    quad = gauss_hermite(2, 20)
    m, c, y = np.array([0.0, 0.0]), 0.1 * np.eye(2), np.array([0.0])

    def target(mm):
        f = mm + quad.nodes @ np.linalg.cholesky(c).T
        return float(quad.weights @ lik.log_density(y[None, :], f))

    jac, _ = vi_site(m, c, y, lik, quad)
    h = 1e-5
    fd = np.zeros(2)
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        fd[i] = (target(m + e) - target(m - e)) / (2 * h)
    assert np.allclose(jac, fd, rtol=1e-4, atol=1e-7)


def test_vgn_gaussian_equals_vi():
    lik = Gaussian(variance=0.5)
    quad = gauss_hermite(1, 10)
    m, c, y = np.array([0.4]), np.array([[0.3]]), np.array([1.2])
    j_vgn, h_vgn = vgn_site(m, c, y, lik, quad, mode="vgn")
    j_vi, h_vi = vi_site(m, c, y, lik, quad)
    assert np.allclose(j_vgn, j_vi, atol=1e-12)
    assert np.allclose(h_vgn, h_vi, atol=1e-12)


def test_vgn_delta_limit_recovers_gn():
    lik = HeteroscedasticGaussian()
    quad = gauss_hermite(2, 12)
    m, y = np.array([0.1, -0.3]), np.array([0.8])
    c = 1e-10 * np.eye(2)
    for mode in ("vgn", "partial-vgn"):
        j_v, h_v = vgn_site(m, c, y, lik, quad, mode=mode)
        gn_mode = "gn" if mode == "vgn" else "partial-gn"
        j_g, h_g = gn_site(m, y, lik, mode=gn_mode)
        assert np.allclose(h_v, h_g, atol=1e-6)
    j_v, h_v = vgn_site(m, c, y, lik, quad, mode="vggn")
    _, h_t = taylor_site(m, y, lik)
    assert np.allclose(h_v, h_t, atol=1e-6)


def test_vgn_nsd_where_vi_indefinite():
    # Frozen from a scan of f2 at y=3, m=(0,0), C=0.25 I (seed-free grid scan).
    lik = HeteroscedasticGaussian()
    quad = gauss_hermite(2, 20)
    m, c, y = np.array([0.0, 0.0]), 0.25 * np.eye(2), np.array([3.0])
    _, h_vi = vi_site(m, c, y, lik, quad)
    _, h_vgn = vgn_site(m, c, y, lik, quad, mode="vgn")
    assert np.linalg.eigvalsh(h_vi).max() > 1.0  # plain VI is indefinite here
    assert np.linalg.eigvalsh(h_vgn).max() <= 1e-12


def test_vgn_modes_nsd_at_random_points():
    rng = np.random.default_rng(22)
    for lik in all_likelihoods():
        quad = quad_for(lik)
        modes = ["vggn"] if not lik.gaussian_form else ["vgn", "partial-vgn", "vggn"]
        for _ in range(5):
            y, m, c = random_marginal(lik, rng)
            for mode in modes:
                _, hess = vgn_site(m, c, y, lik, quad, mode=mode)
                assert np.linalg.eigvalsh(hess).max() <= 1e-10, (type(lik).__name__, mode)


# --------------------------------------------------------------------------
# Cavities and power EP
# --------------------------------------------------------------------------


def test_cavity_alpha_zero_is_posterior():
    state = cavity(np.array([0.3]), np.array([[0.5]]), (np.array([2.0]), np.array([[-1.0]])), 0.0)
    assert np.allclose(state.mean, 0.3)
    assert np.allclose(state.cov, 0.5)


def test_cavity_boundary_improper():
    # Posterior precision 1, site precision 1, alpha 1: cavity precision 0.
    with pytest.raises(NonPSDCavity):
        cavity(np.array([0.0]), np.array([[1.0]]), (np.array([0.0]), np.array([[-0.5]])), 1.0)


def test_cavity_natural_parameter_arithmetic():
    # Posterior (0, 0.5) => precision 2; site precision 1, alpha 0.5.
    state = cavity(np.array([0.0]), np.array([[0.5]]), (np.array([0.0]), np.array([[-0.5]])), 0.5)
    assert np.allclose(1.0 / state.cov, 1.5)
    assert np.allclose(state.mean, 0.0)


def test_pep_site_gaussian_exact():
    lik = Gaussian(variance=0.7)
    quad = gauss_hermite(1, 20)
    for alpha in (0.01, 0.5, 1.0):
        cav = GaussianState(mean=np.array([0.4]), cov=np.array([[0.6]]))
        y = np.array([1.5])
        jac, hess, _ = pep_site(cav, y, lik, alpha, quad)
        assert np.allclose(hess, -1.0 / 0.7, rtol=1e-8), alpha
        assert np.allclose(jac, (1.5 - 0.4) / 0.7, rtol=1e-8), alpha


def test_pep_to_vi_limit_heteroscedastic():
    lik = HeteroscedasticGaussian()
    quad = gauss_hermite(2, 20)
    rng = np.random.default_rng(23)
    for _ in range(20):
        y, m, c = model_consistent_draw(lik, rng)
        j_vi, h_vi = vi_site(m, c, y, lik, quad)
        j_pep, h_pep, _ = pep_site(GaussianState(m, c), y, lik, 1e-4, quad)
        scale_j = max(1.0, np.abs(j_vi).max())
        scale_h = max(1.0, np.abs(h_vi).max())
        assert np.abs(j_pep - j_vi).max() <= 1e-3 * scale_j
        assert np.abs(h_pep - h_vi).max() <= 1e-3 * scale_h


def test_pep_site_runs_at_experiment_power():
    lik = HeteroscedasticGaussian()
    quad = gauss_hermite(2, 20)
    jac, hess, _ = pep_site(
        GaussianState(np.array([0.0, 0.0]), 0.3 * np.eye(2)), np.array([0.5]), lik, 0.5, quad
    )
    assert np.all(np.isfinite(jac)) and np.all(np.isfinite(hess))


# --------------------------------------------------------------------------
# Posterior linearisation
# --------------------------------------------------------------------------


def test_pl_site_linear_gaussian_exact():
    lik = Gaussian(variance=0.7)
    quad = gauss_hermite(1, 20)
    m, c, y = np.array([0.4]), np.array([[0.6]]), np.array([1.5])
    jac, hess = pl_site(m, c, y, lik, quad)
    assert np.allclose(jac, (1.5 - 0.4) / 0.7, atol=1e-10)
    assert np.allclose(hess, -1.0 / 0.7, atol=1e-10)


def test_pl_omega_exceeds_noise_floor():
    lik = ProductGaussian(variance=0.1)
    quad = gauss_hermite(2, 20)
    m, c = np.array([[0.5, 0.2]]), np.tile(0.4 * np.eye(2), (1, 1, 1))
    _, _, omega = slr_statistics(m, c, lik, quad)
    assert omega[0, 0, 0] >= 0.1 - 1e-12


def test_pl_constant_mean_gives_zero_site():
    lik = ConstantMean(variance=0.5)
    quad = gauss_hermite(1, 10)
    jac, hess = pl_site(np.array([0.3]), np.array([[0.2]]), np.array([1.0]), lik, quad)
    assert np.allclose(jac, 0.0)
    assert np.allclose(hess, 0.0)


def test_pl2_reduces_to_pl_for_linear_gaussian():
    lik = Gaussian(variance=0.7)
    quad = gauss_hermite(1, 20)
    m, c, y = np.array([0.4]), np.array([[0.6]]), np.array([1.5])
    j_pl, h_pl = pl_site(m, c, y, lik, quad)
    for mode in ("full", "partial-gn"):
        j2, h2 = pl2_site(m, c, y, lik, quad, mode=mode)
        assert np.allclose(j2, j_pl, atol=1e-7), mode
        if mode == "full":
            assert np.allclose(h2, h_pl, atol=1e-6)


def test_pl2_differs_from_pl_on_heteroscedastic():
    lik = HeteroscedasticGaussian()
    quad = gauss_hermite(2, 20)
    m, c, y = np.array([0.0, 0.0]), 0.1 * np.eye(2), np.array([1.0])
    _, h_pl = pl_site(m, c, y, lik, quad)
    _, h2 = pl2_site(m, c, y, lik, quad, mode="full")
    assert np.linalg.norm(h2 - h_pl) > 1e-3


def test_pl2_jacobian_matches_fd_of_target():
    # Independent FD of log Z(m') - 0.5 D(m')^T D(m') assembled from the
    # quadrature statistics, heteroscedastic model.
    lik = HeteroscedasticGaussian()
    quad = gauss_hermite(2, 20)
    m, c, y = np.array([0.2, -0.1]), 0.15 * np.eye(2), np.array([0.7])

    def target(mm):
        e_nu, _, omega = slr_statistics(mm[None], c[None], lik, quad)
        om = omega[0, 0, 0]
        resid = y[0] - e_nu[0, 0]
        return float(-0.5 * np.log(2 * np.pi * om) - 0.5 * resid**2 / om)

    jac, _ = pl2_site(m, c, y, lik, quad, mode="full")
    h = 1e-5
    fd = np.zeros(2)
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        fd[i] = (target(m + e) - target(m - e)) / (2 * h)
    assert np.allclose(jac, fd, rtol=1e-4, atol=1e-6)


def test_pl2_partial_mode_nsd():
    lik = HeteroscedasticGaussian()
    quad = gauss_hermite(2, 12)
    rng = np.random.default_rng(24)
    for _ in range(5):
        y, m, c = random_marginal(lik, rng)
        _, hess = pl2_site(m, c, y, lik, quad, mode="partial-gn")
        assert np.linalg.eigvalsh(hess).max() <= 1e-10


# --------------------------------------------------------------------------
# BFGS and quasi-Newton
# --------------------------------------------------------------------------


def test_bfgs_scalar_update_and_secant():
    b_new = bfgs_update(np.array([[-1.0]]), np.array([1.0]), np.array([-2.0]))
    assert np.allclose(b_new, -2.0)
    assert np.allclose(b_new @ np.array([1.0]), -2.0)  # secant


def test_bfgs_rejects_positive_curvature():
    b = np.array([[-1.0, 0.0], [0.0, -2.0]])
    s = np.array([1.0, 0.0])
    g = np.array([1.0, 0.0])  # s^T g = +1
    assert np.allclose(bfgs_update(b, s, g), b)


def test_damped_bfgs_matches_undamped_when_curvature_strong():
    rng = np.random.default_rng(25)
    a = rng.normal(size=(3, 3))
    b = -(a @ a.T + np.eye(3))
    s = rng.normal(size=3)
    xi = 0.8
    sbs = s @ b @ s
    g = 2.0 * (b @ s)  # s^T g = 2 s^T B s <= (1 - xi) s^T B s
    assert s @ g <= (1 - xi) * sbs
    assert np.allclose(bfgs_update(b, s, g, damped=True, xi=xi), bfgs_update(b, s, g))


def test_bfgs_contracts_bulk():
    # Accepted undamped updates satisfy the secant equation; damped updates
    # are always NSD and satisfy B s = r.
    rng = np.random.default_rng(26)
    for _ in range(1000):
        d = int(rng.integers(1, 5))
        a = rng.normal(size=(d, d))
        b = -(a @ a.T + 0.1 * np.eye(d))
        s = rng.normal(size=d)
        g = rng.normal(size=d)
        if s @ g < 0:
            b_new = bfgs_update(b, s, g)
            assert np.abs(b_new @ s - g).max() <= 1e-10 * max(1.0, np.abs(g).max())
        xi = float(rng.uniform(0.1, 0.9))
        b_damped = bfgs_update(b, s, g, damped=True, xi=xi)
        r = damping_interpolant(b, s, g, xi)
        assert np.linalg.eigvalsh(b_damped).max() <= 1e-10
        assert np.abs(b_damped @ s - r).max() <= 1e-8 * max(1.0, np.abs(r).max())


def test_vi_qn_affine_target_fixed_point():
    # Gaussian likelihood: the target gradient is affine in the mean part of
    # eta, so a mean-only move keeps the mean block at the exact value.
    lik = Gaussian(variance=2.0)
    quad = gauss_hermite(1, 10)
    cfg = MethodConfig(rule="vi-qn", rho=1.0, damped=False)
    state = QuasiNewtonState.alloc(1, qn_eta_dim("vi-qn", 1))
    sites = SiteParams.flat(1, 1)
    y = np.array([[1.0]])
    c = np.array([[[0.5]]])
    qn_site("vi-qn", state, np.array([[0.0]]), c, y, lik, quad, cfg, sites=sites)
    _, hess, _, _ = qn_site("vi-qn", state, np.array([[0.8]]), c, y, lik, quad, cfg, sites=sites)
    assert np.allclose(hess[0], -0.5, atol=1e-10)


def test_pep_qn_limit_matches_vi_qn():
    lik = HeteroscedasticGaussian()
    quad = gauss_hermite(2, 20)
    y = np.array([[0.6]])
    sites = SiteParams.flat(1, 2)
    m0, c0 = np.array([[0.1, -0.2]]), np.tile(0.3 * np.eye(2), (1, 1, 1))
    m1, c1 = np.array([[0.3, 0.1]]), np.tile(0.25 * np.eye(2), (1, 1, 1))
    results = {}
    for rule, alpha in (("vi-qn", 0.5), ("pep-qn", 1e-7)):
        cfg = MethodConfig(rule=rule, rho=1.0, alpha=alpha, damped=False)
        state = QuasiNewtonState.alloc(1, qn_eta_dim(rule, 2))
        qn_site(rule, state, m0, c0, y, lik, quad, cfg, sites=sites)
        jac, hess, _, _ = qn_site(rule, state, m1, c1, y, lik, quad, cfg, sites=sites)
        results[rule] = (jac, hess)
    assert np.allclose(results["pep-qn"][0], results["vi-qn"][0], atol=1e-6)
    assert np.allclose(results["pep-qn"][1], results["vi-qn"][1], atol=1e-6)


def test_pl_qn_constant_mean_freezes_b():
    lik = ConstantMean(variance=0.5)
    quad = gauss_hermite(1, 10)
    cfg = MethodConfig(rule="pl-qn", rho=1.0, damped=False)
    state = QuasiNewtonState.alloc(1, qn_eta_dim("pl-qn", 1))
    sites = SiteParams.flat(1, 1)
    y = np.array([[1.0]])
    jac, _, _, _ = qn_site(
        "pl-qn", state, np.array([[0.2]]), np.array([[[0.4]]]), y, lik, quad, cfg, sites=sites
    )
    b_before = state.b_mat.copy()
    jac, _, _, _ = qn_site(
        "pl-qn", state, np.array([[0.9]]), np.array([[[0.3]]]), y, lik, quad, cfg, sites=sites
    )
    assert np.allclose(jac, 0.0)
    assert np.allclose(state.b_mat, b_before)  # g = 0 rejects the update


# --------------------------------------------------------------------------
# Riemannian correction and the local update
# --------------------------------------------------------------------------


def test_riemann_fixed_point():
    h_raw = np.array([[-2.0]])
    site_cov = np.array([[0.5]])  # site precision 2 == -h_raw: G = 0
    assert np.allclose(riemann_correction(h_raw, site_cov, 0.7), h_raw)


def test_riemann_scalar_arithmetic():
    h_new = riemann_correction(np.array([[-0.5]]), np.array([[1.0]]), 1.0)
    assert np.allclose(h_new, -0.625)
    # resulting site precision at rho=1 stays positive
    assert -2.0 * 0.5 * h_new[0, 0] > 0


def test_riemann_vanishes_with_rho():
    h_raw = np.array([[-0.5]])
    assert np.allclose(riemann_correction(h_raw, np.array([[1.0]]), 1e-12), h_raw, atol=1e-10)


def test_riemann_vi_keeps_site_precision_pd():
    rng = np.random.default_rng(27)
    for _ in range(50):
        d = int(rng.integers(1, 3))
        a = rng.normal(size=(d, d))
        site_cov = a @ a.T + 0.5 * np.eye(d)
        b = rng.normal(size=(d, d))
        h_raw = -(b @ b.T) - 1e-3 * np.eye(d)  # exact-arithmetic NSD Hessian
        rho = float(rng.uniform(0.05, 1.0))
        h_corr = riemann_correction(h_raw, site_cov, rho)
        lam2_old = -0.5 * np.linalg.inv(site_cov)
        lam2_new = (1 - rho) * lam2_old + rho * 0.5 * h_corr
        assert np.linalg.eigvalsh(-2.0 * lam2_new).min() > 0


def test_apply_local_update_rho_zero_is_identity():
    sites = SiteParams.flat(3, 2)
    jac = np.ones((3, 2))
    hess = np.tile(-np.eye(2), (3, 1, 1))
    out, _ = apply_local_update(sites, jac, hess, np.zeros((3, 2)), rho=0.0)
    assert np.allclose(out.lam1, sites.lam1)
    assert np.allclose(out.lam2, sites.lam2)


def test_apply_local_update_conjugate_one_shot():
    lik = Gaussian(variance=2.0)
    sites = SiteParams.flat(1, 1)
    y = np.array([[3.0]])
    m = np.array([[0.4]])
    jac, hess = newton_site(m, y, lik)
    out, stats = apply_local_update(sites, jac, hess, m, rho=1.0)
    mean, cov = out.mean_cov()
    assert np.allclose(mean, 3.0)
    assert np.allclose(cov, 2.0)
    assert stats["violations"] == 0


def test_apply_local_update_heuristic_guard():
    sites = SiteParams.flat(1, 2)
    jac = np.zeros((1, 2))
    hess = np.array([[[1.0, 0.5], [0.5, -2.0]]])  # indefinite
    out, stats = apply_local_update(
        sites, jac, hess, np.zeros((1, 2)), rho=1.0, psd_guard="heuristic"
    )
    prec = out.precision()[0]
    assert np.allclose(prec, np.diag(np.diag(prec)))
    assert np.min(np.diag(prec)) == pytest.approx(0.01)
    assert stats["projected"] == 1
    assert stats["violations"] == 0


def test_apply_local_update_reject_guard():
    sites = SiteParams.flat(1, 2)
    jac = np.zeros((1, 2))
    hess = np.array([[[1.0, 0.0], [0.0, -2.0]]])
    out, stats = apply_local_update(
        sites, jac, hess, np.zeros((1, 2)), rho=1.0, psd_guard="reject"
    )
    assert stats["rejected"] == 1
    assert np.allclose(out.lam2, sites.lam2)


def test_psd_induction_under_damping():
    # NSD site + NSD H stays NSD for any rho in (0, 1].
    rng = np.random.default_rng(28)
    sites = SiteParams.flat(4, 2)
    for _ in range(40):
        rho = float(rng.uniform(0.01, 1.0))
        a = rng.normal(size=(4, 2, 2))
        hess = -np.einsum("nij,nkj->nik", a, a)
        jac = rng.normal(size=(4, 2))
        sites, stats = apply_local_update(sites, jac, hess, rng.normal(size=(4, 2)), rho=rho)
        assert stats["violations"] == 0


def test_method_config_validation():
    with pytest.raises(ValueError):
        MethodConfig(rule="nope")
    with pytest.raises(ValueError):
        MethodConfig(rule="vi", rho=0.0)
    with pytest.raises(ValueError):
        MethodConfig(rule="pep", alpha=1.5)
    cfg = MethodConfig(rule="newton-heuristic")
    assert cfg.psd_guard == "heuristic"
    assert cfg.base_rule == "newton"
    assert cfg.energy_kind == "le"
