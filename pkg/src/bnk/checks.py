"""Self-contained invariant suite behind `bnk check`.

One line per invariant; returns the number of failures so the CLI can exit
nonzero when something is broken. These mirror the cross-cutting library
guarantees (quadrature exactness, conjugate one-shot recovery, backend
equivalence, curvature-update contracts) at a scale that runs in seconds.
"""

import numpy as np
from scipy.special import factorial2

from .backends import DenseModel, MarkovModel, SparseModel
from .kernels import Matern32
from .likelihoods import Bernoulli, Gaussian, HeteroscedasticGaussian, Poisson, ProductGaussian
from .linalg import heuristic_psd_projection, mvn_logpdf
from .quadrature import gauss_hermite, unscented_5
from .rules import MethodConfig, bfgs_update, damping_interpolant, gn_site, taylor_site


def _moment(k):
    if k == 0:
        return 1.0
    return float(factorial2(k - 1)) if k % 2 == 0 else 0.0


def check_gauss_hermite():
    q = gauss_hermite(1, 20)
    for k in range(0, 40):
        want = _moment(k)
        got = float(q.weights @ q.nodes[:, 0] ** k)
        # odd moments vanish by cancellation; scale the tolerance by E[|x|^k]
        scale = max(float(q.weights @ np.abs(q.nodes[:, 0]) ** k), 1.0)
        if abs(got - want) > 1e-6 * scale:
            return f"degree-{k} moment off by {abs(got - want):.2e}"
    return None


def check_unscented():
    for dim in range(1, 9):
        q = unscented_5(dim)
        if q.n_nodes != 2 * dim**2 + 1:
            return f"dim {dim}: wrong node count"
        for i in range(dim):
            for k in (2, 4):
                got = float(q.weights @ q.nodes[:, i] ** k)
                if abs(got - _moment(k)) > 1e-9:
                    return f"dim {dim}: axis moment {k} off"
        if dim >= 2:
            got = float(q.weights @ (q.nodes[:, 0] ** 2 * q.nodes[:, 1] ** 2))
            if abs(got - 1.0) > 1e-9:
                return f"dim {dim}: cross moment off"
    return None


def check_conjugate_exactness():
    rng = np.random.default_rng(0)
    x = np.sort(rng.uniform(0, 5, size=10))
    y = rng.normal(size=10)
    noise = 0.3
    kernel = Matern32()
    k = kernel.gram(x[:, None])
    a = k + noise * np.eye(10)
    want_mean = k @ np.linalg.solve(a, y)
    want_nlml = -mvn_logpdf(y, np.zeros(10), a)
    for rule in ("newton", "vi", "pep", "pl", "taylor", "gn", "vgn"):
        model = DenseModel(kernel, Gaussian(variance=noise), x, y)
        trace = model.fit(MethodConfig(rule=rule, rho=1.0), max_iters=3)
        means, _, _ = model.marginals()
        if np.abs(means[:, 0] - want_mean).max() > 1e-8:
            return f"rule {rule}: posterior mean off"
        if abs(trace.final_energy - want_nlml) > 1e-8:
            return f"rule {rule}: energy off by {abs(trace.final_energy - want_nlml):.2e}"
    return None


def check_backend_equivalence():
    rng = np.random.default_rng(1)
    x = np.sort(rng.uniform(0, 8, size=30))
    y = rng.normal(size=30)
    noise = 0.4
    kernel = Matern32()

    def with_exact_sites(model):
        model.sites.lam1[:] = model.y / noise
        model.sites.lam2[:] = -0.5 / noise
        return model

    dense = with_exact_sites(DenseModel(kernel, Gaussian(variance=noise), x, y))
    markov = with_exact_sites(MarkovModel(kernel, Gaussian(variance=noise), x, y))
    sparse = with_exact_sites(SparseModel(kernel, Gaussian(variance=noise), x, y, z=x))
    md, cd, zd = dense.marginals()
    for name, model in (("markov", markov), ("sparse", sparse)):
        mm, cm, zm = model.marginals()
        if np.abs(md - mm).max() > 1e-6 or np.abs(cd - cm).max() > 1e-6:
            return f"{name} marginals deviate"
        if abs(zd - zm) > 1e-6:
            return f"{name} log partition deviates"
    return None


def check_taylor_matches_generalised_gn():
    rng = np.random.default_rng(2)
    liks = [Gaussian(0.5), HeteroscedasticGaussian(), ProductGaussian(0.1), Bernoulli(), Poisson()]
    for lik in liks:
        for _ in range(5):
            m = rng.normal(size=lik.latent_dim)
            if isinstance(lik, Bernoulli):
                y = np.array([1.0])
            elif isinstance(lik, Poisson):
                y = np.array([2.0])
            else:
                y = rng.normal(size=lik.obs_dim)
            jt, ht = taylor_site(m, y, lik)
            jg, hg = gn_site(m, y, lik, mode="generalised-gn")
            if np.abs(jt - jg).max() > 1e-12 or np.abs(ht - hg).max() > 1e-12:
                return f"{type(lik).__name__}: mismatch"
    return None


def check_bfgs_contracts():
    rng = np.random.default_rng(3)
    for _ in range(200):
        d = int(rng.integers(1, 5))
        a = rng.normal(size=(d, d))
        b = -(a @ a.T + 0.1 * np.eye(d))
        s, g = rng.normal(size=d), rng.normal(size=d)
        if s @ g < 0:
            b_new = bfgs_update(b, s, g)
            if np.abs(b_new @ s - g).max() > 1e-10 * max(1.0, np.abs(g).max()):
                return "undamped secant violated"
        xi = float(rng.uniform(0.1, 0.9))
        b_damped = bfgs_update(b, s, g, damped=True, xi=xi)
        r = damping_interpolant(b, s, g, xi)
        if np.linalg.eigvalsh(b_damped).max() > 1e-10:
            return "damped update not NSD"
        if np.abs(b_damped @ s - r).max() > 1e-8 * max(1.0, np.abs(r).max()):
            return "damped secant (against r) violated"
    return None


def check_heuristic_projection():
    rng = np.random.default_rng(4)
    for _ in range(100):
        a = rng.normal(size=(3, 3))
        out = heuristic_psd_projection(0.5 * (a + a.T))
        if not np.allclose(out, np.diag(np.diag(out))) or np.diag(out).min() <= 0:
            return "projection not diagonal positive definite"
    return None


CHECKS = (
    ("gauss-hermite moments through degree 39", check_gauss_hermite),
    ("degree-5 rule nodes and moments, dims 1-8", check_unscented),
    ("conjugate one-shot exactness across rules", check_conjugate_exactness),
    ("dense / markov / sparse backend equivalence", check_backend_equivalence),
    ("analytic linearisation matches generalised Gauss-Newton", check_taylor_matches_generalised_gn),
    ("BFGS secant and damped-update contracts", check_bfgs_contracts),
    ("heuristic projection is diagonal positive definite", check_heuristic_projection),
)


def run_checks(stream=None):
    import sys

    stream = stream or sys.stdout
    failures = 0
    for name, fn in CHECKS:
        try:
            detail = fn()
        except Exception as err:  # a crashed check is a failed check
            detail = f"{type(err).__name__}: {err}"
        if detail is None:
            print(f"PASS  {name}", file=stream)
        else:
            print(f"FAIL  {name}: {detail}", file=stream)
            failures += 1
    return failures
