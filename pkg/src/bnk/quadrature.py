"""Quadrature rules against the standard normal weight.

Two families are provided: tensor-product Gauss-Hermite (probabilists'
normalisation, exact for per-dimension degree <= 2*order - 1) and a
fully-symmetric degree-5 rule with 2*dim^2 + 1 nodes for higher-dimensional
integrands. Both report nodes for N(0, I); expectations under N(m, C) are
taken by pushing nodes through m + chol(C) x.
"""

from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from .exceptions import DimensionOverflow
from .linalg import cholesky_psd

NODE_CAP = 10**6


@dataclass(frozen=True)
class Quadrature:
    """A fixed cubature rule over the standard normal in `dim` dimensions."""

    kind: str
    dim: int
    nodes: np.ndarray  # (n_nodes, dim)
    weights: np.ndarray  # (n_nodes,), summing to 1

    @property
    def n_nodes(self):
        return self.nodes.shape[0]


def gauss_hermite(dim, order):
    """Tensor-product Gauss-Hermite rule with `order` nodes per dimension.

    Exact for monomials of per-dimension degree <= 2*order - 1 under the
    unit normal. Raises DimensionOverflow when order**dim exceeds the node
    cap (10^6 by default), since the grid is a full tensor product.
    """
    if dim < 1 or order < 1:
        raise ValueError("dim and order must be >= 1")
    if order**dim > NODE_CAP:
        raise DimensionOverflow(f"{order}^{dim} nodes exceeds cap {NODE_CAP}")
    x, w = hermegauss(order)
    w = w / w.sum()  # probabilists' weights sum to sqrt(2 pi)
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=-1)
    wgrids = np.meshgrid(*([w] * dim), indexing="ij")
    weights = np.ones(order**dim)
    for g in wgrids:
        weights = weights * g.ravel()
    return Quadrature("gauss-hermite", dim, nodes, weights)


def unscented_5(dim):
    """Fully-symmetric degree-5 rule over the standard normal.

    2*dim^2 + 1 nodes: the origin, +-sqrt(3) along each axis, and
    (+-sqrt(3), +-sqrt(3)) over each axis pair. Exact for every monomial of
    total degree <= 5. Axis weights go negative for dim > 4; that is a
    property of the rule, not an error.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    u = np.sqrt(3.0)
    w0 = 1.0 + (dim**2 - 7.0 * dim) / 18.0
    w1 = (4.0 - dim) / 18.0
    w2 = 1.0 / 36.0
    nodes = [np.zeros(dim)]
    weights = [w0]
    for i in range(dim):
        for s in (+u, -u):
            e = np.zeros(dim)
            e[i] = s
            nodes.append(e)
            weights.append(w1)
    for i in range(dim):
        for j in range(i + 1, dim):
            for si in (+u, -u):
                for sj in (+u, -u):
                    e = np.zeros(dim)
                    e[i], e[j] = si, sj
                    nodes.append(e)
                    weights.append(w2)
    return Quadrature("unscented-5", dim, np.array(nodes), np.array(weights))


def default_quadrature(dim, gh_order=20):
    """Gauss-Hermite for dim <= 3, the degree-5 symmetric rule above that."""
    if dim <= 3:
        return gauss_hermite(dim, gh_order)
    return unscented_5(dim)


def transformed_nodes(mean, cov, quad):
    """Nodes of N(mean, cov): mean + L x for L the PSD-safe Cholesky factor."""
    chol, _ = cholesky_psd(np.atleast_2d(cov))
    return np.asarray(mean, dtype=float).reshape(1, -1) + quad.nodes @ chol.T


def gaussian_expectation(mean, cov, fun, quad, dfun=None, d2fun=None):
    """Quadrature estimate of E[fun(f)] under N(mean, cov).

    When `dfun`/`d2fun` (analytic gradient and Hessian of `fun` in f) are
    supplied, also returns the expectations E[dfun] and E[d2fun] evaluated at
    the same nodes; these equal the gradient and Hessian of the expectation
    with respect to `mean`.
    """
    f = transformed_nodes(mean, cov, quad)
    w = quad.weights
    vals = np.asarray([fun(fi) for fi in f], dtype=float)
    out = [float(w @ vals)]
    if dfun is not None:
        grads = np.asarray([dfun(fi) for fi in f], dtype=float)
        out.append(w @ grads)
    if d2fun is not None:
        hesses = np.asarray([d2fun(fi) for fi in f], dtype=float)
        out.append(np.einsum("q,q...->...", w, hesses))
    return out[0] if len(out) == 1 else tuple(out)
