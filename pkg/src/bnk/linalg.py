"""Dense linear algebra with PSD safety nets.

Everything here operates on small dense symmetric matrices (covariances,
precisions, site blocks). Shapes follow numpy broadcasting: most helpers
accept stacked inputs with leading batch dimensions.
"""

import numpy as np

from functools import partial

_einsum = partial(np.einsum, optimize=True)
import scipy.linalg

from .exceptions import NonHurwitz, NotPSD

# Jitter ladder: one clean attempt, then 5 escalations of x10 starting at
# jitter_rel * mean(diag), never above 1e-4 * mean(diag).
_JITTER_RETRIES = 5
_JITTER_CEIL = 1e-4


def symmetrize(a):
    """Return 0.5 * (a + a^T) over the trailing two axes."""
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def cholesky_psd(mat, jitter_rel=1e-12):
    """Lower Cholesky factor of a symmetric PSD matrix, with escalating jitter.

    Tries the factorisation as given first; on failure adds j*I with j
    climbing geometrically from ``jitter_rel * mean(diag)`` up to
    ``1e-4 * mean(diag)``. Returns ``(L, jitter_used)`` so callers can log
    how much regularisation was needed.

    Raises NotPSD if the matrix cannot be factorised at the maximum jitter.
    """
    mat = np.asarray(mat, dtype=float)
    scale = max(float(np.mean(np.diag(mat))), np.finfo(float).tiny)
    jitters = [0.0]
    for k in range(_JITTER_RETRIES):
        j = jitter_rel * 10.0**k
        jitters.append(min(j, _JITTER_CEIL) * scale)
    eye = np.eye(mat.shape[-1])
    for j in jitters:
        try:
            return np.linalg.cholesky(mat + j * eye), j
        except np.linalg.LinAlgError:
            continue
    raise NotPSD(f"not PSD at maximum jitter {jitters[-1]:.3e}")


def solve_psd(mat, rhs, jitter_rel=1e-12):
    """Solve mat @ x = rhs for symmetric PSD mat via its Cholesky factor."""
    chol, _ = cholesky_psd(mat, jitter_rel)
    return scipy.linalg.cho_solve((chol, True), rhs)


def inv_psd(mat, jitter_rel=1e-12):
    """Inverse of a symmetric PSD matrix (symmetrised on the way out)."""
    return symmetrize(solve_psd(mat, np.eye(mat.shape[-1]), jitter_rel))


def batch_inv_psd(mats, jitter_rel=1e-12):
    """Invert a stack (..., d, d) of symmetric PD matrices one by one."""
    mats = np.asarray(mats, dtype=float)
    flat = mats.reshape(-1, mats.shape[-2], mats.shape[-1])
    out = np.empty_like(flat)
    for i, m in enumerate(flat):
        out[i] = inv_psd(m, jitter_rel)
    return out.reshape(mats.shape)


def batch_inv_sym(mats):
    """Invert a stack of symmetric (not necessarily definite) matrices.

    Sites with negative precision are legitimate intermediate states for
    cavity-based schemes, so this path must not insist on definiteness;
    singular input raises numpy's LinAlgError.
    """
    mats = np.asarray(mats, dtype=float)
    eye = np.eye(mats.shape[-1])
    return symmetrize(np.linalg.solve(mats, np.broadcast_to(eye, mats.shape).copy()))


def heuristic_psd_projection(prec, eps=0.01):
    """Project a (possibly indefinite) precision onto a PD diagonal matrix.

    Off-diagonal entries are dropped and any diagonal entry <= 0 is replaced
    by ``eps``, so the result is always diagonal and positive definite.
    """
    prec = np.asarray(prec, dtype=float)
    d = np.diagonal(prec, axis1=-2, axis2=-1).copy()
    d[d <= 0.0] = eps
    out = np.zeros_like(prec)
    idx = np.arange(prec.shape[-1])
    out[..., idx, idx] = d
    return out


def solve_lyapunov(feedback, noise_cov):
    """Stationary covariance P solving F P + P F^T + noise_cov = 0.

    ``feedback`` must be Hurwitz (all eigenvalues in the open left half
    plane); otherwise NonHurwitz is raised. Solved by the dense
    Bartels-Stewart reduction, adequate for the state sizes used here.
    """
    feedback = np.atleast_2d(np.asarray(feedback, dtype=float))
    noise_cov = np.atleast_2d(np.asarray(noise_cov, dtype=float))
    eigs = np.linalg.eigvals(feedback)
    if np.any(eigs.real >= 0.0):
        raise NonHurwitz(f"eigenvalue with real part {eigs.real.max():.3e} >= 0")
    sol = scipy.linalg.solve_continuous_lyapunov(feedback, -noise_cov)
    return symmetrize(sol)


def mvn_logpdf(x, mean, cov, jitter_rel=1e-12):
    """Log density of N(x | mean, cov) via a PSD-safe Cholesky solve."""
    x = np.asarray(x, dtype=float).ravel()
    mean = np.asarray(mean, dtype=float).ravel()
    chol, _ = cholesky_psd(np.atleast_2d(cov), jitter_rel)
    diff = x - mean
    alpha = scipy.linalg.solve_triangular(chol, diff, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (x.size * np.log(2.0 * np.pi) + logdet + alpha @ alpha)


def sym_inv_sqrt(mat):
    """Symmetric inverse square root of a PD matrix stack (..., d, d)."""
    vals, vecs = np.linalg.eigh(symmetrize(np.asarray(mat, dtype=float)))
    vals = np.maximum(vals, np.finfo(float).tiny)
    inv_root = vals ** (-0.5)
    return _einsum("...ik,...k,...jk->...ij", vecs, inv_root, vecs)


def sym_inv_sqrt_directional(mat, dmat):
    """Directional derivatives of the symmetric inverse square root.

    ``mat`` has shape (..., d, d) and ``dmat`` has shape (..., d, d, p) with
    one symmetric perturbation per trailing index. Uses the eigenbasis
    divided-difference rule for the map x -> x^{-1/2}, matching the symmetric
    (not Cholesky-based) square-root convention used throughout.
    """
    mat = symmetrize(np.asarray(mat, dtype=float))
    vals, vecs = np.linalg.eigh(mat)
    vals = np.maximum(vals, np.finfo(float).tiny)
    f = vals ** (-0.5)
    # Divided differences f[i,j] = (f_i - f_j)/(lam_i - lam_j), -0.5 lam^{-3/2} on ties.
    lam_i = vals[..., :, None]
    lam_j = vals[..., None, :]
    num = f[..., :, None] - f[..., None, :]
    den = lam_i - lam_j
    same = np.abs(den) < 1e-12 * np.maximum(lam_i, lam_j)
    den = np.where(same, 1.0, den)
    dd = np.where(same, -0.5 * lam_i ** (-1.5), num / den)
    # Rotate each perturbation into the eigenbasis, scale, rotate back.
    inner = _einsum("...ki,...klp,...lj->...ijp", vecs, dmat, vecs)
    scaled = inner * dd[..., None]
    return _einsum("...ik,...klp,...jl->...ijp", vecs, scaled, vecs)


def discrete_lyapunov_residual(a, q, p0):
    """Residual of the discrete stationarity identity A P0 A^T + Q - P0."""
    return a @ p0 @ a.T + q - p0


def expm(mat):
    """Matrix exponential (scaling-and-squaring Pade, via scipy)."""
    return scipy.linalg.expm(np.asarray(mat, dtype=float))
