"""Stationary covariance functions and their state-space twins.

Each kernel provides a Gram-matrix form for the dense/sparse backends and,
for 1-D inputs, an equivalent linear SDE representation

    d fbar(x) = F fbar(x) dx + L d beta(x),   f(x) = H fbar(x),

whose stationary covariance P0 satisfies F P0 + P0 F^T + L Qc L^T = 0 and
reproduces kappa: H P0 H^T = kappa(x, x). Multi-latent models are built with
`Stack`, which keeps latent-major state ordering (each latent's state block
is contiguous) while Gram matrices interleave site-major (block n carries
all D latents at input n, so site covariances stay block-diagonal).
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .exceptions import Unsupported
from .linalg import expm, symmetrize


@dataclass(frozen=True)
class StateSpaceModel:
    """LTI SDE form (F, L, Qc, H, P0) of a kernel, validated on build."""

    F: np.ndarray  # (S, S) feedback
    L: np.ndarray  # (S, r) noise gain
    Qc: np.ndarray  # (r, r) spectral density
    H: np.ndarray  # (D, S) measurement
    P0: np.ndarray  # (S, S) stationary covariance

    def __post_init__(self):
        resid = self.F @ self.P0 + self.P0 @ self.F.T + self.L @ self.Qc @ self.L.T
        scale = max(np.abs(self.P0).max(), 1.0)
        if np.abs(resid).max() > 1e-8 * scale:
            raise ValueError("stationary covariance fails the Lyapunov identity")
        if np.any(np.linalg.eigvals(self.F).real > 1e-10):
            raise ValueError("feedback matrix has an explosive eigenvalue")

    @property
    def state_dim(self):
        return self.F.shape[0]

    @property
    def latent_dim(self):
        return self.H.shape[0]


def discretize(ss, dt):
    """Transition pair (A, Q) over a step of size dt > 0.

    A = expm(F dt); Q comes from the stationarity identity
    Q = P0 - A P0 A^T, which is exact for stationary kernels and keeps
    A P0 A^T + Q = P0 by construction.
    """
    if dt <= 0:
        raise ValueError("step size must be positive")
    a = expm(ss.F * dt)
    q = symmetrize(ss.P0 - a @ ss.P0 @ a.T)
    return a, q


class Kernel:
    """Base class; scalar kernels have latent_dim 1."""

    latent_dim = 1

    def pairwise(self, x, x2):
        """Covariance matrix kappa(x, x2) of shape (N, M) for scalar kernels."""
        raise NotImplementedError

    def to_state_space(self):
        raise Unsupported(f"{type(self).__name__} has no state-space form")

    def gram(self, x, x2=None):
        """Gram matrix over inputs; (N*D, M*D), site-major block layout."""
        x = _as_inputs(x)
        x2 = x if x2 is None else _as_inputs(x2)
        return self.pairwise(x, x2)


def _as_inputs(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if not np.all(np.isfinite(x)):
        raise ValueError("kernel inputs must be finite")
    return x


def _sqdist(x, x2):
    d = x[:, None, :] - x2[None, :, :]
    return np.sum(d * d, axis=-1)


@dataclass(frozen=True)
class Matern12(Kernel):
    variance: float = 1.0
    lengthscale: float = 1.0

    def __post_init__(self):
        _check_positive(self)

    def pairwise(self, x, x2):
        r = np.sqrt(np.maximum(_sqdist(x, x2), 0.0))
        return self.variance * np.exp(-r / self.lengthscale)

    def to_state_space(self):
        lam = 1.0 / self.lengthscale
        return StateSpaceModel(
            F=np.array([[-lam]]),
            L=np.array([[1.0]]),
            Qc=np.array([[2.0 * self.variance * lam]]),
            H=np.array([[1.0]]),
            P0=np.array([[self.variance]]),
        )


@dataclass(frozen=True)
class Matern32(Kernel):
    variance: float = 1.0
    lengthscale: float = 1.0

    def __post_init__(self):
        _check_positive(self)

    def pairwise(self, x, x2):
        r = np.sqrt(np.maximum(_sqdist(x, x2), 0.0))
        z = np.sqrt(3.0) * r / self.lengthscale
        return self.variance * (1.0 + z) * np.exp(-z)

    def to_state_space(self):
        lam = np.sqrt(3.0) / self.lengthscale
        return StateSpaceModel(
            F=np.array([[0.0, 1.0], [-(lam**2), -2.0 * lam]]),
            L=np.array([[0.0], [1.0]]),
            Qc=np.array([[4.0 * self.variance * lam**3]]),
            H=np.array([[1.0, 0.0]]),
            P0=np.diag([self.variance, self.variance * lam**2]),
        )


@dataclass(frozen=True)
class Matern52(Kernel):
    variance: float = 1.0
    lengthscale: float = 1.0

    def __post_init__(self):
        _check_positive(self)

    def pairwise(self, x, x2):
        r = np.sqrt(np.maximum(_sqdist(x, x2), 0.0))
        z = np.sqrt(5.0) * r / self.lengthscale
        return self.variance * (1.0 + z + z**2 / 3.0) * np.exp(-z)

    def to_state_space(self):
        lam = np.sqrt(5.0) / self.lengthscale
        kappa = self.variance * lam**2 / 3.0
        p0 = np.array(
            [
                [self.variance, 0.0, -kappa],
                [0.0, kappa, 0.0],
                [-kappa, 0.0, self.variance * lam**4],
            ]
        )
        return StateSpaceModel(
            F=np.array(
                [
                    [0.0, 1.0, 0.0],
                    [0.0, 0.0, 1.0],
                    [-(lam**3), -3.0 * lam**2, -3.0 * lam],
                ]
            ),
            L=np.array([[0.0], [0.0], [1.0]]),
            Qc=np.array([[16.0 / 3.0 * self.variance * lam**5]]),
            H=np.array([[1.0, 0.0, 0.0]]),
            P0=p0,
        )


@dataclass(frozen=True)
class Cosine(Kernel):
    """Pure oscillator kernel kappa(tau) = variance * cos(frequency * tau).

    Only defined for 1-D inputs. Its SDE form is the noiseless rotation
    block, which is marginally stable rather than Hurwitz; it is intended
    for use inside a `Product` with a Matern factor.
    """

    frequency: float
    variance: float = 1.0

    def __post_init__(self):
        if self.variance <= 0:
            raise ValueError("variance must be positive")

    def pairwise(self, x, x2):
        if x.shape[1] != 1 or x2.shape[1] != 1:
            raise Unsupported("cosine kernel requires 1-D inputs")
        tau = x[:, None, 0] - x2[None, :, 0]
        return self.variance * np.cos(self.frequency * tau)

    def to_state_space(self):
        w = self.frequency
        return StateSpaceModel(
            F=np.array([[0.0, -w], [w, 0.0]]),
            L=np.eye(2),
            Qc=np.zeros((2, 2)),
            H=np.array([[1.0, 0.0]]),
            P0=self.variance * np.eye(2),
        )


@dataclass(frozen=True)
class Product(Kernel):
    """Pointwise product of scalar kernels.

    The SDE form combines factors by Kronecker algebra: F is the Kronecker
    sum, H and P0 are Kronecker products, and the effective process noise
    L Qc L^T = (L1 Qc1 L1^T) kron P0_2 + P0_1 kron (L2 Qc2 L2^T) keeps the
    Lyapunov identity exact.
    """

    children: tuple

    def __post_init__(self):
        if len(self.children) == 0:
            raise ValueError("product requires at least one child kernel")

    def pairwise(self, x, x2):
        out = np.ones((x.shape[0], x2.shape[0]))
        for child in self.children:
            out = out * child.pairwise(x, x2)
        return out

    def to_state_space(self):
        ss = self.children[0].to_state_space()
        noise = ss.L @ ss.Qc @ ss.L.T
        f, h, p0 = ss.F, ss.H, ss.P0
        for child in self.children[1:]:
            nxt = child.to_state_space()
            nxt_noise = nxt.L @ nxt.Qc @ nxt.L.T
            f = np.kron(f, np.eye(nxt.state_dim)) + np.kron(np.eye(f.shape[0]), nxt.F)
            noise = np.kron(noise, nxt.P0) + np.kron(p0, nxt_noise)
            h = np.kron(h, nxt.H)
            p0 = np.kron(p0, nxt.P0)
        s = f.shape[0]
        return StateSpaceModel(F=f, L=np.eye(s), Qc=symmetrize(noise), H=h, P0=symmetrize(p0))


@dataclass(frozen=True)
class Stack(Kernel):
    """Independent latent processes, one child kernel per latent function."""

    children: tuple

    def __post_init__(self):
        if len(self.children) == 0:
            raise ValueError("stack requires at least one child kernel")

    @property
    def latent_dim(self):
        return len(self.children)

    def pairwise(self, x, x2):
        raise Unsupported("use gram() for stacked kernels")

    def gram(self, x, x2=None):
        x = _as_inputs(x)
        x2 = x if x2 is None else _as_inputs(x2)
        d = self.latent_dim
        n, m = x.shape[0], x2.shape[0]
        out = np.zeros((n * d, m * d))
        for j, child in enumerate(self.children):
            out[j::d, j::d] = child.pairwise(x, x2)
        return out

    def to_state_space(self):
        parts = [child.to_state_space() for child in self.children]
        f = scipy.linalg.block_diag(*[p.F for p in parts])
        l = scipy.linalg.block_diag(*[p.L for p in parts])
        qc = scipy.linalg.block_diag(*[p.Qc for p in parts])
        p0 = scipy.linalg.block_diag(*[p.P0 for p in parts])
        s = f.shape[0]
        h = np.zeros((len(parts), s))
        off = 0
        for j, p in enumerate(parts):
            h[j, off : off + p.state_dim] = p.H[0]
            off += p.state_dim
        return StateSpaceModel(F=f, L=l, Qc=qc, H=h, P0=p0)


def _check_positive(kernel):
    if kernel.variance <= 0 or kernel.lengthscale <= 0:
        raise ValueError("variance and lengthscale must be positive")


def gram(kernel, x, x2=None):
    """Module-level convenience wrapper around Kernel.gram."""
    return kernel.gram(x, x2)
