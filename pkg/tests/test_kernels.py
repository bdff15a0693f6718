import numpy as np
import pytest

from bnk.exceptions import Unsupported
from bnk.kernels import (
    Cosine,
    Matern12,
    Matern32,
    Matern52,
    Product,
    Stack,
    discretize,
    gram,
)
from bnk.linalg import expm

ALL_SDE_KERNELS = [
    Matern12(variance=0.7, lengthscale=1.3),
    Matern32(variance=1.0, lengthscale=1.0),
    Matern32(variance=2.0, lengthscale=0.6),
    Matern52(variance=1.5, lengthscale=2.0),
    Product(children=(Cosine(frequency=0.4 * np.pi), Matern32(variance=1.0, lengthscale=5.0))),
    Stack(children=(Matern32(), Matern52(variance=2.0, lengthscale=3.0))),
]


def test_matern32_at_zero_lag():
    k = Matern32(variance=1.0, lengthscale=1.0)
    assert np.allclose(gram(k, [0.0], [0.0]), 1.0)


def test_matern32_unit_lag_closed_form():
    k = Matern32(variance=1.0, lengthscale=1.0)
    want = (1.0 + np.sqrt(3.0)) * np.exp(-np.sqrt(3.0))
    assert np.allclose(gram(k, [0.0], [1.0]), want)


def test_oscillator_zero_lag_is_matern_variance():
    osc = Product(children=(Cosine(frequency=0.4 * np.pi), Matern32(variance=1.0, lengthscale=500.0)))
    assert np.allclose(gram(osc, [3.0], [3.0]), 1.0)


def test_matern12_state_space_fields():
    ss = Matern12(variance=2.0, lengthscale=0.5).to_state_space()
    assert np.allclose(ss.F, [[-2.0]])
    assert np.allclose(ss.L, [[1.0]])
    assert np.allclose(ss.Qc, [[2.0 * 2.0 * 2.0]])
    assert np.allclose(ss.H, [[1.0]])
    assert np.allclose(ss.P0, [[2.0]])


def test_matern32_stationary_covariance():
    ss = Matern32(variance=1.0, lengthscale=1.0).to_state_space()
    assert ss.state_dim == 2
    assert np.allclose(ss.P0, np.diag([1.0, 3.0]))


def test_stack_of_eight_matern52():
    stack = Stack(children=tuple(Matern52() for _ in range(8)))
    ss = stack.to_state_space()
    assert ss.state_dim == 24
    assert ss.H.shape == (8, 24)


def test_stack_gram_has_zero_cross_blocks():
    stack = Stack(children=(Matern32(), Matern52()))
    k = gram(stack, [0.0, 1.0])
    assert k.shape == (4, 4)
    assert k[0, 1] == 0.0 and k[1, 0] == 0.0  # cross-latent entries vanish
    assert np.allclose(k, k.T)


def test_discretize_zero_step_limit():
    ss = Matern32().to_state_space()
    a, q = discretize(ss, 1e-12)
    assert np.abs(a - np.eye(2)).max() <= 1e-8
    assert np.abs(q).max() <= 1e-8


def test_discretize_matern12_closed_form():
    ss = Matern12(variance=1.0, lengthscale=1.0).to_state_space()
    a, q = discretize(ss, 1.0)
    assert np.allclose(a, [[np.exp(-1.0)]])
    assert np.allclose(q, [[1.0 - np.exp(-2.0)]])


def test_discretize_matches_noise_integral():
    # Q against trapezoid quadrature of int_0^dt Phi(dt-t) L Qc L^T Phi(dt-t)^T dt.
    ss = Matern32(variance=1.0, lengthscale=1.0).to_state_space()
    dt = 0.5
    _, q = discretize(ss, dt)
    taus = np.linspace(0.0, dt, 10_001)
    noise = ss.L @ ss.Qc @ ss.L.T
    acc = np.zeros((2, 2))
    vals = []
    for tau in taus:
        phi = expm(ss.F * (dt - tau))
        vals.append(phi @ noise @ phi.T)
    vals = np.array(vals)
    acc = np.trapezoid(vals, taus, axis=0)
    assert np.abs(q - acc).max() <= 1e-6


def test_discretize_stationarity_identity():
    for kernel in ALL_SDE_KERNELS:
        ss = kernel.to_state_space()
        for dt in (0.1, 1.0, 7.3):
            a, q = discretize(ss, dt)
            assert np.abs(a @ ss.P0 @ a.T + q - ss.P0).max() <= 1e-10 * max(
                1.0, np.abs(ss.P0).max()
            )
            assert np.linalg.eigvalsh(q).min() >= -1e-10


def test_state_space_chain_reproduces_gram():
    rng = np.random.default_rng(4)
    xs = np.sort(rng.uniform(0.0, 10.0, size=12))
    for kernel in ALL_SDE_KERNELS:
        ss = kernel.to_state_space()
        d = ss.latent_dim
        n = xs.size
        want = gram(kernel, xs)
        got = np.zeros_like(want)
        for i in range(n):
            for j in range(i, n):
                phi = expm(ss.F * (xs[j] - xs[i]))
                block = ss.H @ ss.P0 @ phi.T @ ss.H.T  # cov(f(x_i), f(x_j))
                got[i * d : (i + 1) * d, j * d : (j + 1) * d] = block
                got[j * d : (j + 1) * d, i * d : (i + 1) * d] = block.T
        assert np.abs(got - want).max() <= 1e-8, type(kernel).__name__


def test_gram_psd_after_small_jitter():
    rng = np.random.default_rng(5)
    xs = rng.uniform(0.0, 30.0, size=40)
    for kernel in ALL_SDE_KERNELS:
        k = gram(kernel, xs)
        eigs = np.linalg.eigvalsh(k + 1e-10 * np.eye(k.shape[0]))
        assert eigs.min() >= -1e-12


def test_cosine_needs_one_dimensional_inputs():
    with pytest.raises(Unsupported):
        gram(Cosine(frequency=1.0), np.zeros((3, 2)))


def test_invalid_hyperparameters_rejected():
    with pytest.raises(ValueError):
        Matern32(variance=-1.0)
    with pytest.raises(ValueError):
        Matern52(lengthscale=0.0)
