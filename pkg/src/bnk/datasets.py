"""Data loading and synthesis for the three case studies.

The motorcycle-impact data ship with the package; the two synthetic studies
draw from their own generative models with a fixed seed so every run of the
same configuration sees identical data.
"""

import csv
from importlib import resources

import numpy as np

from .exceptions import ParseError
from .kernels import Cosine, Matern32, Matern52, Product
from .likelihoods import softplus
from .linalg import cholesky_psd

GPRN_NOISE_COV = np.array(
    [
        [0.02, -0.015, -0.005],
        [-0.015, 0.04, 0.01],
        [-0.005, 0.01, 0.06],
    ]
)


def load_motorcycle(path=None):
    """Standardised impact-accelerometer series: (times, accelerations).

    Both columns are shifted and scaled to zero mean, unit population
    standard deviation. The packaged file has 133 rows; any two-column
    numeric CSV with an optional header is accepted.
    """
    if path is None:
        ref = resources.files("bnk.data").joinpath("motorcycle.csv")
        with ref.open("r", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    else:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    data = []
    for i, row in enumerate(rows, start=1):
        if not row or (i == 1 and not _is_number(row[0])):
            continue  # skip a header line
        if len(row) < 2:
            raise ParseError("expected two columns", row=i)
        try:
            data.append((float(row[0]), float(row[1])))
        except ValueError:
            raise ParseError("non-numeric value", row=i) from None
    if not data:
        raise ParseError("no data rows found", row=len(rows))
    arr = np.asarray(data, dtype=float)
    x, y = arr[:, 0], arr[:, 1]
    x = (x - x.mean()) / x.std()
    y = (y - y.mean()) / y.std()
    return x, y


def _is_number(token):
    try:
        float(token)
        return True
    except ValueError:
        return False


def sample_gp(kernel, x, rng):
    """One draw from the kernel's zero-mean prior at inputs x."""
    k = kernel.gram(np.asarray(x, dtype=float)[:, None])
    chol, _ = cholesky_psd(k, jitter_rel=1e-10)
    return chol @ rng.standard_normal(k.shape[0])


def synth_product(seed):
    """Amplitude-demodulation data: y = f1 * softplus(f2) + noise.

    1000 evenly spaced inputs on [0, 200]; f1 has a near-sinusoidal
    oscillator prior (cosine at 2 pi / 5 times a long-lengthscale Matern),
    f2 a rougher positive-amplitude prior; noise variance 0.1.
    """
    rng = np.random.default_rng(seed)
    x = np.linspace(0.0, 200.0, 1000)
    osc = Product(children=(Cosine(frequency=0.4 * np.pi), Matern32(variance=1.0, lengthscale=500.0)))
    amp = Matern52(variance=2.0, lengthscale=3.0)
    f1 = sample_gp(osc, x, rng)
    f2 = sample_gp(amp, x, rng)
    y = f1 * softplus(f2) + np.sqrt(0.1) * rng.standard_normal(x.size)
    return {"x": x, "y": y, "f1": f1, "f2": f2}


def synth_gprn(seed):
    """Three correlated output streams mixed from two latent processes.

    400 evenly spaced steps on [-17, 147]; latent functions use lengthscale
    10, the 3x2 mixing weights lengthscale 70, all unit variance, and the
    noise covariance couples the streams. The middle third (indices
    134..266) of streams 2 and 3 is flagged as held out.
    """
    rng = np.random.default_rng(seed)
    n = 400
    x = np.linspace(-17.0, 147.0, n)
    k_f = Matern52(variance=1.0, lengthscale=10.0)
    k_w = Matern52(variance=1.0, lengthscale=70.0)
    latents = np.stack([sample_gp(k_f, x, rng) for _ in range(2)], axis=1)  # (N, 2)
    weights = np.stack(
        [sample_gp(k_w, x, rng) for _ in range(6)], axis=1
    ).reshape(n, 2, 3)  # column-major packing: w[:, i, j] = W_{j, i}
    w_mat = np.swapaxes(weights, 1, 2)  # (N, 3, 2)
    signal = np.einsum("nji,ni->nj", w_mat, latents)
    chol, _ = cholesky_psd(GPRN_NOISE_COV)
    y = signal + rng.standard_normal((n, 3)) @ chol.T
    missing = np.zeros((n, 3), dtype=bool)
    missing[134:267, 1] = True
    missing[134:267, 2] = True
    f_latent = np.concatenate([latents, weights.reshape(n, 6)], axis=1)  # (N, 8)
    return {
        "x": x,
        "y": y,
        "signal": signal,
        "latent": f_latent,
        "missing": missing,
    }
