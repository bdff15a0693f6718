import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from bnk.backends import DenseModel
from bnk.datasets import GPRN_NOISE_COV, load_motorcycle, synth_gprn, synth_product
from bnk.exceptions import ParseError
from bnk.experiments import (
    DETERMINISTIC_FIELDS,
    ExperimentConfig,
    crossval_folds,
    nlpd,
    rmse,
    run_experiment,
)
from bnk.kernels import Matern32
from bnk.likelihoods import Gaussian, Gprn
from bnk.linalg import mvn_logpdf
from bnk.quadrature import gauss_hermite
from bnk.rules import MethodConfig


def test_motorcycle_has_canonical_size():
    x, y = load_motorcycle()
    assert x.size == 133
    assert y.size == 133


def test_motorcycle_standardised():
    x, y = load_motorcycle()
    for col in (x, y):
        assert abs(col.mean()) <= 1e-10
        assert abs(col.std() - 1.0) <= 1e-10


def test_motorcycle_missing_column(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("times,accel\n1.0,2.0\n3.0\n")
    with pytest.raises(ParseError) as err:
        load_motorcycle(bad)
    assert err.value.row == 3


def test_motorcycle_non_numeric(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("1.0,2.0\n3.0,oops\n")
    with pytest.raises(ParseError):
        load_motorcycle(bad)


def test_synth_product_deterministic():
    a = synth_product(7)
    b = synth_product(7)
    for key in ("x", "y", "f1", "f2"):
        assert np.array_equal(a[key], b[key])
    assert not np.array_equal(a["y"], synth_product(8)["y"])


def test_synth_product_grid():
    data = synth_product(0)
    x = data["x"]
    assert x.size == 1000
    assert x[0] == 0.0 and x[-1] == 200.0
    assert np.allclose(np.diff(x), x[1] - x[0])


def test_synth_product_amplitude_variance():
    draws = [synth_product(seed)["f2"] for seed in range(20)]
    var = np.mean([np.var(d) for d in draws])
    assert abs(var - 2.0) <= 0.5


def test_synth_gprn_mask_and_noise():
    data = synth_gprn(3)
    missing = data["missing"]
    assert missing.shape == (400, 3)
    assert not missing[:, 0].any()
    assert np.array_equal(np.where(missing[:, 1])[0], np.arange(134, 267))
    assert np.array_equal(np.where(missing[:, 2])[0], np.arange(134, 267))
    # Noise residuals match the coupled covariance to sampling accuracy.
    residuals = np.vstack([synth_gprn(s)["y"] - synth_gprn(s)["signal"] for s in range(10)])
    cov = np.cov(residuals.T)
    assert np.abs(cov - GPRN_NOISE_COV).max() <= 0.01


def test_synth_gprn_packing_consistent():
    data = synth_gprn(5)
    lik = Gprn(noise_cov=GPRN_NOISE_COV)
    nu = lik.conditional_mean(data["latent"])
    assert np.abs(nu - data["signal"]).max() <= 1e-12


def test_crossval_partition_properties():
    folds = crossval_folds(133, 4, seed=11)
    seen = np.concatenate([t for _, t in folds])
    assert np.array_equal(np.sort(seen), np.arange(133))
    again = crossval_folds(133, 4, seed=11)
    for (tr, te), (tr2, te2) in zip(folds, again):
        assert np.array_equal(tr, tr2) and np.array_equal(te, te2)
    other = crossval_folds(133, 4, seed=12)
    assert any(not np.array_equal(a[1], b[1]) for a, b in zip(folds, other))


def test_nlpd_matches_conjugate_closed_form():
    rng = np.random.default_rng(61)
    x = np.sort(rng.uniform(0, 5, size=12))
    y = rng.normal(size=12)
    noise = 0.4
    model = DenseModel(Matern32(), Gaussian(variance=noise), x, y)
    model.fit(MethodConfig(rule="newton", rho=1.0), max_iters=3)
    x_star = np.array([1.3, 4.2])
    y_star = np.array([0.2, -0.5])
    pm, pc = model.predict(x_star)
    got = nlpd(pm, pc, model.likelihood, y_star, gauss_hermite(1, 30))
    want = -np.mean(
        [
            mvn_logpdf([y_star[i]], pm[i], pc[i] + noise * np.eye(1))
            for i in range(2)
        ]
    )
    assert abs(got - want) <= 1e-6


def test_rmse_zero_for_perfect_recovery():
    truth = np.linspace(0, 1, 10)
    assert rmse(truth, truth) == 0.0
    assert rmse(truth + 1.0, truth) == pytest.approx(1.0)


def test_nlpd_invariant_to_ignored_latents():
    # Appending an unused latent dimension must not change the density of y.
    rng = np.random.default_rng(62)
    means1 = rng.normal(size=(5, 1))
    covs1 = 0.3 * np.ones((5, 1, 1))
    y = rng.normal(size=5)
    lik = Gaussian(variance=0.5)
    base = nlpd(means1, covs1, lik, y, gauss_hermite(1, 20))

    class PaddedGaussian(Gaussian):
        latent_dim = 2

        def conditional_mean(self, f):
            f = self._f(f)
            return f[..., :1]

        def dmean(self, f):
            f = self._f(f)
            out = np.zeros(f.shape[:-1] + (1, 2))
            out[..., 0, 0] = 1.0
            return out

        def log_density(self, yy, ff):
            yy, ff = self._y(yy), self._f(ff)
            return (
                -0.5 * np.log(2 * np.pi * self.variance)
                - 0.5 * (yy[..., 0] - ff[..., 0]) ** 2 / self.variance
            )

    means2 = np.concatenate([means1, rng.normal(size=(5, 1))], axis=1)
    covs2 = np.zeros((5, 2, 2))
    covs2[:, 0, 0] = 0.3
    covs2[:, 1, 1] = 0.7
    padded = nlpd(means2, covs2, PaddedGaussian(variance=0.5), y, gauss_hermite(2, 20))
    assert abs(base - padded) <= 1e-10


def _tiny_config(tmp_path, **overrides):
    base = dict(
        experiment="hsced",
        rule="vgn",
        rho=0.3,
        xi=0.5,
        backend="dense",
        seed=0,
        folds=2,
        iters=4,
        out=str(tmp_path),
        plots=False,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def _strip_wall(path):
    rows = list(csv.reader(open(path)))
    idx = rows[0].index("wall_ms")
    return [tuple(v for i, v in enumerate(r) if i != idx) for r in rows]


def test_run_experiment_writes_expected_files(tmp_path):
    summary = run_experiment(_tiny_config(tmp_path))
    assert Path(summary["mean_file"]).exists()
    assert len(summary["fold_files"]) == 2
    rows = list(csv.DictReader(open(summary["fold_files"][0])))
    assert set(rows[0]) == {
        "iteration", "energy", "train_nlpd", "test_nlpd", "rmse",
        "psd_violations", "wall_ms",
    }
    assert summary["total_psd_violations"] == 0


def test_run_experiment_deterministic(tmp_path):
    s1 = run_experiment(_tiny_config(tmp_path / "a"))
    s2 = run_experiment(_tiny_config(tmp_path / "b"))
    mean1 = open(s1["mean_file"], "rb").read()
    mean2 = open(s2["mean_file"], "rb").read()
    assert mean1 == mean2
    for f1, f2 in zip(s1["fold_files"], s2["fold_files"]):
        assert _strip_wall(f1) == _strip_wall(f2)


def test_run_experiment_seed_changes_output(tmp_path):
    s1 = run_experiment(_tiny_config(tmp_path / "a"))
    s2 = run_experiment(_tiny_config(tmp_path / "b", seed=1))
    assert open(s1["mean_file"], "rb").read() != open(s2["mean_file"], "rb").read()


def test_run_experiment_renders_figures(tmp_path):
    cfg = _tiny_config(tmp_path, plots=True)
    run_experiment(cfg)
    assert (tmp_path / "hsced_vgn_fit.png").exists()
    assert (tmp_path / "hsced_vgn_energy.png").exists()
    assert (tmp_path / "hsced_vgn_nlpd.png").exists()


def test_cli_round_trip(tmp_path):
    out = tmp_path / "cli"
    proc = subprocess.run(
        [
            sys.executable, "-m", "bnk.cli", "run",
            "--experiment", "hsced", "--rule", "vgn", "--rho", "0.3",
            "--folds", "2", "--iters", "3", "--seed", "0",
            "--out", str(out), "--no-plots",
        ],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert "mean final test NLPD" in proc.stdout
    assert (out / "hsced_vgn_mean.csv").exists()


def test_cli_config_file_with_flag_override(tmp_path):
    conf = tmp_path / "run.toml"
    conf.write_text(
        'experiment = "hsced"\nrule = "vgn"\nrho = 0.3\nfolds = 2\n'
        f'iters = 3\nseed = 0\nout = "{tmp_path}/fromfile"\nplots = false\n'
    )
    proc = subprocess.run(
        [sys.executable, "-m", "bnk.cli", "run", "--config", str(conf),
         "--out", str(tmp_path / "flagwins")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "flagwins" / "hsced_vgn_mean.csv").exists()
    assert not (tmp_path / "fromfile").exists()


def test_cli_rejects_bad_config_before_compute(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "bnk.cli", "run", "--experiment", "hsced"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 2
    assert "configuration invalid" in proc.stderr


def test_cli_nonzero_exit_on_unguarded_psd_failure(tmp_path):
    # Full-Hessian second-order linearisation goes indefinite on this task.
    proc = subprocess.run(
        [sys.executable, "-m", "bnk.cli", "run",
         "--experiment", "hsced", "--rule", "pl2", "--folds", "2",
         "--iters", "50", "--seed", "0", "--out", str(tmp_path), "--no-plots"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 1
    assert "PSD failure" in proc.stderr


def test_cli_check_command():
    proc = subprocess.run(
        [sys.executable, "-m", "bnk.cli", "check"], capture_output=True, text=True
    )
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert proc.stdout.count("PASS") == 7


def test_mean_file_omits_wall_time(tmp_path):
    summary = run_experiment(_tiny_config(tmp_path))
    header = open(summary["mean_file"]).readline().strip().split(",")
    assert header == list(DETERMINISTIC_FIELDS)
