"""Figure rendering for experiment runs.

Kept out of the inference core: only the CLI report path imports this.
Figures land next to the CSV output as PNG files.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_experiment_figures(cfg, payloads, all_rows, mean_rows, out_dir):
    """Write the posterior-fit, energy-trace, and NLPD-trace figures."""
    stem = f"{cfg.experiment}_{cfg.rule}"
    payload = next((p for p in payloads if p is not None), None)
    if payload is not None:
        _render_fit(payload, out_dir / f"{stem}_fit.png", cfg)
    _render_trace(
        all_rows, mean_rows, "energy", out_dir / f"{stem}_energy.png", f"{stem}: energy"
    )
    _render_trace(
        all_rows, mean_rows, "test_nlpd", out_dir / f"{stem}_nlpd.png", f"{stem}: test NLPD"
    )


def _render_fit(payload, path, cfg):
    kind = payload["kind"]
    if kind == "latent-bands":
        fig, ax = plt.subplots(figsize=(8, 4))
        ax.plot(payload["x"], payload["y"], "k.", ms=4, alpha=0.6, label="data")
        grid, mean, sd = payload["grid"], payload["mean"], payload["sd"]
        band = 1.96 * np.sqrt(sd**2 + payload["obs_sd"] ** 2)
        ax.plot(grid, mean, "C0", lw=1.5, label="posterior mean")
        ax.fill_between(grid, mean - band, mean + band, color="C0", alpha=0.2, label="95% predictive")
        ax.set_xlabel("input (standardised)")
        ax.set_ylabel("output (standardised)")
        ax.legend(loc="best", fontsize=8)
    elif kind == "latent-truth":
        fig, axes = plt.subplots(2, 1, figsize=(9, 5), sharex=True)
        x = payload["x"]
        for i, ax in enumerate(axes):
            ax.plot(x, payload["truth"][:, i], "k-", lw=1, alpha=0.7, label="ground truth")
            ax.plot(x, payload["mean"][:, i], "C1", lw=1, label="posterior mean")
            band = 1.96 * payload["sd"][:, i]
            ax.fill_between(
                x, payload["mean"][:, i] - band, payload["mean"][:, i] + band,
                color="C1", alpha=0.2,
            )
            ax.set_ylabel(f"latent {i + 1}")
            if i == 0:
                ax.legend(loc="best", fontsize=8)
        axes[-1].set_xlabel("input")
    else:  # streams
        fig, axes = plt.subplots(3, 1, figsize=(9, 6), sharex=True)
        x, y, missing = payload["x"], payload["y"], payload["missing"]
        for j, ax in enumerate(axes):
            obs = ~missing[:, j]
            ax.plot(x[obs], y[obs, j], "k.", ms=3, alpha=0.5, label="observed")
            if missing[:, j].any():
                ax.plot(x[~obs], y[~obs, j], "r.", ms=3, alpha=0.5, label="held out")
            ax.plot(x, payload["signal"][:, j], "k-", lw=0.8, alpha=0.6)
            ax.plot(x, payload["pred"][:, j], "C2", lw=1.2, label="posterior mean")
            ax.set_ylabel(f"stream {j + 1}")
            if j == 0:
                ax.legend(loc="best", fontsize=8)
        axes[-1].set_xlabel("input")
    _save(fig, path)


def _render_trace(all_rows, mean_rows, key, path, title):
    fig, ax = plt.subplots(figsize=(7, 4))
    for i, rows in enumerate(all_rows):
        vals = [(r["iteration"], r[key]) for r in rows if r.get(key) is not None]
        if vals:
            it, v = zip(*vals)
            ax.plot(it, v, alpha=0.35, lw=0.8, label=f"fold {i}")
    vals = [(r["iteration"], r[key]) for r in mean_rows if r.get(key) is not None]
    if vals:
        it, v = zip(*vals)
        ax.plot(it, v, "k-", lw=1.8, label="fold mean")
    ax.set_xlabel("sweep")
    ax.set_ylabel(key.replace("_", " "))
    ax.set_title(title, fontsize=10)
    ax.legend(loc="best", fontsize=7)
    _save(fig, path)
