"""SVG figures for experiment runs (matplotlib, Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from .coarse_grain import key_box  # noqa: E402
from .constants import optimal_radius, rate_function, unit_ball_volume  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_volume_histogram(samples: dict, reference: float, path) -> None:
    """Histograms of scaled sausage volumes per t with the LLN limit marked."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for t, vals in sorted(samples.items()):
        ax.hist(vals, bins=30, histtype="step", density=True, label=f"t = {t:g}")
    ax.axvline(reference, color="k", ls="--", label=r"$\omega_d R_0^d$")
    ax.set_xlabel(r"$t^{-d/(d+2)} |W_t^C|$")
    ax.set_ylabel("density")
    ax.legend()
    _save(fig, path)


def plot_ldp(points, d: int, nu: float, path) -> None:
    """Empirical ball-strategy rates against the analytic rate function."""
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = np.array([p.x for p in points])
    grid = np.linspace(0.5 * xs.min(), 1.5 * xs.max(), 400)
    ax.plot(grid, rate_function(grid, d, nu), "k-", label="I(x)")
    ax.plot(xs, [p.empirical_rate for p in points], "o", label="simulated")
    ax.axvline(unit_ball_volume(d) * optimal_radius(d, nu) ** d, color="0.6", ls=":")
    ax.set_xlabel("x")
    ax.set_ylabel("rate")
    ax.legend()
    _save(fig, path)


def plot_exit_decay(fit, path) -> None:
    """Log survival in the unit ball with the fitted slope."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(fit.times, fit.log_survival, "-", lw=1, label="particle system")
    lo, hi = fit.window
    s = np.linspace(lo, hi, 50)
    ax.plot(s, fit.log_prefactor - fit.rate * s, "--", label=f"fit, rate {fit.rate:.4f}")
    ax.plot(s, fit.log_prefactor - fit.exact_rate * s, ":", label=f"exact {fit.exact_rate:.4f}")
    ax.set_xlabel("s")
    ax.set_ylabel(r"$\log P(T > s)$")
    ax.legend()
    _save(fig, path)


def plot_moe(result, path) -> None:
    """Density boxes, bad boxes and trap centers in the unit square."""
    fig, ax = plt.subplots(figsize=(5, 5))
    L = result.params.L
    for key in result.density_boxes:
        b = key_box(key, L)
        ax.add_patch(Rectangle(b.lower, *(np.subtract(b.upper, b.lower)), fc="tab:blue", alpha=0.35, lw=0))
    for key in result.bad_boxes:
        b = key_box(key, L)
        ax.add_patch(Rectangle(b.lower, *(np.subtract(b.upper, b.lower)), fc="tab:red", alpha=0.6, lw=0))
    if len(result.points):
        ax.plot(result.points[:, 0], result.points[:, 1], "k.", ms=1)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_aspect("equal")
    ax.set_title(f"eps = {result.params.epsilon:g}: density (blue), bad (red)")
    _save(fig, path)
