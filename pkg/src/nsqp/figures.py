"""Figure rendering for experiment reports.

One PNG per experiment, written next to the delimited output.  The Agg
backend is forced and volatile PNG metadata is stripped so a rerun of
the same experiment reproduces the file byte for byte.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

# drop the version-bearing text chunk; pixel data alone determines the file
_PNG_META = {"Software": None}


def _finish(fig, out_path) -> None:
    fig.tight_layout()
    fig.savefig(out_path, dpi=110, metadata=_PNG_META)
    plt.close(fig)


def save_checks_figure(rows, out_path) -> None:
    """Bar chart of operator identity errors; rows are (name, err, tol, ok)."""
    names = [r[0] for r in rows]
    errs = [max(r[1], 1e-17) for r in rows]
    colors = ["tab:green" if r[3] else "tab:red" for r in rows]
    fig, ax = plt.subplots(figsize=(7.2, 4.2))
    ax.bar(range(len(rows)), errs, color=colors)
    ax.set_yscale("log")
    ax.axhline(rows[0][2], color="k", linestyle="--", linewidth=1,
               label="tolerance")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("max relative error")
    ax.grid(True, axis="y", alpha=0.3)
    ax.legend()
    _finish(fig, out_path)


def save_minimization_figure(path, profile: np.ndarray, out_path) -> None:
    """Norm history and shaped residual density of a minimized path."""
    t = path.times
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9.6, 4.0))
    ax1.plot(t, path.norms_h(), label="|u|_H")
    ax1.plot(t, path.norms_v(), label="|u|_V")
    ax1.set_xlabel("t")
    ax1.set_ylabel("norm")
    ax1.grid(True, alpha=0.3)
    ax1.legend()
    ax2.semilogy(t, np.maximum(profile, 1e-300))
    ax2.set_xlabel("t")
    ax2.set_ylabel("residual density")
    ax2.grid(True, alpha=0.3)
    _finish(fig, out_path)


def save_sweep_figure(reports, out_path) -> None:
    """Minimized values against delta, with the target level drawn in."""
    deltas = [r.delta for r in reports]
    values = [r.value for r in reports]
    gaps = [max(r.rel_gap, 1e-16) for r in reports]
    formula = reports[-1].formula_value
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9.6, 4.0))
    ax1.semilogx(deltas, values, "o-")
    ax1.axhline(formula, color="k", linestyle="--", linewidth=1,
                label="|phi|_V^2")
    ax1.set_xlabel("delta")
    ax1.set_ylabel("minimized action")
    ax1.grid(True, alpha=0.3)
    ax1.legend()
    ax2.loglog(deltas, gaps, "o-")
    ax2.set_xlabel("delta")
    ax2.set_ylabel("relative gap to |phi|_V^2")
    ax2.grid(True, alpha=0.3)
    _finish(fig, out_path)


def save_exit_figure(result, out_path) -> None:
    """log mean exit time against 1/eps with the fitted line."""
    rows = [r for r in result.rows
            if r.eps > 0 and np.isfinite(r.mean_tau) and r.mean_tau > 0]
    x = np.array([1.0 / r.eps for r in rows])
    y = np.array([np.log(r.mean_tau) for r in rows])
    ylo = np.array([np.log(r.ci_lo) if r.ci_lo > 0 else y[i]
                    for i, r in enumerate(rows)])
    yhi = np.array([np.log(r.ci_hi) if r.ci_hi > 0 else y[i]
                    for i, r in enumerate(rows)])
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ax.errorbar(x, y, yerr=[y - ylo, yhi - y], fmt="o", capsize=3,
                label="measured")
    xs = np.linspace(x.min(), x.max(), 50)
    ax.plot(xs, result.slope * xs + result.intercept, "-",
            label=f"fit slope {result.slope:.4f}")
    if result.target is not None:
        ax.plot(xs, result.target * xs + result.intercept, "--",
                label=f"target slope {result.target:.4f}")
    ax.set_xlabel("1/eps")
    ax.set_ylabel("log mean exit time")
    ax.grid(True, alpha=0.3)
    ax.legend()
    _finish(fig, out_path)
