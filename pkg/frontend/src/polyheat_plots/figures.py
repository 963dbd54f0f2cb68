"""Paper-style figures: error/estimator/effectivity panels and mesh plots."""

import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .csvdata import MeshData, RunData

NORMS = {
    "LinfL2": ("err_LinfL2", "est_LinfL2", "eff_LinfL2"),
    "L2H1": ("err_L2H1", "est_L2H1", "eff_L2H1"),
}


def final_rate(coarse: RunData, fine: RunData, column: str) -> float:
    a = coarse.series(column)[-1]
    b = fine.series(column)[-1]
    if not (a > 0 and b > 0):
        return float("nan")
    return float(np.log(a / b) / np.log(coarse.h / fine.h))


def plot_convergence(runs: list[RunData], norm: str, out_path: str):
    """Three panels (error, estimator, effectivity vs t) with rate notes.

    Runs are ordered coarse to fine; the finest is drawn solid, the others
    dashed.  Returns (figure path, annotation dict).
    """
    if len(runs) < 2:
        raise ValueError("need at least two runs for a convergence figure")
    if norm not in NORMS:
        raise ValueError(f"unknown norm {norm!r}")
    err_col, est_col, eff_col = NORMS[norm]
    runs = sorted(runs, key=lambda r: -r.h)

    rates = {
        "error": final_rate(runs[-2], runs[-1], err_col),
        "estimator": final_rate(runs[-2], runs[-1], est_col),
    }

    fig, axes = plt.subplots(1, 3, figsize=(13, 4))
    titles = ("error", "estimator", "effectivity")
    columns = (err_col, est_col, eff_col)
    for ax, title, col in zip(axes, titles, columns):
        for run in runs[:-1]:
            ax.plot(run.t, run.series(col), "--", lw=1,
                    label=f"h={run.h:.3g}")
        fine = runs[-1]
        ax.plot(fine.t, fine.series(col), "-", lw=2, color="black",
                label=f"h={fine.h:.3g} (finest)")
        if title != "effectivity":
            ax.set_yscale("log")
            ax.annotate(f"rate ≈ {rates[title]:.2f}",
                        xy=(0.05, 0.05), xycoords="axes fraction")
        ax.set_title(f"{norm} {title}")
        ax.set_xlabel("t")
        ax.grid(alpha=0.3)
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path, rates


def plot_components(run: RunData, out_path: str) -> str:
    """Per-step estimator components of one run on a log scale."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for col, label in (("eta_ellip_L2", "elliptic L2"),
                       ("eta_ellip_H1", "elliptic H1"),
                       ("eta_space", "space"), ("eta_time", "time"),
                       ("eta_dataT", "data (time)"),
                       ("eta_dataS", "data (space)"), ("eta_mesh", "mesh")):
        vals = run.series(col)
        mask = vals > 0
        if mask.any():
            ax.semilogy(run.t[mask], vals[mask], label=label, lw=1)
    ax.set_xlabel("t")
    ax.set_title("estimator components")
    ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path


def plot_mesh(mesh: MeshData, out_path: str, overlay=None) -> str:
    """Filled polygon rendering, optionally with an analytic curve overlay."""
    from matplotlib.collections import PolyCollection

    polys = [mesh.vertices[ring] for ring in mesh.cells]
    fig, ax = plt.subplots(figsize=(5.5, 5.5))
    coll = PolyCollection(polys, facecolors="#dce8f4", edgecolors="#2a3a4a",
                          linewidths=0.5)
    ax.add_collection(coll)
    if overlay is not None:
        xs = np.linspace(0, 1, 200)
        ys = np.array([overlay(x) for x in xs])
        keep = (ys >= 0) & (ys <= 1)
        ax.plot(xs[keep], ys[keep], "r-", lw=1.5)
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.set_aspect("equal")
    ax.set_title(f"{len(mesh.cells)} cells")
    fig.tight_layout()
    fig.savefig(out_path, dpi=130)
    plt.close(fig)
    return out_path
