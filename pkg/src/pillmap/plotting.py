"""
PNG figures for run reports (matplotlib, non-interactive backend).
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Circle, Polygon  # noqa: E402


def _extent(grid):
    x0, y0, x1, y1 = grid.bounds
    return (x0, x1, y0, y1)


def _pill_outline(z, n_arc=24):
    P, Q, r = z[:2], z[2:4], z[4]
    d = Q - P
    L = np.hypot(*d)
    if L == 0.0:
        return None
    ang = np.arctan2(d[1], d[0])
    a1 = np.linspace(ang + np.pi / 2, ang + 3 * np.pi / 2, n_arc)
    a2 = a1 + np.pi
    arc_p = P + r * np.c_[np.cos(a1), np.sin(a1)]
    arc_q = Q + r * np.c_[np.cos(a2), np.sin(a2)]
    return np.vstack([arc_p, arc_q])


def draw_pills(ax, design, color="tab:red"):
    Z = design.matrix() if hasattr(design, "matrix") else np.asarray(design).reshape(-1, 5)
    for k, z in enumerate(Z):
        outline = _pill_outline(z)
        if outline is None:
            ax.add_patch(Circle(z[:2], z[4], fill=False, ec=color, lw=1.2))
        else:
            ax.add_patch(Polygon(outline, closed=True, fill=False, ec=color, lw=1.2))
        ax.plot([z[0], z[2]], [z[1], z[3]], color=color, lw=0.6, ls=":")
        ax.annotate(str(k), 0.5 * (z[:2] + z[2:4]), color=color, fontsize=7, ha="center", va="center")


def _field(ax, values, grid, title, cmap="gray_r", vmin=0.0, vmax=1.0):
    im = ax.imshow(values, origin="lower", extent=_extent(grid), cmap=cmap, vmin=vmin, vmax=vmax,
                   interpolation="nearest")
    ax.set_title(title)
    ax.set_aspect("equal")
    return im


def plot_design(path, design, target, title="pills over target"):
    fig, ax = plt.subplots(figsize=(7, 3.8), layout="constrained")
    _field(ax, target.values, target.grid, title)
    draw_pills(ax, design)
    x0, y0, x1, y1 = target.grid.bounds
    ax.set_xlim(x0, x1)
    ax.set_ylim(y0, y1)
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_fields(path, target, density):
    grid = target.grid
    residual = target.values - density
    fig, axes = plt.subplots(2, 2, figsize=(10, 5.5), layout="constrained")
    _field(axes[0, 0], target.values, grid, "target")
    _field(axes[0, 1], density, grid, "density")
    im = _field(axes[1, 0], residual, grid, "residual", cmap="RdBu_r", vmin=-1.0, vmax=1.0)
    fig.colorbar(im, ax=axes[1, 0], shrink=0.8)
    im = _field(axes[1, 1], np.abs(residual), grid, "|residual|", cmap="magma")
    fig.colorbar(im, ax=axes[1, 1], shrink=0.8)
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_trace(path, trace):
    """Objective against evaluation index, one color per stage.

    Stages with positive objectives (tracking) share a log axis; the others
    (reward) get a linear panel of their own.
    """
    arr = np.array([(e, v, s) for e, v, s in trace], dtype=float).reshape(-1, 3)
    stages = np.unique(arr[:, 2])
    pos = [s for s in stages if np.all(arr[arr[:, 2] == s, 1] > 0)]
    other = [s for s in stages if s not in pos]
    groups = [g for g in (other, pos) if g]
    fig, axes = plt.subplots(1, max(1, len(groups)), figsize=(5 * max(1, len(groups)), 3.5),
                             layout="constrained", squeeze=False)
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for ax, group in zip(axes[0], groups):
        for s in group:
            sel = arr[:, 2] == s
            ax.plot(arr[sel, 0], arr[sel, 1], marker=".", ms=3, color=colors[int(s) % len(colors)],
                    label=f"stage {int(s)}")
        if group is pos:
            ax.set_yscale("log")
        ax.set_xlabel("function evaluations")
        ax.set_ylabel("objective")
        ax.legend()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_figures(outdir, design, target, density, trace) -> list[Path]:
    out = Path(outdir)
    files = [out / "design.png", out / "fields.png", out / "trace.png"]
    plot_design(files[0], design, target)
    plot_fields(files[1], target, density)
    plot_trace(files[2], trace)
    return files
