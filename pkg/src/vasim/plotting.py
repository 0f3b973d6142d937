"""Batch figures: VA heatmaps, zone profiles, defocus sweeps, Bland-Altman plots."""
from __future__ import annotations

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.colors import LinearSegmentedColormap, Normalize
from matplotlib.figure import Figure

# blue -> yellow, close to the MATLAB default map
BLUE_YELLOW = LinearSegmentedColormap.from_list(
    "blue_yellow",
    ["#352a87", "#0f5cdd", "#1481d6", "#06a4ca", "#2eb7a4",
     "#87bf77", "#d1bb59", "#fec832", "#f9fb0e"],
    N=256,
)
BLUE_YELLOW.set_bad("#bbbbbb")

HEATMAP_RANGE = (-0.2, 1.1)
GOOD_VA_LOGMAR = 0.2
_PNG_META = {"Software": None}


def heatmap_rgb(values: np.ndarray, vmin: float = HEATMAP_RANGE[0],
                vmax: float = HEATMAP_RANGE[1]) -> np.ndarray:
    """uint8 RGB image of ``values`` with out-of-range values clamped."""
    norm = Normalize(vmin=vmin, vmax=vmax, clip=True)
    # same byte conversion as the rendered PNG
    rgba = BLUE_YELLOW(norm(np.ma.masked_invalid(values)), bytes=True)
    return np.asarray(rgba)[..., :3]


def _save(fig: Figure, path) -> None:
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=100, metadata=_PNG_META)


def plot_heatmap(va_map, path, vmin: float = HEATMAP_RANGE[0], vmax: float = HEATMAP_RANGE[1],
                 title: str | None = None) -> None:
    xs, ys = va_map.xs, va_map.ys
    step_x = xs[1] - xs[0] if len(xs) > 1 else 1.0
    step_y = ys[1] - ys[0] if len(ys) > 1 else 1.0
    extent = (xs[0] - step_x / 2, xs[-1] + step_x / 2, ys[0] - step_y / 2, ys[-1] + step_y / 2)
    fig = Figure(figsize=(5.2, 4.4))
    ax = fig.add_subplot()
    norm = Normalize(vmin=vmin, vmax=vmax, clip=True)
    im = ax.imshow(np.ma.masked_invalid(va_map.mean_logmar), origin="lower", extent=extent,
                   cmap=BLUE_YELLOW, norm=norm, interpolation="nearest")
    fig.colorbar(im, ax=ax, label="VA [logMAR]")
    ax.set_xlabel("x [mm]")
    ax.set_ylabel("y [mm]")
    ax.set_title(title or va_map.provenance.get("design", ""))
    fig.tight_layout()
    _save(fig, path)
    return fig


def plot_profiles(profiles: dict, blur_rows: dict, path, threshold: float = GOOD_VA_LOGMAR) -> None:
    """
    Zone profiles: VA (top row) and blur strength (bottom row) per line.

    ``profiles`` maps design label -> {y_mm: [(x, mean, sd), ...]};
    ``blur_rows`` maps design label -> {y_mm: [(x, blur_d), ...]}.
    """
    ys = sorted({y for rows in profiles.values() for y in rows}, reverse=True)
    if not ys or any(len(r) == 0 for rows in profiles.values() for r in rows.values()):
        raise ValueError("empty profile")
    fig = Figure(figsize=(4.0 * len(ys), 6.5))
    axes = fig.subplots(2, len(ys), squeeze=False)
    letters = "ABCDEFGHIJKL"
    for k, y in enumerate(ys):
        top, bottom = axes[0, k], axes[1, k]
        lo, hi = threshold, threshold
        for label, rows in profiles.items():
            if y not in rows:
                continue
            data = np.array(rows[y], dtype=float)
            top.errorbar(data[:, 0], data[:, 1], yerr=data[:, 2], label=label, capsize=2, lw=1.2)
            lo, hi = min(lo, np.nanmin(data[:, 1] - data[:, 2])), max(hi, np.nanmax(data[:, 1] + data[:, 2]))
        top.axhline(threshold, ls="--", color="k", lw=0.8)
        top.set_ylim(lo - 0.05, hi + 0.05)
        top.set_title(f"{letters[k]}   y = {y:g} mm")
        top.set_ylabel("VA [logMAR]")
        for label, rows in blur_rows.items():
            if y in rows:
                data = np.array(rows[y], dtype=float)
                bottom.plot(data[:, 0], data[:, 1], label=label, lw=1.2)
        bottom.set_title(f"{letters[k + len(ys)]}")
        bottom.set_xlabel("x [mm]")
        bottom.set_ylabel("blur strength [D]")
    axes[0, 0].legend()
    fig.tight_layout()
    _save(fig, path)
    return fig


def plot_sweep(rows, path, reference=None) -> None:
    """Mean VA +/- SD against added defocus; ``reference`` is an optional (D, VA, SD) list."""
    data = np.array([(d, r.mean_logmar, r.sd_logmar) for d, r in rows], dtype=float)
    fig = Figure(figsize=(5, 4))
    ax = fig.add_subplot()
    ax.errorbar(data[:, 0], data[:, 1], yerr=data[:, 2], color="tab:red", marker="o",
                capsize=3, label="simulated")
    if reference is not None:
        ref = np.asarray(reference, dtype=float)
        ax.errorbar(ref[:, 0], ref[:, 1], yerr=ref[:, 2], color="tab:blue", marker="s",
                    capsize=3, label="reference")
    ax.set_xlabel("additional defocus [D]")
    ax.set_ylabel("VA [logMAR]")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)
    return fig


def plot_bland_altman(report, path) -> None:
    fig = Figure(figsize=(5, 4))
    ax = fig.add_subplot()
    ax.scatter(report.means, report.diffs, s=14)
    for v, ls in ((report.bias, "-"), (report.loa_low, "--"), (report.loa_high, "--")):
        ax.axhline(v, ls=ls, color="k", lw=0.8)
    ax.set_xlabel("mean of methods [logMAR]")
    ax.set_ylabel("difference [logMAR]")
    fig.tight_layout()
    _save(fig, path)
    return fig
