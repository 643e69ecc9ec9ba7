"""Figures for experiment reports, written straight to image files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .corruption import Scenario  # noqa: E402
from .harness import MECHANISM_TITLES, SCENARIO_ORDER, SCENARIO_TITLES, ExperimentReport  # noqa: E402

RC = {
    "figure.dpi": 120,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "attnrobust",
}
PALETTE = ("#1b6ca8", "#d1495b", "#edae49", "#66a182", "#8d6a9f")
CORRUPTED = tuple(s for s in SCENARIO_ORDER if s is not Scenario.CLEAN)


def _matrix(report: ExperimentReport, scenarios, field: str) -> np.ndarray:
    mechs = report.mechanisms
    out = np.full((len(scenarios), len(mechs)), np.nan)
    for i, scen in enumerate(scenarios):
        for j, m in enumerate(mechs):
            c = report.cell(m, scen)
            value = None if c is None or c.failed else getattr(c, field)
            if value is not None:
                out[i, j] = value
    return out


def absolute_heatmap(report: ExperimentReport, path: str | Path) -> Path:
    """Scenario x mechanism grid of absolute accuracy; failed cells are hatched."""
    mechs = report.mechanisms
    scens = [s for s in SCENARIO_ORDER if any(report.cell(m, s) for m in mechs)]
    acc = _matrix(report, scens, "absolute_pct")
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(1.4 * max(len(mechs), 1) + 2.0, 0.6 * max(len(scens), 1) + 1.4))
        if acc.size == 0:
            ax.text(0.5, 0.5, "no results", ha="center", va="center", transform=ax.transAxes)
            ax.set_axis_off()
            fig.savefig(path)
            plt.close(fig)
            return Path(path)
        im = ax.imshow(np.ma.masked_invalid(acc), cmap="viridis", vmin=0, vmax=100, aspect="auto")
        ax.set_xticks(range(len(mechs)), [MECHANISM_TITLES.get(m, m) for m in mechs], rotation=20, ha="right")
        ax.set_yticks(range(len(scens)), [SCENARIO_TITLES[s] for s in scens])
        for i in range(len(scens)):
            for j in range(len(mechs)):
                cell = report.cell(mechs[j], scens[i])
                if cell is None:
                    ax.text(j, i, "n/a", ha="center", va="center", color="0.5")
                elif np.isnan(acc[i, j]):
                    ax.add_patch(plt.Rectangle((j - 0.5, i - 0.5), 1, 1, fill=False, hatch="//", lw=0))
                    ax.text(j, i, "failed", ha="center", va="center", color="0.2")
                else:
                    ax.text(j, i, f"{acc[i, j]:.1f}", ha="center", va="center",
                            color="white" if acc[i, j] < 60 else "black")
        fig.colorbar(im, ax=ax, label="accuracy (%)")
        ax.set_title("Absolute test accuracy")
        path = Path(path)
        fig.savefig(path, metadata={"Software": None} if path.suffix == ".png" else None)
        plt.close(fig)
    return path


def relative_chart(report: ExperimentReport, path: str | Path) -> Path:
    """Relative accuracy per corrupted scenario.

    A radar chart needs three or more axes, so with fewer corrupted
    scenarios this falls back to grouped bars.
    """
    mechs = report.mechanisms
    scens = [s for s in CORRUPTED if any(report.cell(m, s) for m in mechs)]
    rel = np.nan_to_num(_matrix(report, scens, "relative_pct"), nan=0.0)
    path = Path(path)
    with plt.rc_context(RC):
        if len(scens) >= 3:
            angles = np.linspace(0, 2 * np.pi, len(scens), endpoint=False)
            loop = np.append(angles, angles[0])
            fig, ax = plt.subplots(figsize=(5, 5), subplot_kw={"projection": "polar"})
            ax.set_theta_offset(np.pi / 2)
            ax.set_theta_direction(-1)
            ax.set_rlabel_position(180 / len(scens))
            ax.tick_params(axis="y", labelsize=7, labelcolor="0.4")
            for j, m in enumerate(mechs):
                vals = np.append(rel[:, j], rel[0, j])
                color = PALETTE[j % len(PALETTE)]
                ax.plot(loop, vals, color=color, lw=1.5, label=MECHANISM_TITLES.get(m, m))
                ax.fill(loop, vals, color=color, alpha=0.08)
            ax.set_xticks(angles, [SCENARIO_TITLES[s] for s in scens])
            ax.tick_params(axis="x", pad=10)
            ax.set_ylim(0, max(105.0, float(rel.max()) + 5))
            ax.legend(loc="upper right", bbox_to_anchor=(1.35, 1.1), frameon=False)
        else:
            fig, ax = plt.subplots(figsize=(1.2 * max(len(mechs), 1) + 2.5, 3.2))
            width = 0.8 / max(len(scens), 1)
            x = np.arange(len(mechs))
            for i, s in enumerate(scens):
                ax.bar(x + (i - (len(scens) - 1) / 2) * width, rel[i], width,
                       color=PALETTE[i % len(PALETTE)], label=SCENARIO_TITLES[s])
            ax.axhline(100, color="0.4", lw=0.8, ls="--")
            ax.set_xticks(x, [MECHANISM_TITLES.get(m, m) for m in mechs], rotation=20, ha="right")
            ax.set_ylabel("relative accuracy (%)")
            if scens:
                ax.legend(frameon=False)
        ax.set_title("Accuracy relative to clean baseline", pad=18 if len(scens) >= 3 else 6)
        fig.savefig(path, metadata={"Software": None} if path.suffix == ".png" else None)
        plt.close(fig)
    return path


def render_figures(report: ExperimentReport, out_dir: str | Path, fmt: str = "png") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return [
        absolute_heatmap(report, out_dir / f"absolute_heatmap.{fmt}"),
        relative_chart(report, out_dir / f"relative_accuracy.{fmt}"),
    ]
