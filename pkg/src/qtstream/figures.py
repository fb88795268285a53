"""Matplotlib rendering of experiment reports.

Figures are written next to the delimited output; the report data stays
plot-ready on its own, so rendering is always optional.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _detection_time_figure(report, path: str) -> None:
    t_stars = [r["t_star"] for r in report.runs if r["t_star"] is not None]
    fig, ax = plt.subplots(figsize=(6, 4))
    if t_stars:
        ax.hist(t_stars, bins=min(60, max(10, len(t_stars) // 20)), color="#4878a8")
    tau = next((r["tau"] for r in report.runs if r.get("tau")), None)
    if tau:
        ax.axvline(tau, color="#a84848", linestyle="--", label=f"change point ({tau})")
        ax.legend()
    ax.set_xlabel("detection time")
    ax.set_ylabel("runs")
    ax.set_title(f"{report.experiment}: detection times")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _auc_by_lag_figure(report, path: str) -> None:
    series = report.aggregates.get("auc_by_lag", {})
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, by_lag in series.items():
        lags = sorted(int(l) for l in by_lag)
        ax.plot(lags, [by_lag[str(l)] if str(l) in by_lag else by_lag[l] for l in lags],
                marker="o", label=name)
    ax.axhline(0.5, color="grey", linestyle=":", linewidth=1)
    ax.set_xlabel("lag after change")
    ax.set_ylabel("AUC")
    ax.set_ylim(0.0, 1.05)
    ax.set_title(f"{report.experiment}: detection power by lag")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_threshold_curve(table, path: str) -> str:
    """Raw conditional quantiles against the fitted 1/t polynomial."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(table.raw_t, table.raw_h, ".", markersize=2, alpha=0.4, label="raw quantiles")
    grid = np.linspace(1, float(table.raw_t[-1]), 500)
    ax.plot(grid, table.threshold_at(grid), color="#a84848", label="fitted polynomial")
    ax.set_xlabel("t")
    ax.set_ylabel("threshold")
    ax.set_title(f"thresholds, target ARL0 = {table.meta.arl0_target:g}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_report_figures(report, outdir) -> list[str]:
    """Render the figures applicable to this report; return file paths."""
    os.makedirs(outdir, exist_ok=True)
    written = []
    if any(r["t_star"] is not None for r in report.runs):
        path = os.path.join(outdir, "detection_times.png")
        _detection_time_figure(report, path)
        written.append(path)
    if report.aggregates.get("auc_by_lag"):
        path = os.path.join(outdir, "auc_by_lag.png")
        _auc_by_lag_figure(report, path)
        written.append(path)
    return written
