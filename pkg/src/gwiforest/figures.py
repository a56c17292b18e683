"""Matplotlib rendering for saved experiment reports.

Only the report command plots; every other command emits plot-ready CSV.
Two figures: statistic values against the scale with their thresholds, and
(when a raw samples CSV is supplied) histograms of the largest-scale
samples per statistic.
"""

from __future__ import annotations

import csv
import math
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

__all__ = ["render_report_figures"]


def _distance_figure(report: dict, path: str) -> None:
    rows = report["rows"]
    stats = sorted({r["statistic"] for r in rows})
    fig, axes = plt.subplots(
        len(stats), 1, figsize=(7.0, 2.4 * len(stats)), squeeze=False
    )
    for ax, stat in zip(axes[:, 0], stats):
        sub = [r for r in rows if r["statistic"] == stat]
        groups = {}
        for r in sub:
            key = (r["component"], r["coordinate"])
            groups.setdefault(key, []).append(
                (r["scale"], r["value"], r["passed"])
            )
        for (comp, coord), points in sorted(groups.items()):
            points.sort()
            scales = [p for p, _, _ in points]
            values = [v for _, v, _ in points]
            line, = ax.plot(scales, values, marker="o", ms=4,
                            label=f"type {comp} at {coord:g}")
            bad = [(p, v) for p, v, passed in points if not passed]
            if bad:
                ax.plot(*zip(*bad), "x", ms=9, color=line.get_color())
        for thr in sorted({r["threshold"] for r in sub}):
            ax.axhline(thr, ls="--", lw=1.0, color="0.4")
        ax.set_title(stat, fontsize=10)
        ax.set_xlabel("scale p")
        ax.set_ylabel("value")
        ax.legend(fontsize=7, ncol=2)
    fig.suptitle(f"{report['experiment']}: "
                 f"{'PASS' if report['passed'] else 'FAIL'}")
    fig.tight_layout(rect=(0, 0, 1, 0.97))
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _load_sample_groups(samples_path: str) -> dict:
    """Largest-scale samples keyed by (statistic, component, coordinate)."""
    best_scale = {}
    with open(samples_path, "r", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            key = (row["statistic"], int(row["component"]),
                   float(row["coordinate"]))
            scale = int(row["scale"])
            best_scale[key] = max(scale, best_scale.get(key, scale))
    groups = {}
    with open(samples_path, "r", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            key = (row["statistic"], int(row["component"]),
                   float(row["coordinate"]))
            if int(row["scale"]) == best_scale[key]:
                groups.setdefault(key + (best_scale[key],), []).append(
                    float(row["value"])
                )
    return groups


def _sample_figure(samples_path: str, path: str) -> None:
    groups = _load_sample_groups(samples_path)
    n = len(groups)
    cols = min(3, n)
    rows = math.ceil(n / cols)
    fig, axes = plt.subplots(
        rows, cols, figsize=(3.2 * cols, 2.4 * rows), squeeze=False
    )
    flat = axes.ravel()
    for ax in flat[n:]:
        ax.set_axis_off()
    for ax, (key, values) in zip(flat, sorted(groups.items())):
        stat, comp, coord, scale = key
        ax.hist(values, bins=min(60, max(10, len(values) // 20)),
                density=True, color="steelblue", alpha=0.8)
        ax.set_title(f"{stat} type {comp} at {coord:g} (p={scale})",
                     fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_report_figures(report: dict, out_dir: str, samples=None) -> list:
    """Write the report's figures into out_dir; returns the file names."""
    if not report.get("rows"):
        return []
    files = ["distances.png"]
    _distance_figure(report, os.path.join(out_dir, "distances.png"))
    if samples:
        _sample_figure(samples, os.path.join(out_dir, "samples.png"))
        files.append("samples.png")
    return files
