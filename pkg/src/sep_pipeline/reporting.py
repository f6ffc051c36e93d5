"""Exploratory statistics of the SEP measures and plot rendering.

Plots are drawn from the same tables that are written to disk, so a reviewer
can always regenerate them elsewhere.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataset import MEASURES, SepMeasures
from .tabular.metrics import pearson, spearman

HIST_BINS = 20


def _describe(v: np.ndarray) -> dict:
    q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75])
    return {"n": int(len(v)), "mean": float(v.mean()), "sd": float(v.std(ddof=1)) if len(v) > 1 else None,
            "median": float(med), "q1": float(q1), "q3": float(q3), "iqr": float(q3 - q1),
            "min": float(v.min()), "max": float(v.max())}


def exploratory_report(sep: Mapping[str, SepMeasures], out_dir, bins: int = HIST_BINS) -> dict:
    """Descriptive statistics, pairwise correlations, histogram counts and scatter data."""
    out_dir = Path(out_dir)
    ids = sorted(sep)
    values = {m: np.array([getattr(sep[h], m) for h in ids], dtype=float) for m in MEASURES}
    report = {"measures": list(MEASURES), "stats": {m: _describe(values[m]) for m in MEASURES},
              "pearson": [[pearson(values[a], values[b]) for b in MEASURES] for a in MEASURES],
              "spearman": [[spearman(values[a], values[b]) for b in MEASURES] for a in MEASURES],
              "histograms": {}}
    for m in MEASURES:
        counts, edges = np.histogram(values[m], bins=bins)
        report["histograms"][m] = {"counts": counts.tolist(), "edges": edges.tolist()}
    (out_dir / "exploratory.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    with open(out_dir / "scatter.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + list(MEASURES))
        for k, h in enumerate(ids):
            w.writerow([h] + [repr(float(values[m][k])) for m in MEASURES])
    plot_histograms(report, out_dir / "histograms.png")
    plot_scatter(values, out_dir / "scatter.png")
    return report


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path) -> None:
    fig.savefig(path, dpi=80, metadata={"Software": None})
    _pyplot().close(fig)


def plot_histograms(report: dict, path) -> None:
    plt = _pyplot()
    fig, axes = plt.subplots(1, len(MEASURES), figsize=(4 * len(MEASURES), 3))
    for ax, m in zip(axes, MEASURES):
        h = report["histograms"][m]
        edges = np.array(h["edges"])
        ax.bar(edges[:-1], h["counts"], width=np.diff(edges), align="edge", color="0.5")
        ax.set_title(m)
    fig.tight_layout()
    _save(fig, path)


def plot_scatter(values: Mapping[str, np.ndarray], path) -> None:
    plt = _pyplot()
    pairs = [(a, b) for i, a in enumerate(MEASURES) for b in MEASURES[i + 1:]]
    fig, axes = plt.subplots(1, len(pairs), figsize=(4 * len(pairs), 3.5))
    for ax, (a, b) in zip(axes, pairs):
        ax.scatter(values[a], values[b], s=4, color="0.3")
        ax.set_xlabel(a)
        ax.set_ylabel(b)
    fig.tight_layout()
    _save(fig, path)


def plot_predictions(observed: np.ndarray, predicted: np.ndarray, title: str, path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(observed, predicted, s=5, color="0.3")
    lo, hi = float(min(observed.min(), predicted.min())), float(max(observed.max(), predicted.max()))
    ax.plot([lo, hi], [lo, hi], color="0.6", lw=1)
    ax.set_xlabel("observed")
    ax.set_ylabel("predicted")
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)


def plot_shap_boxes(abs_grouped: Mapping[str, np.ndarray], type_names: Sequence[str], path) -> None:
    """One panel per measure with the distribution of |grouped phi| per image type."""
    plt = _pyplot()
    fig, axes = plt.subplots(len(abs_grouped), 1, figsize=(9, 3 * len(abs_grouped)), squeeze=False)
    for ax, (label, a) in zip(axes[:, 0], abs_grouped.items()):
        ax.boxplot([a[:, k] for k in range(a.shape[1])], showfliers=False)
        ax.set_xticks(range(1, len(type_names) + 1), type_names, rotation=45, ha="right", fontsize=7)
        ax.set_title(label)
    fig.tight_layout()
    _save(fig, path)


def plot_rmse_bars(rows: Sequence[dict], path) -> None:
    plt = _pyplot()
    labels = [f"{r['measure'][:3]}/{r['predictor_set'][:3]}/{r['algorithm']}" for r in rows]
    fig, ax = plt.subplots(figsize=(max(6, 0.35 * len(rows)), 3.5))
    ax.bar(range(len(rows)), [r["rmse"] for r in rows], color="0.5")
    ax.set_xticks(range(len(rows)), labels, rotation=90, fontsize=6)
    ax.set_ylabel("test RMSE")
    fig.tight_layout()
    _save(fig, path)
