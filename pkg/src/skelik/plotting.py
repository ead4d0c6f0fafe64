"""SVG line charts from flat sweep tables and training logs."""
from __future__ import annotations

import json
import os
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

AXIS_LABELS = {"noise_sigma_mm": "noise sigma (mm)", "occlusion_frac": "occluded fraction",
               "endpoints": "visible keypoints"}
METRIC_LABELS = {"mpjpe": "MPJPE (mm)", "pa_mpjpe": "PA-MPJPE (mm)", "mpvpe": "MPVPE (mm)",
                 "pa_mpvpe": "PA-MPVPE (mm)", "pck150": "PCK@150mm", "auc": "AUC", "rot_error": "rotation error (deg)"}


def _save(fig, path):
    # fixed metadata keeps the SVG bytes reproducible
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def plot_table(rows, out_dir, metrics=("mpjpe",)) -> list:
    """One chart per (axis, metric); one line per solver. Returns written paths."""
    plt.rcParams["svg.hashsalt"] = "skelik"
    series = defaultdict(lambda: defaultdict(list))
    for axis, value, solver, metric, score in rows:
        if metric in metrics:
            series[(axis, metric)][solver].append((value, score))
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for (axis, metric), lines in sorted(series.items()):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for solver, pts in sorted(lines.items()):
            pts.sort()
            style = "--" if solver == "gt-noise" else "-"
            ax.plot([p[0] for p in pts], [p[1] for p in pts], style, marker="o", label=solver)
        ax.set_xlabel(AXIS_LABELS.get(axis, axis))
        ax.set_ylabel(METRIC_LABELS.get(metric, metric))
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = os.path.join(out_dir, f"{axis}_{metric}.svg")
        _save(fig, path)
        paths.append(path)
    return paths


def plot_training_log(log_path, out_path) -> str:
    """Loss terms per iteration and validation MPJPE from a ``metrics.jsonl`` file."""
    plt.rcParams["svg.hashsalt"] = "skelik"
    its, terms, val = [], defaultdict(list), []
    with open(log_path) as fh:
        for line in fh:
            rec = json.loads(line)
            if "val_mpjpe" in rec:
                val.append((rec["iter"], rec["val_mpjpe"]))
            else:
                its.append(rec["iter"])
                for k in ("rotation", "position", "shape"):
                    terms[k].append(rec[k])
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for k, v in terms.items():
        a1.semilogy(its, v, label=k, lw=0.8)
    a1.set_xlabel("iteration")
    a1.set_ylabel("loss term")
    a1.legend(fontsize=8)
    if val:
        a2.plot([v[0] for v in val], [v[1] for v in val], marker="o")
    a2.set_xlabel("iteration")
    a2.set_ylabel("validation MPJPE (mm)")
    for a in (a1, a2):
        a.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, out_path)
    return out_path
