"""Result serialization: delimited tables, JSON sidecars, and figures.

Figures are rendered straight to files next to the delimited output; nothing
here opens a window.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from . import __version__
from .sim import SimSummary

__all__ = [
    "write_summary_csv",
    "write_summary_json",
    "render_summary_figure",
    "render_bregman_figure",
    "write_json",
]


def write_json(payload: dict, path, config: dict | None = None) -> None:
    """Dump a result payload with tool version and resolved config attached."""
    body = {"tool_version": __version__}
    if config is not None:
        body["config"] = config
    body.update(payload)
    Path(path).write_text(json.dumps(body, indent=2, sort_keys=False) + "\n")


def write_summary_csv(summary: SimSummary, path) -> None:
    """Per-estimator rows with bias/RMSE and their Monte Carlo errors."""
    frame = summary.to_frame()
    frame.insert(0, "scenario", summary.scenario)
    frame.insert(1, "theta", summary.theta)
    frame.to_csv(path)


def write_summary_json(summary: SimSummary, path, config: dict | None = None) -> None:
    """Solver diagnostics sidecar for a Monte Carlo run."""
    rows = {}
    for name, row in summary.rows.items():
        rows[name] = {
            "n_used": row.n_used,
            "n_failed": row.n_failed,
            "max_constraint_residual": _none_if_nan(row.max_residual),
            "bias": _none_if_nan(row.bias),
            "rmse": _none_if_nan(row.rmse),
            "coverage": _none_if_nan(row.coverage),
            "var_rel_bias": _none_if_nan(row.var_rel_bias),
        }
    write_json(
        {
            "scenario": summary.scenario,
            "theta": summary.theta,
            "n_reps": summary.n_reps,
            "estimators": rows,
        },
        path,
        config=config,
    )


def _none_if_nan(x):
    return None if x is None or (isinstance(x, float) and np.isnan(x)) else x


def render_summary_figure(summary: SimSummary, path) -> None:
    """Bar chart of RMSE per estimator with the bias overlaid as points."""
    names = list(summary.rows)
    rmse = [summary.rows[n].rmse for n in names]
    bias = [summary.rows[n].bias for n in names]
    fig, ax = plt.subplots(figsize=(max(6.0, 0.55 * len(names) + 2.0), 4.0))
    pos = np.arange(len(names))
    ax.bar(pos, rmse, color="#4878a8", label="RMSE")
    ax.plot(pos, np.abs(bias), "o", color="#d1495b", label="|bias|")
    ax.set_xticks(pos)
    ax.set_xticklabels(names, rotation=45, ha="right")
    ax.set_ylabel("error")
    ax.set_title(f"{summary.scenario}: B={summary.n_reps}")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_bregman_figure(report, path, top: int = 15) -> None:
    """Per-unit divergence contributions, largest first, plus the split
    between baseline constraints and extras."""
    order = np.argsort(report.per_unit)[::-1][:top]
    fig, axes = plt.subplots(1, 2, figsize=(9.0, 4.0))
    axes[0].bar(["baseline", "extras"], [report.baseline, report.extras],
                color=["#4878a8", "#d1495b"])
    axes[0].set_title(f"divergence split (total {report.total:.4g})")
    axes[1].bar(np.arange(order.size), report.per_unit[order], color="#4878a8")
    axes[1].set_xticks(np.arange(order.size))
    axes[1].set_xticklabels([str(int(i)) for i in order], rotation=90, fontsize=7)
    axes[1].set_title("largest per-unit contributions")
    axes[1].set_xlabel("responded unit index")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
