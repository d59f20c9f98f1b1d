"""Figure rendering for the report-producing commands.

Reports stay plot-ready tables; these helpers render companion PNGs next
to the delimited output (bias/efficiency panels for the simulation study,
accuracy-versus-landmark curves for cross-validation).
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

_GROUP_ORDER = ["longitudinal", "lts", "survival", "variance"]
_GROUP_COLORS = {"longitudinal": "#dce9f5", "lts": "#e4f1dd",
                 "survival": "#f6e3d3", "variance": "#eee4f2"}


def _ordered(table: pd.DataFrame) -> pd.DataFrame:
    table = table.copy()
    table["__order"] = table["group"].map({g: i for i, g in enumerate(_GROUP_ORDER)})
    return table.sort_values(["__order"], kind="mergesort").reset_index(drop=True)


def mc_study_figure(table: pd.DataFrame, path, title: str = "") -> None:
    """Percent-bias and relative-efficiency panels over grouped parameters."""
    sub = _ordered(table)
    x = np.arange(len(sub))
    fig, axes = plt.subplots(2, 1, figsize=(10, 7), sharex=True)
    for ax in axes:
        start = 0
        for g in _GROUP_ORDER:
            width = int((sub["group"] == g).sum())
            if width:
                ax.axvspan(start - 0.5, start + width - 0.5,
                           color=_GROUP_COLORS[g], alpha=0.8, zorder=0)
                start += width
    for col, label, style in (("pct_bias_cca", "CCA", "o--"), ("pct_bias_em", "EM", "s-")):
        if "n" in sub.columns:
            for n_val, chunk in sub.groupby("n"):
                axes[0].plot(x[:len(chunk)], chunk[col], style, ms=3,
                             label=f"{label} n={n_val}")
        else:
            axes[0].plot(x, sub[col], style, ms=3, label=label)
    axes[0].axhline(0.0, color="k", lw=0.8)
    axes[0].set_ylabel("percent bias")
    axes[0].legend(fontsize=8)
    if "n" in sub.columns:
        for n_val, chunk in sub.groupby("n"):
            axes[1].plot(x[:len(chunk)], chunk["rel_efficiency"], "s-", ms=3,
                         label=f"n={n_val}")
        axes[1].legend(fontsize=8)
    else:
        axes[1].plot(x, sub["rel_efficiency"], "s-", ms=3, color="tab:green")
    axes[1].axhline(1.0, color="k", lw=0.8)
    axes[1].set_ylabel("SD(EM) / SD(CCA)")
    axes[1].set_xlabel("parameter index (grouped)")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def evaluate_figure(report: pd.DataFrame, path, title: str = "") -> None:
    """Accuracy versus landmark year, one panel per metric."""
    metrics = list(dict.fromkeys(report["metric"]))
    year_cols = [c for c in report.columns if c.startswith("year")]
    years = [float(c[4:]) for c in year_cols]
    fig, axes = plt.subplots(1, len(metrics), figsize=(3.2 * len(metrics), 3.4),
                             squeeze=False)
    for ax, metric in zip(axes[0], metrics):
        chunk = report[report["metric"] == metric]
        for _, row in chunk.iterrows():
            ax.plot(years, [row[c] for c in year_cols], "o-", ms=4, label=str(row["target"]))
        ax.set_title(metric.upper())
        ax.set_xlabel("landmark year")
        ax.legend(fontsize=7)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def bootstrap_figure(names, sds, path, top: int = 40) -> None:
    """Horizontal bar chart of the largest bootstrap standard deviations."""
    order = np.argsort(sds)[::-1][:top]
    fig, ax = plt.subplots(figsize=(7, max(3, 0.22 * len(order))))
    ax.barh(np.arange(len(order)), np.asarray(sds)[order][::-1], color="tab:blue")
    ax.set_yticks(np.arange(len(order)))
    ax.set_yticklabels([names[i] for i in order][::-1], fontsize=6)
    ax.set_xlabel("bootstrap SD")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
