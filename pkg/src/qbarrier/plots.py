"""Static SVG line charts built only from the CSVs the CLI writes."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _series(rows, x_key, y_key, group_key):
    out = defaultdict(list)
    for r in rows:
        out[r[group_key]].append((float(r[x_key]), float(r[y_key]), float(r.get(y_key.replace("_mean", "_se"), 0) or 0)))
    return {g: sorted(v) for g, v in out.items()}


def _panel(ax, series, xlabel, ylabel):
    for name, pts in series.items():
        x = [p[0] for p in pts]
        y = [p[1] for p in pts]
        se = [p[2] for p in pts]
        ax.plot(x, y, marker="o", ms=3, label=name)
        ax.fill_between(x, [a - b for a, b in zip(y, se)], [a + b for a, b in zip(y, se)], alpha=0.2)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)


def plot_adaptation(summary_csv, out_svg) -> Path:
    """Per-episode return (top) and cost (bottom) against the in-context episode index."""
    rows = read_csv(summary_csv)
    fig, (top, bot) = plt.subplots(2, 1, figsize=(5, 6), sharex=True)
    _panel(top, _series(rows, "episode_k", "return_mean", "variant"), "", "episode return")
    _panel(bot, _series(rows, "episode_k", "cost_mean", "variant"), "in-context episode", "episode cost")
    fig.tight_layout()
    fig.savefig(out_svg, format="svg")
    plt.close(fig)
    return Path(out_svg)


def plot_budget(summary_csv, out_svg) -> Path:
    """Cumulative return (top) and average episode cost (bottom) against the budget."""
    rows = read_csv(summary_csv)
    fig, (top, bot) = plt.subplots(2, 1, figsize=(5, 6), sharex=True)
    _panel(top, _series(rows, "delta", "return_mean", "variant"), "", "cumulative return")
    _panel(bot, _series(rows, "delta", "cost_mean", "variant"), "budget", "avg episode cost")
    deltas = sorted({float(r["delta"]) for r in rows})
    if deltas:
        bot.plot(deltas, deltas, "k--", lw=0.8, label="cost = budget")
        bot.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_svg, format="svg")
    plt.close(fig)
    return Path(out_svg)


def plot_training(log_csv, out_svg) -> Path:
    rows = read_csv(log_csv)
    ep = [int(r["epoch"]) for r in rows]
    fig, axes = plt.subplots(3, 1, figsize=(5, 7), sharex=True)
    for key in ("total", "critic", "wm"):
        axes[0].plot(ep, [float(r[key]) for r in rows], label=key)
    axes[0].set_yscale("symlog")
    axes[0].legend(fontsize=7)
    axes[1].plot(ep, [float(r["train_cost"]) for r in rows], label="episode cost")
    axes[1].plot(ep, [float(r["train_delta"]) for r in rows], "--", label="mean budget")
    axes[1].legend(fontsize=7)
    axes[2].plot(ep, [float(r["lambda_c"]) for r in rows])
    axes[2].set_ylabel("lambda_C")
    axes[2].set_xlabel("epoch")
    fig.tight_layout()
    fig.savefig(out_svg, format="svg")
    plt.close(fig)
    return Path(out_svg)
