"""Render figures from a run's delimited outputs.

Reads metrics.csv (and sweep.csv when present) and writes PNG files next to
them: training curves, discard ratio over epochs, a gate-activity map, the
per-block weight-percentile fan charts that show collapse, and the
epsilon / compression / accuracy trade-off for sweeps.
"""

from __future__ import annotations

import csv
import os
from collections import defaultdict

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _read_metrics(path: str):
    per_block: dict[str, dict[str, list]] = defaultdict(
        lambda: {"epoch": [], "off": [], "resp": [],
                 "wmin": [], "wp7": [], "wp50": [], "wp93": [], "wmax": []})
    summary = {"epoch": [], "train_loss": [], "val_error": [], "lr": [],
               "discard_ratio": []}
    with open(path) as fh:
        for row in csv.DictReader(fh):
            if row["block"] == "net":
                summary["epoch"].append(int(row["epoch"]))
                for key in ("train_loss", "val_error", "lr", "discard_ratio"):
                    summary[key].append(float(row[key]))
                continue
            rec = per_block[row["block"]]
            rec["epoch"].append(int(row["epoch"]))
            rec["off"].append(float(row["gate_off_fraction"])
                              if row["gate_off_fraction"] else np.nan)
            rec["resp"].append(float(row["max_abs_response"])
                               if row["max_abs_response"] else np.nan)
            for key in ("wmin", "wp7", "wp50", "wp93", "wmax"):
                rec[key].append(float(row[key]))
    return per_block, summary


def _save(fig, out_dir: str, name: str, written: list[str]) -> None:
    path = os.path.join(out_dir, name)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    written.append(path)


def render_run_report(run_dir: str, out_dir: str | None = None) -> list[str]:
    """Figures for one training run; returns the written file paths."""
    metrics = os.path.join(run_dir, "metrics.csv")
    if not os.path.exists(metrics):
        raise FileNotFoundError(f"no metrics.csv in {run_dir}")
    out_dir = out_dir or run_dir
    os.makedirs(out_dir, exist_ok=True)
    per_block, summary = _read_metrics(metrics)
    written: list[str] = []
    epochs = summary["epoch"]

    fig, ax1 = plt.subplots(figsize=(7, 4))
    ax1.plot(epochs, summary["train_loss"], color="tab:blue", label="train loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(epochs, summary["val_error"], color="tab:red", label="val error")
    ax2.set_ylabel("validation error", color="tab:red")
    ax2.set_ylim(0, 1)
    ax1.set_title("training curves")
    _save(fig, out_dir, "training_curves.png", written)

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.step(epochs, summary["discard_ratio"], where="post", color="tab:green")
    ax.set_xlabel("epoch")
    ax.set_ylabel("discard ratio")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title("fraction of prunable blocks identified as identity")
    _save(fig, out_dir, "discard_ratio.png", written)

    gated = {name: rec for name, rec in per_block.items()
             if not all(np.isnan(rec["off"]))}
    if gated:
        names = sorted(gated)
        grid = np.full((len(names), len(epochs)), np.nan)
        for i, name in enumerate(names):
            rec = gated[name]
            for e, off in zip(rec["epoch"], rec["off"]):
                if e - epochs[0] < grid.shape[1]:
                    grid[i, e - epochs[0]] = off
        fig, ax = plt.subplots(figsize=(8, 0.4 * len(names) + 2))
        im = ax.imshow(grid, aspect="auto", cmap="cividis", vmin=0, vmax=1,
                       interpolation="nearest",
                       extent=(epochs[0] - 0.5, epochs[-1] + 0.5,
                               len(names) - 0.5, -0.5))
        ax.set_yticks(range(len(names)))
        ax.set_yticklabels(names, fontsize=8)
        ax.set_xlabel("epoch")
        ax.set_title("gate-off fraction per block")
        fig.colorbar(im, ax=ax, label="fraction of samples gated off")
        _save(fig, out_dir, "gate_activity.png", written)

    blocks = sorted(per_block)
    ncols = 3
    nrows = (len(blocks) + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(4 * ncols, 2.4 * nrows),
                             squeeze=False, sharex=True)
    for i, name in enumerate(blocks):
        ax = axes[i // ncols][i % ncols]
        rec = per_block[name]
        for key, style in (("wmax", "-"), ("wp93", "--"), ("wp50", ":"),
                           ("wp7", "--"), ("wmin", "-")):
            ax.plot(rec["epoch"], rec[key], style, linewidth=1)
        ax.set_title(name, fontsize=9)
        ax.axhline(0.0, color="gray", linewidth=0.5)
    for j in range(len(blocks), nrows * ncols):
        axes[j // ncols][j % ncols].axis("off")
    fig.suptitle("weight percentiles per block (max, p93, p50, p7, min)")
    _save(fig, out_dir, "weight_collapse.png", written)

    sweep = os.path.join(run_dir, "sweep.csv")
    if os.path.exists(sweep):
        written += render_sweep_report(sweep, out_dir)
    return written


def render_sweep_report(sweep_csv: str, out_dir: str | None = None) -> list[str]:
    out_dir = out_dir or os.path.dirname(sweep_csv)
    eps, ratio, err = [], [], []
    with open(sweep_csv) as fh:
        for row in csv.DictReader(fh):
            eps.append(float(row["epsilon"]))
            ratio.append(float(row["discard_ratio"]))
            err.append(float(row["val_error"]))
    written: list[str] = []
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.plot(eps, ratio, "o-", color="tab:green")
    ax1.set_xscale("log")
    ax1.set_xlabel("epsilon")
    ax1.set_ylabel("discard ratio", color="tab:green")
    ax1.set_ylim(-0.02, 1.02)
    ax2 = ax1.twinx()
    ax2.plot(eps, err, "s--", color="tab:red")
    ax2.set_ylabel("validation error", color="tab:red")
    ax2.set_ylim(0, 1)
    ax1.set_title("compression / accuracy trade-off")
    _save(fig, out_dir, "sweep_tradeoff.png", written)
    return written
