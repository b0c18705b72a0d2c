"""Render figures from training/ablation CSV outputs.

Kept out of the package on purpose: commands emit tidy CSV, this script just
draws them.

Usage:
    python3 scripts/plot_metrics.py run_dir/metrics.csv [more.csv ...] -o curves.png
    python3 scripts/plot_metrics.py run_dir/ablation.csv -o ablation.png
"""
import argparse
import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def load_rows(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def plot_training(paths, out):
    fig, axes = plt.subplots(1, 3, figsize=(14, 4))
    for path in paths:
        rows = load_rows(path)
        label = os.path.basename(os.path.dirname(os.path.abspath(path))) or path
        steps = [int(r["env_steps"]) for r in rows]
        axes[0].plot(steps, [float(r["mean_return"]) for r in rows], label=label)
        axes[1].plot(steps, [float(r["value_loss"]) for r in rows], label=label)
        axes[2].plot(steps, [float(r["orth_loss"]) for r in rows], label=label)
    for ax, title in zip(axes, ["mean return", "value loss", "orthogonality loss"]):
        ax.set_xlabel("env steps")
        ax.set_title(title)
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    print(f"wrote {out}")


def plot_ablation(path, out):
    rows = load_rows(path)
    metrics = sorted({r["metric"] for r in rows})
    variants = sorted({r["variant"] for r in rows})
    fig, axes = plt.subplots(1, len(metrics), figsize=(5 * len(metrics), 4), squeeze=False)
    for ax, metric in zip(axes[0], metrics):
        data = [[float(r["value"]) for r in rows
                 if r["variant"] == v and r["metric"] == metric] for v in variants]
        ax.boxplot(data, tick_labels=variants)
        ax.set_title(metric)
        ax.tick_params(axis="x", rotation=20)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    print(f"wrote {out}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("csvs", nargs="+")
    ap.add_argument("-o", "--out", default="plot.png")
    args = ap.parse_args()
    first = load_rows(args.csvs[0])
    if first and "variant" in first[0]:
        plot_ablation(args.csvs[0], args.out)
    else:
        plot_training(args.csvs, args.out)


if __name__ == "__main__":
    main()
