#!/usr/bin/env python3
"""Plot accuracy-vs-weights-removed curves from trajectory CSVs.

Usage: python3 docs/plot_trajectories.py runs/ [out.png]

Dashed lines are constituent metrics, solid lines composite runs. Curves
with the same (metric, k) are averaged pointwise over seeds.
"""
import csv
import sys
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def load(path):
    meta, rows = {}, []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("#"):
                if "=" in line:
                    k, v = line[1:].split("=", 1)
                    meta[k.strip()] = v.strip()
            elif line and not line.startswith("step,"):
                rows.append(line)
    parsed = list(csv.reader(rows))
    removed = [float(r[4]) for r in parsed]
    acc = [float(r[5]) for r in parsed]
    return meta, removed, acc


def main():
    run_dir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("runs")
    out = sys.argv[2] if len(sys.argv) > 2 else "trajectories.png"
    groups = defaultdict(list)
    for path in sorted(run_dir.glob("*.csv")):
        if path.name == "summary.csv":
            continue
        meta, removed, acc = load(path)
        key = (meta.get("metric", "?"), meta.get("k", "0"))
        groups[key].append((removed, acc))

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for (metric, k), runs in sorted(groups.items()):
        steps = min(len(r) for r, _ in runs)
        removed = [sum(r[i] for r, _ in runs) / len(runs) for i in range(steps)]
        acc = [sum(a[i] for _, a in runs) / len(runs) for i in range(steps)]
        label = f"{metric} (k={k})" if metric == "composite" else metric
        style = "-" if metric == "composite" else "--"
        ax.plot(removed, acc, style, label=label, linewidth=1.6)
    ax.set_xlabel("convolution weights removed (%)")
    ax.set_ylabel("top-1 test accuracy")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
