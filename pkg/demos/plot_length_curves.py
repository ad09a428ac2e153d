"""Accuracy against path length, one curve per architecture.

Reads the grid CSV written by ``mtlpath compare`` and averages over seeds.
Draws a PNG when matplotlib is installed and prints a text table otherwise.

    python demos/plot_length_curves.py grid.csv [out.png]
"""

import sys
from collections import defaultdict

from mtlpath.metrics import DISPLAY_NAMES, load_grid_csv


def length_curves(path, metric="accuracy"):
    """{architecture: [(m, mean metric over seeds), ...]} sorted by m."""
    acc = defaultdict(lambda: defaultdict(list))
    for row in load_grid_csv(path):
        acc[row["architecture"]][row["m"]].append(row[metric])
    return {a: [(m, sum(v) / len(v)) for m, v in sorted(by_m.items())] for a, by_m in acc.items()}


def main(argv):
    curves = length_curves(argv[0])
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        for arch, pts in curves.items():
            print(f"{DISPLAY_NAMES.get(arch, arch):<24}" + "  ".join(f"m={m}:{v:.4f}" for m, v in pts))
        return
    fig, ax = plt.subplots(figsize=(6, 4))
    for arch, pts in curves.items():
        ax.plot([m for m, _ in pts], [v for _, v in pts], marker="o", label=DISPLAY_NAMES.get(arch, arch))
    ax.set_xlabel("path length m")
    ax.set_ylabel("accuracy")
    ax.legend(fontsize=8)
    fig.tight_layout()
    out = argv[1] if len(argv) > 1 else "length_curves.png"
    fig.savefig(out, dpi=120)
    print(f"wrote {out}")


if __name__ == "__main__":
    main(sys.argv[1:])
