"""Companion plotting script for sbmre output directories.

Plots whatever it finds: mean X_phi over steps from ledger_*.csv, and the
replica-averaged field from spde.csv. Needs matplotlib, which the package
itself does not import.

    python3 scripts/plot_outputs.py OUT_DIR [--save fig.png]
"""
from __future__ import annotations

import argparse
import csv
from collections import defaultdict
from pathlib import Path

import matplotlib.pyplot as plt


def _mean_by(path: Path, key: str, value: str) -> tuple[list[float], list[float]]:
    acc: dict[float, list[float]] = defaultdict(list)
    with path.open() as fh:
        for row in csv.DictReader(fh):
            acc[float(row[key])].append(float(row[value]))
    xs = sorted(acc)
    return xs, [sum(acc[x]) / len(acc[x]) for x in xs]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--save", type=Path, default=None)
    args = ap.parse_args()

    ledgers = sorted(args.out_dir.glob("ledger_*.csv"))
    spde = args.out_dir / "spde.csv"
    panels = len(ledgers) + spde.exists()
    if not panels:
        raise SystemExit(f"nothing to plot in {args.out_dir}")
    fig, axes = plt.subplots(1, panels, figsize=(4 * panels, 3), squeeze=False)
    axes = list(axes[0])
    for path in ledgers:
        ax = axes.pop(0)
        ax.plot(*_mean_by(path, "step", "X_phi"))
        ax.set(title=path.stem, xlabel="step", ylabel="mean X_phi")
    if spde.exists():
        ax = axes.pop(0)
        ax.plot(*_mean_by(spde, "x", "u"))
        ax.set(title="spde", xlabel="x", ylabel="mean u")
    fig.tight_layout()
    if args.save:
        fig.savefig(args.save)
    else:
        plt.show()


if __name__ == "__main__":
    main()
