#!/usr/bin/env python3
"""Plot the CSV output of a `pis tune` run.

Usage: plot_run.py <out-dir> [--component 2] [--threshold 2.0] [--save fig.png]

Draws the objective history and the nominal vs. shaped rollout of the
penalized state component. Needs pandas and matplotlib.
"""
import argparse
from pathlib import Path

import matplotlib.pyplot as plt
import pandas as pd


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out", type=Path)
    ap.add_argument("--component", type=int, default=2, help="1-based state index")
    ap.add_argument("--threshold", type=float, default=None)
    ap.add_argument("--save", type=Path, default=None)
    args = ap.parse_args()

    tuning = args.out / "tuning"
    history = pd.read_csv(tuning / "history.csv")
    nominal = pd.read_csv(tuning / "nominal_trajectory.csv")
    shaped_path = tuning / "shaped_trajectory.csv"
    col = f"x{args.component}"

    fig, (ax_l, ax_x) = plt.subplots(1, 2, figsize=(11, 4))
    ax_l.plot(history["iter"], history["L"], marker="o")
    ax_l.set_xlabel("iteration")
    ax_l.set_ylabel("L")
    ax_l.set_title("design objective")

    ax_x.plot(nominal["t"], nominal[col], label="nominal")
    if shaped_path.exists():
        shaped = pd.read_csv(shaped_path)
        ax_x.plot(shaped["t"], shaped[col], label="shaped")
    if args.threshold is not None:
        ax_x.axhline(args.threshold, color="k", linestyle="--", linewidth=0.8, label="threshold")
        ax_x.axhline(-args.threshold, color="k", linestyle=":", linewidth=0.8)
    ax_x.set_xlabel("t")
    ax_x.set_ylabel(col)
    ax_x.legend()
    fig.tight_layout()

    if args.save:
        fig.savefig(args.save, dpi=150)
    else:
        plt.show()


if __name__ == "__main__":
    main()
