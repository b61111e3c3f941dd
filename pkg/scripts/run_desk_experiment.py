#!/usr/bin/env python3
"""Run the desk-scale teacher/baseline/student comparison and print the table.

Example:
    python scripts/run_desk_experiment.py --out runs/desk --epochs 20 --seeds 1 2 3
"""

from __future__ import annotations

import argparse
from pathlib import Path

from lupidet.experiment import run_desk_experiment


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/desk_experiment", help="artifact directory")
    parser.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    parser.add_argument("--alphas", type=float, nargs="+", default=[0.0, 0.25, 0.5, 0.75, 1.0])
    parser.add_argument("--epochs", type=int, default=20)
    args = parser.parse_args()

    result = run_desk_experiment(
        Path(args.out), seeds=tuple(args.seeds), alphas=tuple(args.alphas), epochs=args.epochs
    )

    print("\n=== test mAP@50 per seed ===")
    header = "seed   teacher  baseline " + " ".join(f"a={a:<5g}" for a in result.alphas if a > 0)
    print(header)
    for o in result.outcomes:
        cells = [f"{o.students[a].map_50:.3f}" for a in result.alphas if a > 0]
        print(f"{o.seed:<6} {o.teacher.map_50:.3f}    {o.baseline.map_50:.3f}    " + "  ".join(cells))

    means = result.student_means()
    print("\n=== means over seeds ===")
    print(f"teacher   {result.mean_map50('teacher'):.3f}")
    for alpha in result.alphas:
        label = "baseline " if alpha == 0 else f"alpha={alpha:<4g}"
        print(f"{label} {means[alpha]:.3f}")
    best = result.best_alpha()
    print(f"\nbest alpha: {best:g} "
          f"(+{means[best] - result.mean_map50('baseline'):.3f} mAP@50 over baseline)")
    print(f"teacher gain over baseline: "
          f"+{result.mean_map50('teacher') - result.mean_map50('baseline'):.3f} mAP@50")


if __name__ == "__main__":
    main()
