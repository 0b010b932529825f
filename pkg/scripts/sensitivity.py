"""Alpha and T sensitivity grid on DoubleIntegrator at reduced training length.

    python3 scripts/sensitivity.py --total-steps 128                      # 2x2 grid
    python3 scripts/sensitivity.py --alphas 0.01 0.1 1 10 100 --Ts 4 8 16 32 64 --total-steps 250

Each cell trains from the same seed and is evaluated at N=8, l=4 with 8 obstacles.
"""
import argparse
import csv
import sys

from gcbflab.eval import METRIC_COLUMNS, sweep_sensitivity
from gcbflab.rng import RngState
from gcbflab.trainer import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--alphas", type=float, nargs="+", default=[1.0, 100.0])
    ap.add_argument("--Ts", type=int, nargs="+", default=[4, 32])
    ap.add_argument("--total-steps", type=int, default=128)
    ap.add_argument("--updates-per-step", type=int, default=1)
    ap.add_argument("--eval-steps", type=int, default=4096)
    ap.add_argument("--instances", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    base = TrainConfig(total_steps=a.total_steps, updates_per_step=a.updates_per_step)
    w = csv.writer(sys.stdout, lineterminator="\n")
    cols = ["alpha", "T", *METRIC_COLUMNS]
    w.writerow(cols)

    def emit(cell):
        d = cell.row()
        w.writerow([d[c] for c in cols])
        sys.stdout.flush()

    sweep_sensitivity(base, RngState(a.seed), a.alphas, a.Ts, a.eval_steps, a.instances, log=emit)


if __name__ == "__main__":
    main()
