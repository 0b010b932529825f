"""Safety, reach and runtime against the number of agents at a fixed workspace side.

    python3 scripts/scaling.py --env SingleIntegrator --controller deccbf0.1 --area 8 --n 8 16 32 64
    python3 scripts/scaling.py --checkpoint runs/desk/checkpoint.json --area 8 --n 8 16 32

Evaluation only. Agent counts above 256 need --full-scale. A MemoryError stops
the series, and the largest completed N is reported.
"""
import argparse
import csv
import sys

from gcbflab.eval import METRIC_COLUMNS, ExperimentSpec, scaling_experiment
from gcbflab.io import checkpoint_load


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--env", default="DoubleIntegrator")
    ap.add_argument("--controller", default="nominal")
    ap.add_argument("--checkpoint", help="trained checkpoint; implies the gcbf+ controller")
    ap.add_argument("--area", type=float, default=8.0)
    ap.add_argument("--n", type=int, nargs="+", default=[8, 16, 32, 64, 128, 256])
    ap.add_argument("--obstacles", type=int, default=0)
    ap.add_argument("--steps", type=int, default=4096)
    ap.add_argument("--instances", type=int)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--full-scale", action="store_true")
    a = ap.parse_args()
    policies = None
    controller = a.controller
    if a.checkpoint:
        nets, _ = checkpoint_load(a.checkpoint, expect_env=a.env)
        policies, controller = {a.seed: nets["policy"]}, "gcbf+"
    spec = ExperimentSpec(a.env, controller, a.n, a.area, [a.obstacles], a.steps, a.instances, [a.seed], a.full_scale)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(METRIC_COLUMNS + ["seconds", "edges_per_agent"])

    def emit(row):
        d = row.metrics.row()
        w.writerow([d[c] for c in METRIC_COLUMNS] + [round(row.seconds, 2), row.mean_edges_per_agent])
        sys.stdout.flush()

    _, largest = scaling_experiment(spec, policies, log=emit)
    print(f"# largest completed N: {largest}", file=sys.stderr)


if __name__ == "__main__":
    main()
