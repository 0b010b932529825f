"""Hand-crafted CBF-QP baselines on SingleIntegrator with the invariance-theorem audit.

    python3 scripts/baselines.py                  # N=8, l=4, 8 instances x 4096 steps
    python3 scripts/baselines.py --n 16 --area 4 --steps 1024

Prints one metrics row per controller and one audit line per controller.
"""
import argparse
import json

from gcbflab.eval import check_theorem1, distance_cbf_channels, rollout_eval

CONTROLLERS = ("nominal", "cbf1.0", "cbf0.1", "deccbf1.0", "deccbf0.1")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--env", default="SingleIntegrator")
    ap.add_argument("--n", type=int, default=8)
    ap.add_argument("--area", type=float, default=4.0)
    ap.add_argument("--obstacles", type=int, default=0)
    ap.add_argument("--steps", type=int, default=4096)
    ap.add_argument("--instances", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--controllers", nargs="+", default=list(CONTROLLERS))
    a = ap.parse_args()
    for c in a.controllers:
        ro, m = rollout_eval(a.env, c, a.n, a.area, a.obstacles, a.steps, a.instances, a.seed)
        h, hdot, active = distance_cbf_channels(ro)
        rep = check_theorem1(ro, h, 1.0, hdot if a.env == "SingleIntegrator" else None, active=active)
        print(json.dumps({"controller": c, "safety": m.safety, "reach": m.reach, "success": m.success, **rep.summary()}))


if __name__ == "__main__":
    main()
