"""Desk-scale end-to-end run on DoubleIntegrator: train, evaluate, audit attention.

    python3 scripts/desk_training.py --out runs/desk            # default: 1000 steps, 1 update each
    python3 scripts/desk_training.py --updates-per-step 8 --out runs/desk-u8

Writes loss.jsonl, checkpoint.json/.bin, metrics.csv (learned and nominal rows)
and summary.json under --out.
"""
import argparse
import json
from dataclasses import replace
from pathlib import Path

from gcbflab.eval import METRIC_COLUMNS, check_assumption1, rollout_eval
from gcbflab.io import JsonlLog, checkpoint_save, save_metrics
from gcbflab.rng import RngState
from gcbflab.trainer import TrainConfig, config_dict, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--total-steps", type=int, default=1000)
    ap.add_argument("--updates-per-step", type=int, default=1)
    ap.add_argument("--eval-steps", type=int, default=4096)
    ap.add_argument("--instances", type=int, default=8)
    ap.add_argument("--probes", type=int, default=1000)
    a = ap.parse_args()
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = replace(TrainConfig(), total_steps=a.total_steps, updates_per_step=a.updates_per_step)
    log = JsonlLog(out / "loss.jsonl")

    def ckpt(state):
        checkpoint_save(out / f"checkpoint-{state.step:06d}.json", {"cert": state.cert, "policy": state.policy}, cfg.env, state.step, config_dict(cfg))

    res = train(cfg, RngState(a.seed), log=log, checkpoint=ckpt)
    log.close()
    st = res.state
    checkpoint_save(out / "checkpoint.json", {"cert": st.cert, "policy": st.policy}, cfg.env, st.step, config_dict(cfg))
    _, learned = rollout_eval(cfg.env, "gcbf+", 8, 4.0, 8, a.eval_steps, a.instances, a.seed, st.policy)
    _, nominal = rollout_eval(cfg.env, "nominal", 8, 4.0, 8, a.eval_steps, a.instances, a.seed)
    save_metrics(out / "metrics.csv", [learned.row(), nominal.row()], METRIC_COLUMNS)
    audit = check_assumption1(st.cert, RngState(a.seed), a.probes, st.policy)
    summary = {
        "steps": st.step, "adam_updates": st.opt_cert.step,
        "learned": {k: learned.row()[k] for k in ("safety", "reach", "success")},
        "nominal": {k: nominal.row()[k] for k in ("safety", "reach", "success")},
        "attention_far": audit.band_mean(0.9, 1.0), "attention_near": audit.band_mean(0.4, 0.5),
        "decays": audit.decays, "locality_failures": audit.locality_failures, "probes": audit.probes,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))


if __name__ == "__main__":
    main()
