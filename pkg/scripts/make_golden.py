"""Regenerate the golden file examples under docs/golden from the real writers."""
import json
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from gcbflab.cli import main
from gcbflab.dynamics import DynamicsConfig
from gcbflab.gnn import GnnParams
from gcbflab.io import checkpoint_save, save_scenario, save_trajectory
from gcbflab.rng import RngState
from gcbflab.rollout import NominalController, simulate
from gcbflab.world import Obstacles, World, sample_scenario

OUT = Path(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).resolve().parents[1] / "docs" / "golden")


def run_dir(root: Path) -> Path:
    (d,) = [p for p in root.iterdir() if p.is_dir()]
    return d


def main_golden():
    OUT.mkdir(parents=True, exist_ok=True)
    # scenario files, 2D boxes and 3D spheres
    w2 = sample_scenario("DoubleIntegrator", 3, 1.5, 1, RngState(0))
    save_scenario(OUT / "scenario.json", w2)
    w3 = sample_scenario("LinearDrone", 2, 1.0, 1, RngState(0))
    save_scenario(OUT / "scenario_3d.json", w3)
    # trajectory of two single-integrator agents over three steps
    si = DynamicsConfig("SingleIntegrator")
    w = World("SingleIntegrator", np.array([[0.5, 0.5], [1.5, 0.5]]), np.array([[0.5, 1.5], [1.5, 1.5]]), Obstacles.empty(2))
    save_trajectory(OUT / "trajectory.jsonl", simulate(si, [w], NominalController(si), 3))
    # a checkpoint with one tiny network (real ones list every psi tensor the same way)
    tiny = GnnParams({"psi4.2.W": np.array([[0.5], [-0.25]]), "psi4.2.b": np.array([0.125])}, 1)
    checkpoint_save(OUT / "checkpoint.json", {"cert": tiny}, "DoubleIntegrator", 0, {"env": "DoubleIntegrator"})
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        cfg = {
            "env": "DoubleIntegrator", "seed": 0, "out_dir": str(tmp / "train"),
            "world": {"n_agents": 3, "n_obstacles": 1, "area": 1.5},
            "train": {"total_steps": 2, "n_scenarios": 1, "rollout_length": 4, "batch_size": 4, "collect_every": 2},
            "experiment": {"steps": 16, "instances": 1},
        }
        (tmp / "cfg.json").write_text(json.dumps(cfg))
        assert main(["train", "--config", str(tmp / "cfg.json")]) == 0
        run = run_dir(tmp / "train")
        for name in ("loss.jsonl", "timing.jsonl"):
            shutil.copy(run / name, OUT / name)
        effective = json.loads((run / "config.json").read_text())
        effective["out_dir"] = "runs"
        (OUT / "config.json").write_text(json.dumps(effective, indent=2, sort_keys=True) + "\n")
        assert main(["baseline", "cbf1.0", "--env", "SingleIntegrator", "--n-agents", "4", "--n-obstacles", "0", "--area", "1.5",
                     "--steps", "64", "--instances", "2", "--out", str(tmp / "base")]) == 0
        shutil.copy(run_dir(tmp / "base") / "metrics.csv", OUT / "metrics.csv")
        assert main(["check", "cbf1.0", "theorem1", "--env", "SingleIntegrator", "--n-agents", "4", "--n-obstacles", "0",
                     "--area", "1.5", "--steps", "64", "--instances", "2", "--out", str(tmp / "check")]) == 0
        shutil.copy(run_dir(tmp / "check") / "audit.jsonl", OUT / "audit_theorem1.jsonl")
        assert main(["check", str(run / "checkpoint.json"), "assumption1", "--probes", "20", "--out", str(tmp / "a1")]) == 0
        shutil.copy(run_dir(tmp / "a1") / "audit.jsonl", OUT / "audit_assumption1.jsonl")
        assert main(["sweep", "--config", str(tmp / "cfg.json"), "--alphas", "1", "--Ts", "4", "32", "--total-steps", "2",
                     "--steps", "16", "--instances", "1", "--out", str(tmp / "sweep")]) == 0
        shutil.copy(run_dir(tmp / "sweep") / "sweep.csv", OUT / "sweep.csv")


if __name__ == "__main__":
    main_golden()
