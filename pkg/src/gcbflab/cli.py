"""Command-line entry point: ``gcbflab {train,eval,baseline,check,sweep}``.

Exit codes: 0 success, 2 configuration error (bad config, missing or mismatched
input), 3 runtime error, 4 infeasible scenario.  ``GCBFLAB_THREADS`` caps the
BLAS/OpenMP thread pools; it must be set before the process starts.

Outputs land in ``<out>/<command>-<env>-seed<seed>-<config hash prefix>/`` so a
rerun with the same configuration overwrites the same files.  Metrics files are
deterministic; wall-clock times go to ``timing.jsonl`` only.
"""
from __future__ import annotations

import argparse
import os
import sys

THREAD_VAR = "GCBFLAB_THREADS"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_INFEASIBLE = 0, 2, 3, 4


def apply_thread_limit(environ=os.environ) -> int | None:
    n = environ.get(THREAD_VAR)
    if not n:
        return None
    if not n.isdigit() or int(n) < 1:
        raise ValueError(f"{THREAD_VAR} must be a positive integer, got {n!r}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        environ[var] = n
    return int(n)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gcbflab", description="Learn and audit graph control barrier functions.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="JSON configuration file")
        sp.add_argument("--seed", type=int, help="override the configuration seed")
        sp.add_argument("--out", help="override the output root directory")

    def overrides(sp):
        sp.add_argument("--env", help="environment kind (only without --config)")
        sp.add_argument("--n-agents", type=int, nargs="+")
        sp.add_argument("--n-obstacles", type=int, nargs="+")
        sp.add_argument("--area", type=float)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--instances", type=int)
        sp.add_argument("--trajectory", action="store_true", help="also write trajectory.jsonl for every episode")

    sp = sub.add_parser("train", help="train certificate and policy")
    common(sp)
    sp.add_argument("--env")
    sp.add_argument("--total-steps", type=int)

    sp = sub.add_parser("eval", help="evaluate a trained checkpoint")
    sp.add_argument("checkpoint", help="checkpoint manifest (.json)")
    common(sp)
    overrides(sp)

    sp = sub.add_parser("baseline", help="evaluate a hand-crafted controller")
    sp.add_argument("controller", help="nominal, cbf1.0, cbf0.1, deccbf1.0 or deccbf0.1")
    common(sp)
    overrides(sp)

    sp = sub.add_parser("check", help="audit the invariance theorem or the attention-locality assumption")
    sp.add_argument("target", help="checkpoint manifest, or a baseline name for the theorem audit")
    sp.add_argument("audit", choices=("theorem1", "assumption1"))
    common(sp)
    overrides(sp)
    sp.add_argument("--probes", type=int, default=1000, help="locality probes for assumption1")

    sp = sub.add_parser("sweep", help="sensitivity grid over alpha and T")
    common(sp)
    sp.add_argument("--env")
    sp.add_argument("--alphas", type=float, nargs="+", default=[1.0, 100.0])
    sp.add_argument("--Ts", type=int, nargs="+", default=[4, 32])
    sp.add_argument("--total-steps", type=int)
    sp.add_argument("--steps", type=int, help="evaluation steps per episode")
    sp.add_argument("--instances", type=int)
    return p


# ---------------------------------------------------------------------------
# helpers (imported lazily so the thread limit applies before numpy loads)


def _config(args, env_default=None):
    from .config import config_from_dict, load_config

    if args.config:
        cfg = load_config(args.config)
        env = getattr(args, "env", None)
        if env and env != cfg.env:
            from .config import ConfigError

            raise ConfigError(f"--env {env} conflicts with the config env {cfg.env}")
    else:
        cfg = config_from_dict({"env": getattr(args, "env", None) or env_default or "DoubleIntegrator"})
    top = {}
    if args.seed is not None:
        top["seed"] = args.seed
    if args.out is not None:
        top["out_dir"] = args.out
    if top:
        d = cfg.to_dict()
        d.update(top)
        cfg = config_from_dict(d)
    return cfg


def _apply_overrides(cfg, args):
    ex = {}
    for name in ("n_agents", "n_obstacles", "steps", "instances"):
        v = getattr(args, name, None)
        if v is not None:
            ex[name] = v
    sections = {"experiment": ex} if ex else {}
    if getattr(args, "area", None) is not None:
        sections["world"] = {"area": args.area}
    return cfg.with_overrides(**sections) if sections else cfg


def _run_dir(cfg, command: str):
    from pathlib import Path

    d = Path(cfg.out_dir) / f"{command}-{cfg.env}-seed{cfg.seed}-{cfg.hash()[:10]}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_common(run, cfg):
    from .config import save_config

    save_config(run / "config.json", cfg)


def _metrics_out(run, rows):
    from .eval import METRIC_COLUMNS
    from .io import save_metrics

    return save_metrics(run / "metrics.csv", [m.row() for m in rows], METRIC_COLUMNS)


def _evaluate(cfg, run, controller, policy=None, trajectory=False):
    from .eval import agent_outcomes, metrics_from, rollout_eval
    from .io import save_trajectory

    spec = cfg.experiment
    rows = []
    for N in spec.n_agents:
        for n_obs in spec.n_obstacles:
            outs = []
            for seed in spec.seeds:
                ro, _ = rollout_eval(cfg.env, controller, N, spec.area, n_obs, spec.steps, spec.instances, seed, policy,
                                     cfg.dynamics, world_constants=spec.world_constants)
                outs.append(agent_outcomes(ro, ro.worlds[0].r))
                if trajectory:
                    save_trajectory(run / f"trajectory-N{N}-obs{n_obs}-seed{seed}.jsonl", ro)
            rows.append(metrics_from(outs, env=spec.env, controller=controller,
                                     n_agents=N, area=spec.area, n_obstacles=n_obs, seeds=tuple(spec.seeds),
                                     instances=spec.instances * len(spec.seeds), steps=spec.steps))
    return _metrics_out(run, rows)


def _checkpoint_config(args, man):
    """--config when given, else the configuration stored in the checkpoint manifest."""
    from .config import ConfigError, config_from_dict

    if args.config:
        cfg = _config(args)
    else:
        doc = dict(man.config) if man.config else {"env": man.env}
        if args.seed is not None:
            doc["seed"] = args.seed
        if args.out is not None:
            doc["out_dir"] = args.out
        cfg = config_from_dict(doc)
    if getattr(args, "env", None) and args.env != cfg.env:
        raise ConfigError(f"--env {args.env} conflicts with the config env {cfg.env}")
    return cfg


def _finite_or_none(v: float):
    return v if v == v else None  # NaN is not valid JSON


def _load_policy(path, cfg_env=None):
    from .io import checkpoint_load

    nets, man = checkpoint_load(path, expect_env=cfg_env)
    return nets, man


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    import json
    import time

    from .io import JsonlLog, checkpoint_save
    from .rng import RngState
    from .trainer import train

    cfg = _config(args)
    if args.total_steps is not None:
        cfg = cfg.with_overrides(train={"total_steps": args.total_steps})
    run = _run_dir(cfg, "train")
    _write_common(run, cfg)
    loss_log = JsonlLog(run / "loss.jsonl")
    timing = JsonlLog(run / "timing.jsonl")
    conf = cfg.to_dict()

    def log(rec):
        rec = dict(rec)
        timing({"step": rec["step"], "wall_time": rec.pop("wall_time")})
        loss_log(rec)

    def ckpt(state):
        checkpoint_save(run / f"checkpoint-{state.step:06d}.json", {"cert": state.cert, "policy": state.policy}, cfg.env, state.step, conf)

    t0 = time.perf_counter()
    try:
        res = train(cfg.train, RngState(cfg.seed), cfg.dynamics, log=log, checkpoint=ckpt)
    finally:
        loss_log.close()
        timing.close()
    checkpoint_save(run / "checkpoint.json", {"cert": res.state.cert, "policy": res.state.policy}, cfg.env, res.state.step, conf)
    print(json.dumps({"run": str(run), "steps": res.state.step, "seconds": round(time.perf_counter() - t0, 1)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .io import read_manifest

    man = read_manifest(args.checkpoint)  # fails before any output is created
    cfg = _checkpoint_config(args, man)
    nets, _ = _load_policy(args.checkpoint, cfg.env)
    cfg = _apply_overrides(cfg, args).with_overrides(experiment={"controller": "gcbf+"})
    run = _run_dir(cfg, "eval")
    _write_common(run, cfg)
    path = _evaluate(cfg, run, "gcbf+", nets["policy"], args.trajectory)
    print(path.read_text(), end="")
    return EXIT_OK


def cmd_baseline(args) -> int:
    cfg = _config(args)
    cfg = _apply_overrides(cfg, args).with_overrides(experiment={"controller": args.controller.lower()})
    run = _run_dir(cfg, "baseline")
    _write_common(run, cfg)
    path = _evaluate(cfg, run, cfg.experiment.controller, None, args.trajectory)
    print(path.read_text(), end="")
    return EXIT_OK


def cmd_check(args) -> int:
    import json

    import numpy as np

    from .cbf import BASELINES
    from .config import ConfigError
    from .eval import check_assumption1, check_theorem1, distance_cbf_channels, rollout_eval
    from .io import read_manifest, save_jsonl
    from .rng import RngState

    is_baseline = args.target.lower() in BASELINES
    if is_baseline and args.audit == "assumption1":
        raise ConfigError("the assumption1 audit needs a trained checkpoint")
    cfg = _config(args) if is_baseline else _checkpoint_config(args, read_manifest(args.target))
    cfg = _apply_overrides(cfg, args)
    nets = None if is_baseline else _load_policy(args.target, cfg.env)[0]
    spec = cfg.experiment
    records = []
    run = None
    if args.audit == "theorem1":
        controller = args.target.lower() if is_baseline else "gcbf+"
        cfg = cfg.with_overrides(experiment={"controller": controller})
        run = _run_dir(cfg, "check-theorem1")
        _write_common(run, cfg)
        for seed in spec.seeds:
            for N in spec.n_agents:
                ro, _ = rollout_eval(cfg.env, controller, N, spec.area, spec.n_obstacles[0], spec.steps, spec.instances, seed,
                                     None if nets is None else nets["policy"], cfg.dynamics,
                                     certificate=None if nets is None else nets["cert"], world_constants=spec.world_constants)
                if is_baseline:
                    h, hdot, active = distance_cbf_channels(ro)
                    rep = check_theorem1(ro, h, 1.0, hdot, active=active)
                else:
                    rep = check_theorem1(ro, ro.h, cfg.train.alpha)
                records.append({"audit": "theorem1", "controller": controller, "seed": seed, "n_agents": N, **rep.summary()})
    else:
        run = _run_dir(cfg, "check-assumption1")
        _write_common(run, cfg)
        tr = cfg.train
        audit = check_assumption1(nets["cert"], RngState(cfg.seed, stream=7), args.probes, nets["policy"], cfg.env,
                                  tr.n_agents, tr.area, tr.n_obstacles, dyn=cfg.dynamics)
        bands = [(round(lo, 1), round(lo + 0.1, 1)) for lo in np.arange(0.0, 1.0, 0.1)]
        records.append({
            "audit": "assumption1", "probes": audit.probes, "locality_failures": audit.locality_failures,
            "locality_holds": audit.locality_holds, "decays": audit.decays,
            "bands": [{"lo": lo, "hi": hi, "count": audit.band_count(lo, hi), "mean_weight": _finite_or_none(audit.band_mean(lo, hi))} for lo, hi in bands],
        })
    save_jsonl(run / "audit.jsonl", records)
    for r in records:
        print(json.dumps(r, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .eval import METRIC_COLUMNS, sweep_sensitivity
    from .io import save_metrics
    from .rng import RngState

    cfg = _config(args)
    if args.total_steps is not None:
        cfg = cfg.with_overrides(train={"total_steps": args.total_steps})
    cfg = _apply_overrides(cfg, args)
    run = _run_dir(cfg, "sweep")
    _write_common(run, cfg)
    cells = sweep_sensitivity(cfg.train, RngState(cfg.seed), args.alphas, args.Ts, cfg.experiment.steps, cfg.experiment.instances)
    path = save_metrics(run / "sweep.csv", [c.row() for c in cells], ["alpha", "T", *METRIC_COLUMNS])
    print(path.read_text(), end="")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "baseline": cmd_baseline, "check": cmd_check, "sweep": cmd_sweep}


def main(argv: list[str] | None = None) -> int:
    try:
        apply_thread_limit()
    except ValueError as exc:
        print(f"gcbflab: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    args = _parser().parse_args(argv)

    from .config import ConfigError
    from .io import FormatError
    from .world import ScenarioError

    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FormatError, FileNotFoundError) as exc:
        print(f"gcbflab: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ScenarioError as exc:
        print(f"gcbflab: infeasible scenario: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except Exception as exc:  # noqa: BLE001  surfaced as a runtime failure with its type
        print(f"gcbflab: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
