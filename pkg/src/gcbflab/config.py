"""Run configuration: one JSON document validated against :data:`SCHEMA`.

Sections: ``dynamics`` (limits and nominal-controller gains), ``world`` (R, r,
n_rays, area, N, obstacle count), ``train`` and ``experiment``.  Every property
carries an ``x-source`` tag: ``published`` for values from the method's published
setup, ``artifact`` for defaults chosen here.  Unknown keys are rejected at every level.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import jsonschema

from .dynamics import DynamicsConfig, EnvKind, as_env
from .eval import ExperimentSpec
from .io import atomic_write, config_hash
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration document."""


def _num(src, desc, minimum=None, exclusive=False, nullable=False):
    t = ["number", "null"] if nullable else "number"
    p = {"type": t, "x-source": src, "description": desc}
    if minimum is not None:
        p["exclusiveMinimum" if exclusive else "minimum"] = minimum
    return p


def _int(src, desc, minimum=None, nullable=False):
    p = {"type": ["integer", "null"] if nullable else "integer", "x-source": src, "description": desc}
    if minimum is not None:
        p["minimum"] = minimum
    return p


def _vec(src, desc, length=None, item="number"):
    p = {"type": "array", "items": {"type": item}, "x-source": src, "description": desc}
    if length is not None:
        p["minItems"] = p["maxItems"] = length
    return p


def _obj(props, required=()):
    return {"type": "object", "additionalProperties": False, "properties": props, "required": list(required)}


SCHEMA = _obj(
    {
        "env": {"enum": [e.value for e in EnvKind], "x-source": "published", "description": "environment kind"},
        "seed": _int("artifact", "master seed for training and evaluation", 0),
        "out_dir": {"type": "string", "x-source": "artifact", "description": "root directory for run outputs"},
        "dynamics": _obj({
            "dt": _num("artifact", "Euler step in seconds", 0, True),
            "u_lo": _vec("artifact", "lower action bound per channel"),
            "u_hi": _vec("artifact", "upper action bound per channel"),
            "dubins_v_max": _num("artifact", "speed cap of the Dubins nominal controller", 0, True),
            "dubins_k_theta": _num("artifact", "heading gain of the Dubins nominal controller", 0),
            "dubins_k_v": _num("artifact", "speed gain of the Dubins nominal controller", 0),
            "si_gain": _num("artifact", "proportional gain of the single-integrator nominal controller", 0),
            "goal_tol": _num("artifact", "distance below which the Dubins heading term is gated off", 0),
            "cf_q": _vec("artifact", "Crazyflie inner-loop LQR state weights", 8),
            "cf_r": _vec("artifact", "Crazyflie inner-loop LQR input weights", 4),
        }),
        "world": _obj({
            "R": _num("published", "sensing radius", 0, True),
            "r": _num("published", "agent radius", 0, True),
            "n_rays": _int("published", "LiDAR rays per agent (null: 32 in 2D, 130 in 3D)", 1, nullable=True),
            "area": _num("published", "side length of the square or cube workspace (null: 4 in 2D, 2 in 3D)", 0, True, nullable=True),
            "n_agents": _int("published", "agents in training scenarios", 1),
            "n_obstacles": _int("published", "obstacles in training scenarios", 0),
        }),
        "train": _obj({
            "T": _int("published", "look-ahead horizon of the invariance labels (null: per-env table value)", 1, nullable=True),
            "eta_ctrl": _num("published", "weight of the control-imitation loss (null: table value)", 0, nullable=True),
            "lr_policy": _num("published", "policy learning rate (null: table value)", 0, nullable=True),
            "lr_cbf": _num("published", "certificate learning rate (null: table value)", 0, nullable=True),
            "eta_deriv": _num("published", "weight of the derivative hinge", 0),
            "gamma": _num("published", "hinge margin", 0),
            "alpha": _num("published", "class-K gain in the derivative condition", 0),
            "total_steps": _int("published", "training steps (one data refresh check and updates_per_step Adam updates each)", 1),
            "updates_per_step": _int("artifact", "Adam updates per training step, each on a fresh minibatch", 1),
            "n_scenarios": _int("artifact", "scenarios per collection round", 1),
            "rollout_length": _int("artifact", "transitions per scenario and round", 1),
            "collect_every": _int("artifact", "training steps between collection rounds", 1),
            "batch_size": _int("artifact", "graphs per gradient step", 1),
            "ctrl_target": {"enum": ["qp", "nominal"], "x-source": "published", "description": "imitation target of the policy"},
            "slack_penalty": _num("artifact", "penalty on QP slack when the target QP is infeasible", 0),
            "checkpoint_every": _int("artifact", "steps between checkpoints", 1),
            "jacobian_chunk": _int("artifact", "graphs per batched Jacobian evaluation", 1),
        }),
        "experiment": _obj({
            "controller": {"type": "string", "x-source": "published", "description": "gcbf+, nominal, cbf1.0, cbf0.1, deccbf1.0 or deccbf0.1"},
            "n_agents": _vec("published", "agent counts to evaluate (default: world.n_agents)", item="integer"),
            "n_obstacles": _vec("published", "obstacle counts to evaluate (default: world.n_obstacles)", item="integer"),
            "steps": _int("published", "simulation steps per episode", 1),
            "instances": _int("published", "episodes per seed (null: 8 at desk scale, 32 at full scale)", 1, nullable=True),
            "seeds": _vec("published", "training seeds whose checkpoints are evaluated", item="integer"),
            "full_scale": {"type": "boolean", "x-source": "artifact", "description": "lift the desk-scale caps"},
        }),
    },
    required=("env",),
)

_WORLD_TRAIN = ("area", "n_agents", "n_obstacles", "R", "r", "n_rays")


@dataclass
class Config:
    env: str
    seed: int
    out_dir: str
    dynamics: DynamicsConfig
    train: TrainConfig
    experiment: ExperimentSpec

    @property
    def env_kind(self) -> EnvKind:
        return as_env(self.env)

    def to_dict(self) -> dict:
        """Effective configuration with every default resolved; re-ingests to an equal Config."""
        dyn = asdict(self.dynamics)
        dyn.pop("env")
        dyn = {k: list(v) if isinstance(v, tuple) else v for k, v in dyn.items()}
        tr = asdict(self.train)
        world = {k: tr.pop(k) for k in _WORLD_TRAIN}
        tr.pop("env")
        ex = asdict(self.experiment)
        for k in ("env", "area", "R", "r", "n_rays"):
            ex.pop(k)
        return {"env": self.env, "seed": self.seed, "out_dir": self.out_dir, "dynamics": dyn, "world": world, "train": tr, "experiment": ex}

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def with_overrides(self, **sections) -> "Config":
        """New Config with ``section={key: value}`` merged into the effective document."""
        d = self.to_dict()
        for sec, vals in sections.items():
            if isinstance(d.get(sec), dict):
                d[sec].update(vals)
            else:
                d[sec] = vals
        return config_from_dict(d)


def config_from_dict(doc: dict) -> Config:
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config {where}: {exc.message}") from None
    d = copy.deepcopy(doc)
    env = as_env(d["env"])
    world = d.get("world", {})
    try:
        dyn_kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.get("dynamics", {}).items()}
        dynamics = DynamicsConfig(env, **dyn_kw)
        train = TrainConfig(env=env.value, **{k: world[k] for k in _WORLD_TRAIN if k in world}, **d.get("train", {}))
        ex = dict(d.get("experiment", {}))
        ex.setdefault("n_agents", [train.n_agents])
        ex.setdefault("n_obstacles", [train.n_obstacles])
        experiment = ExperimentSpec(env=env.value, area=train.area, R=train.R, r=train.r, n_rays=train.n_rays, **ex)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config: {exc}") from None
    from .rollout import make_controller  # validates the controller name

    try:
        if experiment.controller not in ("gcbf+", "gcbf"):
            make_controller(experiment.controller, dynamics)
    except ValueError as exc:
        raise ConfigError(f"config experiment/controller: {exc}") from None
    return Config(env.value, int(d.get("seed", 0)), str(d.get("out_dir", "runs")), dynamics, train, experiment)


def default_config(env="DoubleIntegrator", **sections) -> Config:
    doc = {"env": as_env(env).value}
    doc.update(sections)
    return config_from_dict(doc)


def load_config(path) -> Config:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return config_from_dict(doc)


def save_config(path, cfg: Config) -> Path:
    return atomic_write(path, json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def schema_table() -> list[tuple[str, str, str, str]]:
    """(dotted key, type, source, description) rows for the format documentation."""
    rows = []

    def walk(node, prefix):
        for k, p in node["properties"].items():
            key = f"{prefix}{k}"
            if p.get("type") == "object":
                walk(p, key + ".")
            else:
                t = p.get("type", "enum")
                rows.append((key, t if isinstance(t, str) else "|".join(t), p["x-source"], p["description"]))

    walk(SCHEMA, "")
    return rows

