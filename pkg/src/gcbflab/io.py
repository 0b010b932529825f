"""On-disk formats: checkpoints, scenarios, trajectories, metrics tables and JSONL logs.

All text formats are UTF-8 JSON / JSON-lines / CSV.  Every writer goes through
:func:`atomic_write` (temp file in the target directory, then rename).
"""
from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dynamics import as_env
from .gnn import GnnParams
from .world import Obstacles, World

CHECKPOINT_FORMAT = "gcbflab-checkpoint"
CHECKPOINT_VERSION = 1
SCENARIO_FORMAT = "gcbflab-scenario"
SCENARIO_VERSION = 1


class FormatError(Exception):
    """Malformed or unsupported file."""


class CorruptPayloadError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class EnvMismatchError(FormatError):
    pass


def atomic_write(path, data: bytes | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode() if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(raw)
        os.chmod(tmp, 0o644)  # mkstemp creates owner-only files
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class CheckpointManifest:
    env: str
    step: int
    config: dict
    config_hash: str
    networks: dict  # name -> {"out_dim", "tensors": [{"name", "shape", "offset"}]}
    payload: str
    payload_bytes: int
    payload_sha256: str
    format: str = CHECKPOINT_FORMAT
    version: int = CHECKPOINT_VERSION

    def to_dict(self) -> dict:
        return {
            "format": self.format, "version": self.version, "env": self.env, "step": self.step,
            "config_hash": self.config_hash, "config": self.config, "payload": self.payload,
            "payload_bytes": self.payload_bytes, "payload_sha256": self.payload_sha256, "networks": self.networks,
        }


def payload_path(manifest_path) -> Path:
    return Path(manifest_path).with_suffix(".bin")


def checkpoint_save(path, networks: dict[str, GnnParams], env, step: int = 0, config: dict | None = None) -> CheckpointManifest:
    """Write ``<path>`` (JSON manifest) and ``<path>.bin`` (little-endian float64 payload)."""
    path = Path(path)
    config = config or {}
    buf = _io.BytesIO()
    nets = {}
    offset = 0
    for name, params in networks.items():
        entries = []
        for tname, arr in params.arrays.items():
            a = np.ascontiguousarray(arr, dtype="<f8")
            buf.write(a.tobytes())
            entries.append({"name": tname, "shape": list(a.shape), "offset": offset})
            offset += a.nbytes
        nets[name] = {"out_dim": params.out_dim, "tensors": entries}
    raw = buf.getvalue()
    bin_path = payload_path(path)
    man = CheckpointManifest(as_env(env).value, int(step), config, config_hash(config), nets, bin_path.name,
                             len(raw), hashlib.sha256(raw).hexdigest())
    atomic_write(bin_path, raw)
    atomic_write(path, json.dumps(man.to_dict(), indent=2, sort_keys=True) + "\n")
    return man


def read_manifest(path) -> CheckpointManifest:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint manifest {path} does not exist")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    if d.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: not a checkpoint manifest")
    if d.get("version") != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {d.get('version')} != supported {CHECKPOINT_VERSION}")
    try:
        return CheckpointManifest(d["env"], d["step"], d["config"], d["config_hash"], d["networks"], d["payload"],
                                  d["payload_bytes"], d["payload_sha256"], d["format"], d["version"])
    except KeyError as exc:
        raise FormatError(f"{path}: manifest lacks field {exc}") from exc


def checkpoint_load(path, expect_env=None) -> tuple[dict[str, GnnParams], CheckpointManifest]:
    path = Path(path)
    man = read_manifest(path)
    if expect_env is not None and as_env(expect_env).value != man.env:
        raise EnvMismatchError(f"checkpoint was trained on {man.env}, requested {as_env(expect_env).value}")
    if config_hash(man.config) != man.config_hash:
        raise CorruptPayloadError(f"{path}: config hash mismatch")
    bin_path = path.parent / man.payload
    if not bin_path.is_file():
        raise CorruptPayloadError(f"payload {bin_path} is missing")
    raw = bin_path.read_bytes()
    expected = sum(8 * int(np.prod(t["shape"], dtype=np.int64)) for n in man.networks.values() for t in n["tensors"])
    if len(raw) != man.payload_bytes or len(raw) != expected:
        raise CorruptPayloadError(f"payload has {len(raw)} bytes, manifest expects {man.payload_bytes} ({expected} from shapes)")
    if hashlib.sha256(raw).hexdigest() != man.payload_sha256:
        raise CorruptPayloadError("payload checksum mismatch")
    nets = {}
    for name, spec in man.networks.items():
        arrays = {}
        for t in spec["tensors"]:
            count = int(np.prod(t["shape"], dtype=np.int64))
            arrays[t["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=t["offset"]).astype(np.float64).reshape(t["shape"])
        nets[name] = GnnParams(arrays, int(spec["out_dim"]))
    return nets, man


# ---------------------------------------------------------------------------
# scenarios


def world_to_dict(world: World) -> dict:
    obs = world.obstacles
    shape = "box" if obs.dim == 2 else "sphere"
    obstacles = [
        {"shape": shape, "center": c.tolist(), ("size" if shape == "box" else "radius"): (s.tolist() if shape == "box" else float(s))}
        for c, s in zip(obs.centers, obs.sizes)
    ]
    return {
        "format": SCENARIO_FORMAT, "version": SCENARIO_VERSION, "env": world.env.value,
        "area": world.area, "R": world.R, "r": world.r, "n_rays": world.n_rays, "t": world.t,
        "states": world.states.tolist(), "goals": world.goals.tolist(), "obstacles": obstacles,
    }


def world_from_dict(d: dict) -> World:
    if d.get("format") != SCENARIO_FORMAT:
        raise FormatError("not a scenario document")
    if d.get("version") != SCENARIO_VERSION:
        raise VersionMismatchError(f"scenario version {d.get('version')} != supported {SCENARIO_VERSION}")
    env = as_env(d["env"])
    dim = env.pos_dim
    states = np.asarray(d["states"], dtype=float).reshape(-1, env.state_dim)
    goals = np.asarray(d["goals"], dtype=float).reshape(-1, dim)
    if goals.shape[0] != states.shape[0]:
        raise FormatError("states and goals disagree on the number of agents")
    obs_list = d.get("obstacles", [])
    if obs_list:
        centers = np.asarray([o["center"] for o in obs_list], dtype=float).reshape(-1, dim)
        if dim == 2:
            if any(o.get("shape") != "box" for o in obs_list):
                raise FormatError("2D scenarios only support box obstacles")
            sizes = np.asarray([o["size"] for o in obs_list], dtype=float).reshape(-1, 2)
        else:
            if any(o.get("shape") != "sphere" for o in obs_list):
                raise FormatError("3D scenarios only support sphere obstacles")
            sizes = np.asarray([o["radius"] for o in obs_list], dtype=float)
        obstacles = Obstacles(centers, sizes)
    else:
        obstacles = Obstacles.empty(dim)
    return World(env, states, goals, obstacles, float(d.get("area", 4.0)), float(d.get("R", 0.5)), float(d.get("r", 0.05)),
                 int(d.get("n_rays", 32 if dim == 2 else 130)), int(d.get("t", 0)))


def save_scenario(path, world: World) -> Path:
    return atomic_write(path, json.dumps(world_to_dict(world), indent=2) + "\n")


def load_scenario(path) -> World:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    return world_from_dict(d)


# ---------------------------------------------------------------------------
# trajectories, logs, metrics


def trajectory_records(states: np.ndarray, actions: np.ndarray, h: np.ndarray | None = None, instance: int = 0):
    """One dict per step: agent states, controls (absent at the last state) and h values."""
    for t in range(states.shape[0]):
        rec = {"instance": instance, "t": t, "states": states[t].tolist()}
        rec["controls"] = actions[t].tolist() if t < actions.shape[0] else None
        rec["h"] = h[t].tolist() if h is not None else None
        yield rec


def jsonl_dumps(records) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def save_jsonl(path, records) -> Path:
    return atomic_write(path, jsonl_dumps(records))


def load_jsonl(path) -> list[dict]:
    out = []
    for k, line in enumerate(Path(path).read_text().splitlines()):
        if line.strip():
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{k + 1}: {exc}") from exc
    return out


def save_trajectory(path, rollout, instance: int | None = None) -> Path:
    S = rollout.states.shape[0]
    items = range(S) if instance is None else [instance]
    recs = []
    for s in items:
        h = rollout.h[s] if rollout.h is not None else None
        recs.extend(trajectory_records(rollout.states[s], rollout.actions[s], h, s))
    return save_jsonl(path, recs)


class JsonlLog:
    """Append-only line log (loss curves, audit reports); flushed per record."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._f = open(self.path, "w")

    def __call__(self, record: dict) -> None:
        self._f.write(json.dumps(record, sort_keys=True) + "\n")
        self._f.flush()

    def close(self) -> None:
        self._f.close()


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))  # shortest round-tripping decimal
    return str(v)


def metrics_csv(rows: list[dict], columns: list[str]) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def save_metrics(path, rows: list[dict], columns: list[str]) -> Path:
    return atomic_write(path, metrics_csv(rows, columns))


def load_metrics(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
