"""Episode rollouts, JSON-lines dataset files, and the dataset manifest.

Dataset layout on disk: one manifest.json plus one episodes file per task
(JSON lines, one episode per line, optionally gzipped). Checksums cover the
uncompressed bytes. Episode schema:

  {"task": "3v3",
   "steps": [{"obs": [{"own": [...], "other_agents": [[...]], "env_entities": [[...]]}, ...],
              "avail": [[...bools as 0/1...]],
              "actions": [...],
              "reward": float,
              "terminal": 0/1,
              "state_units": [[...]]}],
   "outcome": "win" | "loss" | "timeout"}
"""

from __future__ import annotations

import gzip as gzip_mod
import hashlib
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .entities import EntityObservation
from .env import OBS_FEATS, STATE_UNIT_FEATS, SkirmishEnv, TaskSpec, scripted_policy

QUALITIES = ("expert", "medium", "medium-expert", "medium-replay")
FORMAT_VERSION = 1
_ROUND = 6


@dataclass
class StepRecord:
    obs: List[EntityObservation]
    avail: np.ndarray           # (N, A) bool
    actions: np.ndarray         # (N,) int
    reward: float
    terminal: bool
    state_units: np.ndarray     # (U, STATE_UNIT_FEATS)


@dataclass
class Episode:
    task: str
    steps: List[StepRecord]
    outcome: str

    @property
    def length(self) -> int:
        return len(self.steps)

    @property
    def total_return(self) -> float:
        return float(sum(s.reward for s in self.steps))


def rollout(task: TaskSpec, policy: Callable, rng: np.random.Generator) -> Episode:
    """Run one scripted episode; `policy(i, obs, avail, under_fire, rng) -> action`."""
    env = SkirmishEnv(task)
    env.reset(rng)
    steps: List[StepRecord] = []
    outcome = "timeout"
    for _ in range(task.horizon):
        obs, avail = env.observe_all()
        fire = env.state.under_fire.copy()
        actions = np.array([policy(i, obs[i], avail[i], bool(fire[i]), rng)
                            for i in range(task.n_allies)])
        units = env.state_units()
        reward, terminal, oc = env.step(actions, rng)
        steps.append(StepRecord(obs=obs, avail=avail, actions=actions,
                                reward=reward, terminal=terminal, state_units=units))
        if terminal:
            outcome = oc
            break
    return Episode(task=task.name, steps=steps, outcome=outcome)


def behavior_policy(quality: str, epsilon: Optional[float] = None) -> Callable:
    def policy(i, obs, avail, under_fire, rng):
        return scripted_policy(quality, obs, avail, under_fire, rng, epsilon=epsilon)

    return policy


# -- serialization ---------------------------------------------------------------


def _round_list(arr) -> list:
    return np.round(np.asarray(arr, dtype=np.float64), _ROUND).tolist()


def episode_to_json(ep: Episode) -> dict:
    return {
        "task": ep.task,
        "steps": [{
            "obs": [{
                "own": _round_list(o.own),
                "other_agents": _round_list(o.other_agents),
                "env_entities": _round_list(o.env_entities),
            } for o in s.obs],
            "avail": np.asarray(s.avail, dtype=np.int64).tolist(),
            "actions": np.asarray(s.actions, dtype=np.int64).tolist(),
            "reward": round(float(s.reward), _ROUND),
            "terminal": int(s.terminal),
            "state_units": _round_list(s.state_units),
        } for s in ep.steps],
        "outcome": ep.outcome,
    }


def episode_from_json(rec: dict) -> Episode:
    steps = [StepRecord(
        obs=[EntityObservation(own=np.array(o["own"], dtype=np.float64),
                               other_agents=np.array(o["other_agents"], dtype=np.float64).reshape(
                                   len(o["other_agents"]), -1) if o["other_agents"] else np.zeros((0, OBS_FEATS)),
                               env_entities=np.array(o["env_entities"], dtype=np.float64))
             for o in s["obs"]],
        avail=np.array(s["avail"], dtype=bool),
        actions=np.array(s["actions"], dtype=np.int64),
        reward=float(s["reward"]),
        terminal=bool(s["terminal"]),
        state_units=np.array(s["state_units"], dtype=np.float64),
    ) for s in rec["steps"]]
    return Episode(task=rec["task"], steps=steps, outcome=rec["outcome"])


def episodes_to_bytes(episodes: Sequence[Episode]) -> bytes:
    lines = [json.dumps(episode_to_json(ep), separators=(",", ":")) for ep in episodes]
    return ("\n".join(lines) + "\n").encode("utf-8")


def write_episode_file(path: Path, episodes: Sequence[Episode], use_gzip: bool) -> str:
    """Write JSON-lines (optionally gzipped); returns sha256 of uncompressed bytes."""
    raw = episodes_to_bytes(episodes)
    digest = hashlib.sha256(raw).hexdigest()
    if use_gzip:
        with gzip_mod.GzipFile(filename=str(path), mode="wb", mtime=0) as fh:
            fh.write(raw)
    else:
        Path(path).write_bytes(raw)
    return digest


def read_episode_file(path) -> List[Episode]:
    path = Path(path)
    if path.suffix == ".gz":
        raw = gzip_mod.decompress(path.read_bytes())
    else:
        raw = path.read_bytes()
    return [episode_from_json(json.loads(line))
            for line in raw.decode("utf-8").splitlines() if line]


# -- dataset generation ------------------------------------------------------------


def _episodes_for_quality(task: TaskSpec, quality: str, n: int,
                          seed: int) -> List[Episode]:
    if quality == "medium-expert":
        half = _episodes_for_quality(task, "expert", n // 2, seed)
        half += _episodes_for_quality(task, "medium", n - n // 2, seed + 777_000)
        return half
    task_key = zlib.crc32(task.name.encode("utf-8"))
    episodes = []
    for k in range(n):
        rng = np.random.default_rng((seed, task_key, k))
        if quality == "medium-replay":
            # emulate a replay buffer: exploration anneals from fully random
            eps = 1.0 - 0.7 * (k / max(n - 1, 1))
            policy = behavior_policy("medium", epsilon=eps)
        else:
            policy = behavior_policy(quality)
        episodes.append(rollout(task, policy, rng))
    return episodes


def generate_dataset(tasks: Sequence[TaskSpec], quality: str, episodes_per_task: int,
                     seed: int, out_dir, use_gzip: bool = True) -> Path:
    """Write per-task episode files plus a manifest; returns the manifest path."""
    if quality not in QUALITIES:
        raise ValueError(f"quality must be one of {QUALITIES}, got {quality!r}")
    if episodes_per_task < 1:
        raise ValueError(f"episodes_per_task must be >= 1, got {episodes_per_task}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    total = episodes_per_task * 2 if quality == "medium-expert" else episodes_per_task
    entries = []
    for task in tasks:
        episodes = _episodes_for_quality(task, quality, total, seed)
        fname = f"{task.name}.jsonl" + (".gz" if use_gzip else "")
        digest = write_episode_file(out / fname, episodes, use_gzip)
        entries.append({
            "name": task.name,
            "n_allies": task.n_allies,
            "n_enemies": task.n_enemies,
            "map_size": task.map_size,
            "sight_range": task.sight_range,
            "attack_range": task.attack_range,
            "horizon": task.horizon,
            "episodes": len(episodes),
            "file": fname,
            "sha256": digest,
        })
    manifest = {
        "format_version": FORMAT_VERSION,
        "quality": quality,
        "seed": seed,
        "feature_dims": {"own": OBS_FEATS, "other_agent": OBS_FEATS,
                         "env_entity": OBS_FEATS, "state_unit": STATE_UNIT_FEATS},
        "tasks": entries,
    }
    mpath = out / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return mpath


# -- packed in-memory form for training ------------------------------------------


@dataclass
class PackedEpisode:
    """One episode as dense arrays (float32 in RAM, cast on batch assembly)."""

    own: np.ndarray          # (T, N, OBS_FEATS)
    oa: np.ndarray           # (T, N, K_a, OBS_FEATS)
    en: np.ndarray           # (T, N, K_e, OBS_FEATS)
    avail: np.ndarray        # (T, N, A) bool
    actions: np.ndarray      # (T, N) int64
    rewards: np.ndarray      # (T,) float64
    terminals: np.ndarray    # (T,) bool
    state_units: np.ndarray  # (T, U, STATE_UNIT_FEATS)

    @property
    def length(self) -> int:
        return self.own.shape[0]


def pack_episode(ep: Episode) -> PackedEpisode:
    T_ = ep.length
    n = len(ep.steps[0].obs)
    k_a = ep.steps[0].obs[0].other_agents.shape[0]
    k_e = ep.steps[0].obs[0].env_entities.shape[0]
    own = np.zeros((T_, n, OBS_FEATS), dtype=np.float32)
    oa = np.zeros((T_, n, k_a, OBS_FEATS), dtype=np.float32)
    en = np.zeros((T_, n, k_e, OBS_FEATS), dtype=np.float32)
    avail = np.zeros((T_, n, ep.steps[0].avail.shape[1]), dtype=bool)
    actions = np.zeros((T_, n), dtype=np.int64)
    rewards = np.zeros(T_, dtype=np.float64)
    terminals = np.zeros(T_, dtype=bool)
    units = np.zeros((T_, ep.steps[0].state_units.shape[0], STATE_UNIT_FEATS),
                     dtype=np.float32)
    for t, s in enumerate(ep.steps):
        for i, o in enumerate(s.obs):
            own[t, i] = o.own
            if k_a:
                oa[t, i] = o.other_agents
            if k_e:
                en[t, i] = o.env_entities
        avail[t] = s.avail
        actions[t] = s.actions
        rewards[t] = s.reward
        terminals[t] = s.terminal
        units[t] = s.state_units
    return PackedEpisode(own=own, oa=oa, en=en, avail=avail, actions=actions,
                         rewards=rewards, terminals=terminals, state_units=units)


@dataclass
class TaskData:
    spec: TaskSpec
    episodes: List[PackedEpisode]


@dataclass
class Dataset:
    quality: str
    seed: int
    feature_dims: dict
    tasks: Dict[str, TaskData] = field(default_factory=dict)

    @property
    def task_names(self) -> List[str]:
        return list(self.tasks)


def load_dataset(manifest_path, task_filter: Optional[Sequence[str]] = None) -> Dataset:
    mpath = Path(manifest_path)
    manifest = json.loads(mpath.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{mpath}: unsupported dataset format {manifest.get('format_version')}")
    ds = Dataset(quality=manifest["quality"], seed=manifest["seed"],
                 feature_dims=manifest["feature_dims"])
    for entry in manifest["tasks"]:
        if task_filter is not None and entry["name"] not in task_filter:
            continue
        spec = TaskSpec(n_allies=entry["n_allies"], n_enemies=entry["n_enemies"],
                        map_size=entry["map_size"], sight_range=entry["sight_range"],
                        attack_range=entry["attack_range"], horizon=entry["horizon"],
                        name=entry["name"])
        episodes = [pack_episode(ep) for ep in read_episode_file(mpath.parent / entry["file"])]
        if len(episodes) != entry["episodes"]:
            raise ValueError(f"{entry['file']}: expected {entry['episodes']} episodes, "
                             f"got {len(episodes)}")
        ds.tasks[entry["name"]] = TaskData(spec=spec, episodes=episodes)
    if task_filter is not None:
        missing = set(task_filter) - set(ds.tasks)
        if missing:
            raise ValueError(f"dataset at {mpath} is missing tasks {sorted(missing)}")
    return ds
