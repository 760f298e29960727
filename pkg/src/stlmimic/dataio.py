"""Persistence: labeled trajectory datasets (JSON-Lines), training
checkpoints (single JSON documents), rollout CSV exports, and content
digests pairing the two."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_VERSION = 1


class ParseError(ValueError):
    """Malformed dataset or checkpoint file."""


class InconsistentHorizon(ValueError):
    """Trajectory lengths differ within one dataset."""


class VersionMismatch(ValueError):
    """Checkpoint written by an incompatible format version."""


class IoError(OSError):
    pass


@dataclass
class LabeledTrajectory:
    id: str
    label: int  # +1 expert-like, -1 incorrect behavior
    agent: np.ndarray  # (T+1, n_a)
    env: np.ndarray  # (T+1, n_e); n_e may be 0
    agent_names: tuple[str, ...]
    env_names: tuple[str, ...]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.agent = np.asarray(self.agent, dtype=float)
        if self.env is None or np.asarray(self.env).size == 0:
            self.env = np.zeros((self.agent.shape[0], 0))
        else:
            self.env = np.asarray(self.env, dtype=float)
        if self.label not in (1, -1):
            raise ParseError(f"label must be +1 or -1, got {self.label}")
        if self.agent.ndim != 2 or self.env.ndim != 2:
            raise ParseError("state blocks must be 2-d arrays")
        if self.env.shape[0] != self.agent.shape[0]:
            raise InconsistentHorizon(
                f"agent has {self.agent.shape[0]} steps, env {self.env.shape[0]}"
            )
        if self.agent.shape[1] != len(self.agent_names):
            raise ParseError("agent_names do not match agent state width")
        if self.env.shape[1] != len(self.env_names):
            raise ParseError("env_names do not match env state width")

    @property
    def horizon(self) -> int:
        return self.agent.shape[0] - 1

    @property
    def dim_names(self) -> tuple[str, ...]:
        return tuple(self.agent_names) + tuple(self.env_names)

    def full(self) -> np.ndarray:
        return np.concatenate([self.agent, self.env], axis=1)


@dataclass
class Dataset:
    trajectories: list[LabeledTrajectory]

    def __post_init__(self):
        if self.trajectories:
            t0 = self.trajectories[0]
            for t in self.trajectories[1:]:
                if t.horizon != t0.horizon:
                    raise InconsistentHorizon(
                        f"{t.id}: horizon {t.horizon} != {t0.horizon}"
                    )
                if t.dim_names != t0.dim_names:
                    raise ParseError(f"{t.id}: dimension names differ")

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    @property
    def horizon(self) -> int:
        return self.trajectories[0].horizon

    @property
    def dim_names(self) -> tuple[str, ...]:
        return self.trajectories[0].dim_names

    def labels(self) -> np.ndarray:
        return np.array([t.label for t in self.trajectories])

    def to_array(self) -> np.ndarray:
        """(N, T+1, D) stack of full state signals."""
        return np.stack([t.full() for t in self.trajectories])

    def count(self, label: int) -> int:
        return sum(1 for t in self.trajectories if t.label == label)

    def extended(self, more) -> "Dataset":
        return Dataset(self.trajectories + list(more))


def _traj_to_obj(t: LabeledTrajectory) -> dict:
    return {
        "id": t.id,
        "label": t.label,
        "agent_dims": list(t.agent_names),
        "env_dims": list(t.env_names),
        "dt": 1,
        "agent_states": t.agent.tolist(),
        "env_states": t.env.tolist(),
        "meta": t.meta,
    }


def save_dataset(ds: Dataset, path: str) -> None:
    """One JSON object per line; float round-trip precision."""
    with open(path, "w", encoding="utf-8") as fh:
        for t in ds:
            fh.write(json.dumps(_traj_to_obj(t), sort_keys=True))
            fh.write("\n")


def load_dataset(path: str) -> Dataset:
    trajectories = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                traj = LabeledTrajectory(
                    id=str(obj["id"]),
                    label=int(obj["label"]),
                    agent=np.array(obj["agent_states"], dtype=float),
                    env=np.array(obj.get("env_states") or np.zeros((len(obj["agent_states"]), 0))),
                    agent_names=tuple(obj["agent_dims"]),
                    env_names=tuple(obj.get("env_dims") or ()),
                    meta=obj.get("meta") or {},
                )
            except InconsistentHorizon:
                raise
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            trajectories.append(traj)
    return Dataset(trajectories)  # Dataset validates cross-line consistency


def fnv1a_hex(data: bytes) -> str:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return f"{h:016x}"


def dataset_digest(ds: Dataset) -> str:
    """FNV-1a over the canonical JSONL bytes."""
    payload = "\n".join(json.dumps(_traj_to_obj(t), sort_keys=True) for t in ds)
    return fnv1a_hex(payload.encode("utf-8"))


def config_digest(config: dict) -> str:
    return fnv1a_hex(json.dumps(config, sort_keys=True).encode("utf-8"))


@dataclass
class Checkpoint:
    """Everything needed to resume or evaluate a run."""

    env: dict
    shape: dict
    inference_groups: dict
    margin: float
    policy_groups: dict
    norm: dict
    rule_text: str | None
    gan_iteration: int
    rng_state: dict | None
    dataset_digest: str
    config: dict
    extra: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def save_checkpoint(ck: Checkpoint, path: str) -> None:
    obj = {
        "version": ck.version,
        "env": ck.env,
        "shape": ck.shape,
        "inference_groups": ck.inference_groups,
        "margin": ck.margin,
        "policy_groups": ck.policy_groups,
        "norm": ck.norm,
        "rule_text": ck.rule_text,
        "gan_iteration": ck.gan_iteration,
        "rng_state": ck.rng_state,
        "dataset_digest": ck.dataset_digest,
        "config": ck.config,
        "extra": ck.extra,
    }
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(obj, dict) or "version" not in obj:
        raise ParseError(f"{path}: not a checkpoint document")
    if obj["version"] != CHECKPOINT_VERSION:
        raise VersionMismatch(
            f"{path}: version {obj['version']}, expected {CHECKPOINT_VERSION}"
        )
    try:
        return Checkpoint(
            env=obj["env"],
            shape=obj["shape"],
            inference_groups=obj["inference_groups"],
            margin=float(obj["margin"]),
            policy_groups=obj["policy_groups"],
            norm=obj["norm"],
            rule_text=obj["rule_text"],
            gan_iteration=int(obj["gan_iteration"]),
            rng_state=obj["rng_state"],
            dataset_digest=obj["dataset_digest"],
            config=obj["config"],
            extra=obj.get("extra", {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: {exc}") from exc


def export_rollouts(trajectories, dim_names, path: str, tags=None, comment: str | None = None) -> None:
    """CSV rows (traj_id, t, *dims, tag) for downstream plotting."""
    if len(trajectories) == 0:
        raise IoError("no trajectories to export")
    tags = tags if tags is not None else ["rollout"] * len(trajectories)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["traj_id", "t"] + list(dim_names) + ["tag"])
        for i, (arr, tag) in enumerate(zip(trajectories, tags)):
            arr = np.asarray(arr, dtype=float)
            for t in range(arr.shape[0]):
                writer.writerow([i, t] + [repr(float(v)) for v in arr[t]] + [tag])
