"""Run configuration: schema-versioned, strict about unknown keys."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .relabel import MIXTURES

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid run configuration; message carries the field path."""


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    run_id: str = "run"
    family: str = "quest"
    width: int = 8
    height: int = 8
    difficulty: float = 0.4
    n_train_tasks: int = 50
    total_interactions: int = 20_000
    seeds: list[int] = field(default_factory=lambda: [0])
    out_dir: str = "runs"

    # evaluator
    backend: str = "tabular"  # tabular | feedforward
    support_size: int = 16
    relabel_mix: str = "epg"  # epg | ep | eg | episode | future
    radius: int = 0
    evaluator_learning_rate: float = 1.0
    sync_period: int = 1
    batch_size: int = 64
    train_every: int = 1

    # agent
    agent: str = "dyna"  # q_only | dyna | dyna_plus
    n_sim: int = 4
    dyna_threshold: float = 0.05
    plan_threshold: float = 0.05
    gamma: float = 0.95
    q_alpha: float = 0.2
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_anneal_frac: float = 0.5

    # one-step model hallucination rates (oracle-certified injector channel)
    corrupt_invalid: float = 0.03
    corrupt_blocked: float = 0.05

    # bookkeeping
    replay_capacity: int = 200_000
    max_episode_steps: int = 128
    snapshot_every: int = 5_000
    eval_pairs_per_category: int = 30
    return_window: int = 100

    def validate(self) -> "RunConfig":
        checks = [
            (self.schema_version == SCHEMA_VERSION, "schema_version", f"must be {SCHEMA_VERSION}"),
            (self.family in ("nav", "quest"), "family", "must be nav or quest"),
            (self.width >= 4 and self.height >= 4, "width/height", "must be >= 4"),
            (0.0 <= self.difficulty <= 1.0, "difficulty", "must be in [0, 1]"),
            (self.n_train_tasks >= 1, "n_train_tasks", "must be >= 1"),
            (self.backend in ("tabular", "feedforward"), "backend", "must be tabular or feedforward"),
            (self.support_size >= 2, "support_size", "must be >= 2"),
            (self.relabel_mix in MIXTURES, "relabel_mix", f"must be one of {sorted(MIXTURES)}"),
            (self.radius in (0, 1), "radius", "must be 0 or 1"),
            (self.agent in ("q_only", "dyna", "dyna_plus"), "agent", "must be q_only, dyna or dyna_plus"),
            (0.0 <= self.dyna_threshold < 1.0, "dyna_threshold", "must be in [0, 1)"),
            (0.0 <= self.plan_threshold < 1.0, "plan_threshold", "must be in [0, 1)"),
            (0.0 < self.gamma <= 1.0, "gamma", "must be in (0, 1]"),
            (self.corrupt_invalid >= 0 and self.corrupt_blocked >= 0
             and self.corrupt_invalid + self.corrupt_blocked <= 1.0,
             "corrupt_invalid/corrupt_blocked", "rates must be valid probabilities"),
            (len(self.seeds) >= 1, "seeds", "need at least one seed"),
            (self.snapshot_every >= 1, "snapshot_every", "must be >= 1"),
        ]
        for ok, fieldname, msg in checks:
            if not ok:
                raise ConfigError(f"config field '{fieldname}': {msg}")
        return self


def config_from_dict(data: dict, source: str = "<dict>") -> RunConfig:
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{source}: unknown config keys {sorted(unknown)}")
    return RunConfig(**data).validate()


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return config_from_dict(data, source=str(path))


def save_config(config: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dataclasses.asdict(config), fh, indent=2, sort_keys=True)
        fh.write("\n")
