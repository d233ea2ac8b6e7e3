"""Experiment configuration: one YAML file, every constant defaulted.

An empty file (or no file) reproduces the default Study A / Study B settings.
Unknown keys and explicit nulls are rejected with the dotted field name.
"""
from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field
from typing import Any, Optional

import yaml

from .behavior import BehaviorConfig
from .env import CONDITIONS, ConditionSpec
from .evaluation import STUDY_B_DEPLOY_EPS, STUDY_B_TRAIN_EPS, StudySettings
from .offline_q import TrainConfig
from .reward import RewardConfig


class ConfigError(ValueError):
    pass


def default_config_dict() -> dict:
    return {
        "conditions": ["HTN", "T2D"],
        "population": {"train": 2000, "eval": 1000},
        "seeds": [0, 1, 2, 3, 4],
        "condition_overrides": {cid: {} for cid in CONDITIONS},
        "behavior": BehaviorConfig().to_dict(),
        "discretization": {cid: {} for cid in CONDITIONS},
        "reward": RewardConfig().to_dict(),
        "train": {k: v for k, v in TrainConfig().to_dict().items() if k not in ("seed", "beta", "eps_aware")},
        "capability": {"beta": 2.5},
        "generate": {"eps_gate": 1.0},
        "study_b": {
            "seeds": [0, 1, 2],
            "train_eps": list(STUDY_B_TRAIN_EPS),
            "naive_eps": 0.5,
            "deploy_eps": list(STUDY_B_DEPLOY_EPS),
            "reward": "tiered",
            "beta": 2.5,
            "action_source": "executed",
        },
        "output_dir": "runs",
    }


# sections whose keys are free-form (condition ids, override field names)
_OPEN_SECTIONS = {"condition_overrides", "discretization", "behavior.escalate2_min_weeks",
                  "behavior.review_interval_weeks"}


def _is_open(path: str) -> bool:
    return any(path == p or path.startswith(p + ".") for p in _OPEN_SECTIONS)


def _merge(base: Any, user: Any, path: str) -> Any:
    if user is None:
        raise ConfigError(f"config field {path!r} is missing a value")
    if isinstance(base, dict):
        if not isinstance(user, dict):
            raise ConfigError(f"config field {path!r} must be a mapping")
        out = copy.deepcopy(base)
        for key, value in user.items():
            sub = f"{path}.{key}" if path else str(key)
            if key in base:
                out[key] = _merge(base[key], value, sub)
            elif _is_open(path):
                if value is None:
                    raise ConfigError(f"config field {sub!r} is missing a value")
                out[key] = value
            else:
                raise ConfigError(f"unknown config field {sub!r}")
        return out
    return user


@dataclass
class ExperimentConfig:
    data: dict = field(default_factory=default_config_dict)
    source: Optional[str] = None

    @classmethod
    def from_dict(cls, user: Optional[dict], source: Optional[str] = None) -> "ExperimentConfig":
        merged = _merge(default_config_dict(), user or {}, "")
        cfg = cls(merged, source)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: Optional[str]) -> "ExperimentConfig":
        if path is None:
            return cls.from_dict({})
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            user = yaml.safe_load(fh)
        return cls.from_dict(user or {}, source=os.path.abspath(path))

    def dump(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=False)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dump())

    # typed views -------------------------------------------------------
    def condition_spec(self, cid: str) -> ConditionSpec:
        if cid not in CONDITIONS:
            raise ConfigError(f"unknown condition {cid!r}")
        over = self.data["condition_overrides"].get(cid) or {}
        try:
            return CONDITIONS[cid].with_overrides(**over)
        except TypeError as exc:
            raise ConfigError(f"condition_overrides.{cid}: {exc}") from None

    def behavior(self) -> BehaviorConfig:
        return BehaviorConfig.from_dict(self.data["behavior"])

    def reward(self, kind: Optional[str] = None) -> RewardConfig:
        d = dict(self.data["reward"])
        if kind:
            d["kind"] = kind
        return RewardConfig(**d)

    def train(self, seed: int = 0, beta: float = 0.0, eps_aware: bool = False) -> TrainConfig:
        return TrainConfig(**self.data["train"], beta=beta, eps_aware=eps_aware, seed=seed)

    def discretization_overrides(self) -> dict:
        return {k: v for k, v in self.data["discretization"].items() if v}

    def study_settings(self, study: str = "A", seeds=None) -> StudySettings:
        d = self.data
        sb = d["study_b"]
        if seeds is None:
            seeds = d["seeds"] if study == "A" else sb["seeds"]
        t = self.train()
        return StudySettings(
            conditions=tuple(d["conditions"]),
            seeds=tuple(int(s) for s in seeds),
            n_train=int(d["population"]["train"]),
            n_eval=int(d["population"]["eval"]),
            beta=float(d["capability"]["beta"]),
            behavior=self.behavior(),
            train=t,
            reward=self.reward(),
            condition_overrides={k: v for k, v in d["condition_overrides"].items() if v},
            discretization_overrides=self.discretization_overrides(),
            study_b_reward=sb["reward"],
            study_b_beta=float(sb["beta"]),
            study_b_train_eps=tuple(float(e) for e in sb["train_eps"]),
            study_b_naive_eps=float(sb["naive_eps"]),
            study_b_deploy_eps=tuple(float(e) for e in sb["deploy_eps"]),
            study_b_action_source=sb["action_source"],
        )

    def validate(self) -> None:
        d = self.data
        for cid in d["conditions"]:
            self.condition_spec(cid)
        try:
            self.behavior()
            self.reward()
            self.train()
            self.study_settings("A")
            self.study_settings("B")
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if int(d["population"]["train"]) < 1 or int(d["population"]["eval"]) < 1:
            raise ConfigError("population sizes must be >= 1")
        if not d["seeds"]:
            raise ConfigError("config field 'seeds' must list at least one seed")
