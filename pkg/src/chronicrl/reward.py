"""Tiered (milestone) and terminal reward functions, applied to recorded transitions."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .env import Action, ConditionSpec, get_condition


@dataclass(frozen=True)
class RewardConfig:
    kind: str = "tiered"
    w_g: float = 1.0
    w_o: float = 1.5
    w_c: float = 2.5
    med_change_cost: float = 0.01
    op_cost: float = 0.005
    terminal_magnitude: float = 2.5
    # poor outcome at the horizon: final reduction from baseline below the TTG threshold
    poor_outcome_rule: str = "reduction_below_ttg"
    stall_penalty_per_week: float = 0.0

    def __post_init__(self):
        if self.kind not in ("tiered", "terminal"):
            raise ValueError(f"unknown reward kind {self.kind!r}")
        if not self.w_g <= self.w_o <= self.w_c:
            raise ValueError("tier weights must satisfy w_g <= w_o <= w_c")
        if self.med_change_cost < 0 or self.op_cost < 0 or self.stall_penalty_per_week < 0:
            raise ValueError("costs and stall penalty are magnitudes and must be >= 0")
        if self.poor_outcome_rule not in ("reduction_below_ttg", "none"):
            raise ValueError(f"unknown poor_outcome_rule {self.poor_outcome_rule!r}")

    @property
    def max_abs_reward(self) -> float:
        top = max(self.w_g + self.w_o + self.w_c, self.terminal_magnitude)
        return top + self.med_change_cost + self.op_cost + self.stall_penalty_per_week

    def to_dict(self) -> dict:
        return asdict(self)


def action_cost(action: Action, prev_action: Action, config: Optional[RewardConfig] = None) -> float:
    config = config or RewardConfig()
    cost = 0.0
    if action.med_level != prev_action.med_level:
        cost += config.med_change_cost
    if action.op == 1:
        cost += config.op_cost
    return cost


def record_cost(record, config: RewardConfig) -> float:
    return config.med_change_cost * bool(record.med_changed) + config.op_cost * bool(record.op_taken)


def tiered_reward(record, config: Optional[RewardConfig] = None) -> float:
    config = config or RewardConfig()
    r = 0.0
    if record.hit_ttg:
        r += config.w_g
    if record.hit_tto:
        r += config.w_o
    if record.hit_ttc:
        r += config.w_c
    r -= record_cost(record, config)
    if config.stall_penalty_per_week and record.stall_g:
        r -= config.stall_penalty_per_week
    return r


def final_status(record, spec: ConditionSpec) -> tuple:
    """``(controlled, poor)`` judged on the observation that closes the horizon."""
    controlled = record.next_obs < spec.control_threshold
    poor = (record.baseline - record.next_obs) < spec.ttg_delta
    return controlled, poor


def terminal_reward(record, final_summary=None, config: Optional[RewardConfig] = None, spec: Optional[ConditionSpec] = None) -> float:
    """Horizon outcome bonus/penalty on the last transition, minus every week's action cost.

    ``final_summary`` is ``(controlled, poor)``; when omitted it is derived from the
    record itself (only meaningful for terminal records, and requires ``spec``).
    """
    config = config or RewardConfig(kind="terminal")
    r = -record_cost(record, config)
    if config.stall_penalty_per_week and record.stall_g:
        r -= config.stall_penalty_per_week
    if not record.terminal:
        return r
    if final_summary is None:
        if spec is None:
            raise ValueError("terminal record needs final_summary or a ConditionSpec")
        final_summary = final_status(record, spec)
    controlled, poor = final_summary
    if config.poor_outcome_rule == "none":
        poor = False
    if controlled:
        r += config.terminal_magnitude
    elif poor:
        r -= config.terminal_magnitude
    return r


def compute_rewards(dataset, config: RewardConfig) -> np.ndarray:
    spec = dataset.condition_spec or get_condition(dataset.condition)
    if config.kind == "tiered":
        return np.array([tiered_reward(r, config) for r in dataset.records], dtype=float)
    return np.array([terminal_reward(r, None, config, spec) for r in dataset.records], dtype=float)


def _trajectories(trajectories) -> Iterable[Sequence]:
    if hasattr(trajectories, "patients"):
        return list(trajectories.patients().values())
    return trajectories


def reward_density(trajectories, kind: str = "tiered", spec: Optional[ConditionSpec] = None,
                   config: Optional[RewardConfig] = None) -> float:
    """Mean count of strictly positive reward events per patient-year.

    ``trajectories`` is a Dataset or a list of per-patient record lists covering
    the full horizon.
    """
    config = config or RewardConfig(kind=kind)
    if config.kind != kind:
        config = RewardConfig(**{**config.to_dict(), "kind": kind})
    if spec is None and hasattr(trajectories, "condition_spec"):
        spec = trajectories.condition_spec
    trajs = list(_trajectories(trajectories))
    if not trajs:
        return 0.0
    events = 0
    weeks = 0
    for traj in trajs:
        weeks += len(traj)
        for rec in traj:
            if kind == "tiered":
                r = tiered_reward(rec, config)
            else:
                r = terminal_reward(rec, None, config, spec or get_condition("HTN"))
            events += r > 0
    years = weeks / 52.0
    return events / years
