"""Three-archetype clinician mixture and offline dataset generation."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import rng as rngmod
from .dataset import Dataset, DiscretizationSpec, TransitionRecord, default_discretization, encode_state, eps_bucket, spec_hash
from .env import (
    Action,
    ConditionSpec,
    PatientState,
    detect_stalls,
    get_condition,
    initial_state,
    sample_patient,
    step,
)

ARCHETYPES = ("low", "high", "ops_augmented")


@dataclass(frozen=True)
class ArchetypeSpec:
    archetype_id: str
    population_share: float
    escalate1_base: float
    escalate1_slope: float
    escalate1_cap: float
    escalate2_base: float
    escalate2_slope: float
    escalate2_cap: float
    escalate2_min_weeks: int
    op_prob_uncontrolled: float
    op_prob_controlled: float

    def __post_init__(self):
        probs = (
            self.population_share, self.escalate1_base, self.escalate1_cap, self.escalate2_base,
            self.escalate2_cap, self.op_prob_uncontrolled, self.op_prob_controlled,
        )
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ValueError(f"archetype {self.archetype_id!r}: probabilities must lie in [0, 1]")
        if self.escalate1_cap < self.escalate1_base or self.escalate2_cap < self.escalate2_base:
            raise ValueError(f"archetype {self.archetype_id!r}: caps must be >= bases")
        if self.escalate2_min_weeks < 0:
            raise ValueError(f"archetype {self.archetype_id!r}: escalate2_min_weeks must be >= 0")

    def first_line_probability(self, w: int) -> float:
        return min(self.escalate1_base + self.escalate1_slope * w, self.escalate1_cap)

    def second_line_probability(self, w: int) -> float:
        if w < self.escalate2_min_weeks:
            return 0.0
        return min(self.escalate2_base + self.escalate2_slope * (w - self.escalate2_min_weeks), self.escalate2_cap)


LOW = ArchetypeSpec("low", 0.5, 0.10, 0.02, 0.50, 0.05, 0.015, 0.25, 8, 0.05, 0.05)
HIGH = ArchetypeSpec("high", 0.3, 0.20, 0.04, 0.70, 0.15, 0.025, 0.45, 6, 0.05, 0.05)
OPS = ArchetypeSpec("ops_augmented", 0.2, 0.20, 0.04, 0.70, 0.15, 0.025, 0.45, 6, 0.45, 0.10)


@dataclass(frozen=True)
class BehaviorConfig:
    """Archetype mixture plus per-condition timing.

    ``escalate2_min_weeks`` maps condition -> {archetype -> weeks} and overrides
    the archetype default for that condition.  ``review_interval_weeks`` maps
    condition -> how often (in weeks) medication escalation is considered;
    operational actions are drawn every week.
    """

    archetypes: tuple = (LOW, HIGH, OPS)
    escalate2_min_weeks: dict = field(default_factory=lambda: {
        "T2D": {"low": 16, "high": 12, "ops_augmented": 12},
    })
    review_interval_weeks: dict = field(default_factory=lambda: {"HTN": 2, "T2D": 3})

    def __post_init__(self):
        if len(self.archetypes) != 3:
            raise ValueError("behavior mixture needs exactly three archetypes")
        total = sum(a.population_share for a in self.archetypes)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"archetype shares sum to {total}, expected 1")

    def for_condition(self, condition_id: str) -> tuple:
        overrides = self.escalate2_min_weeks.get(condition_id, {})
        return tuple(
            replace(a, escalate2_min_weeks=overrides[a.archetype_id]) if a.archetype_id in overrides else a
            for a in self.archetypes
        )

    def archetype(self, archetype_id: str, condition_id: Optional[str] = None) -> ArchetypeSpec:
        pool = self.for_condition(condition_id) if condition_id else self.archetypes
        for a in pool:
            if a.archetype_id == archetype_id:
                return a
        raise KeyError(archetype_id)

    def review_interval(self, condition_id: str) -> int:
        return int(self.review_interval_weeks.get(condition_id, 1))

    @property
    def shares(self) -> np.ndarray:
        return np.array([a.population_share for a in self.archetypes])

    def to_dict(self) -> dict:
        return {
            "archetypes": [asdict(a) for a in self.archetypes],
            "escalate2_min_weeks": self.escalate2_min_weeks,
            "review_interval_weeks": self.review_interval_weeks,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BehaviorConfig":
        kw = dict(d)
        if "archetypes" in kw:
            kw["archetypes"] = tuple(ArchetypeSpec(**a) for a in kw["archetypes"])
        return cls(**kw)


def assign_archetype(rng: np.random.Generator, config: Optional[BehaviorConfig] = None) -> str:
    config = config or BehaviorConfig()
    shares = config.shares
    k = int(np.searchsorted(np.cumsum(shares), rng.random() * shares.sum(), side="right"))
    return config.archetypes[min(k, len(shares) - 1)].archetype_id


def behavior_action(
    archetype: ArchetypeSpec,
    state: PatientState,
    spec: ConditionSpec,
    rng: np.random.Generator,
    review: bool = True,
) -> Action:
    """Propose this week's action.  Never de-escalates.

    Two uniforms are consumed on every call so the stream stays aligned.
    """
    u_esc, u_op = rng.random(2)
    uncontrolled = state.observed >= spec.control_threshold
    med = state.med_level
    if uncontrolled and review:
        if med == 0 and u_esc < archetype.first_line_probability(state.weeks_on_current):
            med = 1
        elif med == 1 and u_esc < archetype.second_line_probability(state.weeks_on_current):
            med = 2
    p_op = archetype.op_prob_uncontrolled if uncontrolled else archetype.op_prob_controlled
    return Action(med, int(u_op < p_op))


class BehaviorPolicy:
    """The archetype mixture as a policy usable by the evaluation harness."""

    name = "behavior"

    def __init__(self, config: Optional[BehaviorConfig] = None):
        self.config = config or BehaviorConfig()

    def start_patient(self, condition_id: str, policy_rng: np.random.Generator):
        arch_id = assign_archetype(policy_rng, self.config)
        archetype = self.config.archetype(arch_id, condition_id)
        interval = self.config.review_interval(condition_id)

        def propose(state: PatientState, spec: ConditionSpec) -> Action:
            return behavior_action(archetype, state, spec, policy_rng, review=state.week % interval == 0)

        return arch_id, propose


def rollout_patient(params, spec: ConditionSpec, propose, eps: float, env_rng, policy_rng, on_step=None) -> PatientState:
    """Simulate one patient for the full horizon.

    ``propose(state, spec)`` returns the intended action; a medication change
    executes with probability ``eps`` (one gate draw per week, always consumed).
    ``on_step(before, proposed, executed, after_state)`` is called after each week.
    """
    state = initial_state(params, spec, env_rng)
    for _ in range(spec.horizon_weeks):
        proposed = propose(state, spec)
        gate = policy_rng.random()
        changes = proposed.med_level != state.med_level
        executes = (not changes) or eps >= 1.0 or gate < eps
        executed = proposed if executes else Action(state.med_level, proposed.op)
        if on_step is not None:
            before = (state.week, state.observed, state.med_level, state.weeks_on_current)
            step(params, state, executed, executes, spec, env_rng)
            on_step(before, proposed, executed, state)
        else:
            step(params, state, executed, executes, spec, env_rng)
    return state


def generate_dataset(
    pop_size: int,
    condition,
    behavior_config: Optional[BehaviorConfig] = None,
    eps_gate: float = 1.0,
    seed: int = 0,
    discretization: Optional[DiscretizationSpec] = None,
    namespace: str = "train",
) -> Dataset:
    """Roll out ``pop_size`` patients under the behavior mixture and record every week."""
    if int(pop_size) < 1:
        raise ValueError("pop_size must be >= 1")
    if not 0.0 < eps_gate <= 1.0:
        raise ValueError("eps_gate must lie in (0, 1]")
    spec = get_condition(condition) if isinstance(condition, str) else condition
    config = behavior_config or BehaviorConfig()
    disc = discretization or default_discretization(spec.condition_id)
    policy = BehaviorPolicy(config)
    ns = f"{namespace}/{spec.condition_id}/eps={eps_gate!r}"
    e_bucket = eps_bucket(eps_gate)
    horizon = spec.horizon_weeks
    records: list = []

    for pid in range(int(pop_size)):
        env_rng, policy_rng = rngmod.patient_streams(seed, ns, pid)
        params = sample_patient(spec, env_rng)
        arch_id, propose = policy.start_patient(spec.condition_id, policy_rng)
        params.archetype_id = arch_id

        def on_step(before, proposed, executed, st, pid=pid, arch_id=arch_id):
            week, obs, med, w = before
            baseline = st.baseline
            stalls = detect_stalls(st, spec)
            records.append(TransitionRecord(
                patient_id=pid,
                archetype_id=arch_id,
                week=week,
                obs=obs,
                next_obs=st.observed,
                baseline=baseline,
                med_level=med,
                weeks_on=w,
                next_med_level=st.med_level,
                next_weeks_on=st.weeks_on_current,
                action_index=executed.index,
                proposed_index=proposed.index,
                med_changed=executed.med_level != med,
                op_taken=bool(executed.op),
                hit_ttg="ttg" in st.events,
                hit_tto="tto" in st.events,
                hit_ttc="ttc" in st.events,
                stall_g=stalls.stall_g,
                stall_o=stalls.stall_o,
                stall_r=stalls.stall_r,
                terminal=week == horizon - 1,
                eps=float(eps_gate),
                state_index=encode_state(obs, baseline, med, w, disc),
                next_state_index=encode_state(st.observed, baseline, st.med_level, st.weeks_on_current, disc),
                eps_bucket=e_bucket,
            ))

        rollout_patient(params, spec, propose, eps_gate, env_rng, policy_rng, on_step)

    header = {
        "condition": spec.condition_id,
        "eps_gate": float(eps_gate),
        "seed": int(seed),
        "pop_size": int(pop_size),
        "horizon_weeks": horizon,
        "n_records": len(records),
        "namespace": namespace,
        "behavior_hash": spec_hash(config),
    }
    return Dataset(header, records, spec, disc)
