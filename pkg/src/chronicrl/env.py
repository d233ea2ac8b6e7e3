"""Weekly continuous-state patient simulators for hypertension and type 2 diabetes.

A patient is a setpoint plus two medication response coefficients and an
adherence rate.  Each week the observed biomarker is

    setpoint - r[m] * (1 - exp(-w / ramp_tau)) * X + noise

where ``m`` is the medication level, ``w`` the weeks on that level and ``X`` a
Bernoulli adherence draw.  Milestones (TTG/TTO/TTC) are tracked as first-passage
events and stall indicators are derived from them.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

N_MED_LEVELS = 3
N_ACTIONS = 6
MILESTONES = ("ttg", "tto", "ttc")


class ContractError(ValueError):
    """Raised when a caller violates an operation's precondition."""


@dataclass(frozen=True)
class ConditionSpec:
    condition_id: str
    setpoint_mean: float
    setpoint_sd: float
    setpoint_clip_lo: float
    setpoint_clip_hi: float
    r1_mean: float
    r1_sd: float
    r1_floor: float
    r2_mean: float
    r2_sd: float
    r2_floor: float
    adherence_beta_a: float
    adherence_beta_b: float
    ramp_tau: float
    noise_sd: float
    control_threshold: float
    ttg_delta: float
    tto_delta: float
    confirm_window: int
    stall_tau_g: int
    stall_tau_o: int
    stall_tau_r: int
    op_adherence_boost: float = 0.30
    adherence_cap: float = 0.98
    horizon_weeks: int = 52
    units: str = ""

    def __post_init__(self):
        problems = []
        if not self.setpoint_clip_lo < self.setpoint_clip_hi:
            problems.append("setpoint_clip_lo must be < setpoint_clip_hi")
        if self.r1_floor <= 0 or self.r2_floor <= 0:
            problems.append("response floors must be positive")
        if not 0 < self.adherence_cap <= 1:
            problems.append("adherence_cap must lie in (0, 1]")
        if not self.ttg_delta < self.tto_delta:
            problems.append("ttg_delta must be < tto_delta")
        if self.confirm_window < 1:
            problems.append("confirm_window must be >= 1")
        if self.horizon_weeks < self.confirm_window:
            problems.append("horizon_weeks must be >= confirm_window")
        if min(self.setpoint_sd, self.r1_sd, self.r2_sd, self.noise_sd) < 0:
            problems.append("standard deviations must be non-negative")
        if self.ramp_tau <= 0:
            problems.append("ramp_tau must be positive")
        if problems:
            raise ValueError(f"invalid ConditionSpec {self.condition_id!r}: " + "; ".join(problems))

    def with_overrides(self, **kw) -> "ConditionSpec":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


HTN = ConditionSpec(
    condition_id="HTN",
    setpoint_mean=160.0, setpoint_sd=12.0, setpoint_clip_lo=135.0, setpoint_clip_hi=195.0,
    r1_mean=10.0, r1_sd=2.5, r1_floor=3.0,
    r2_mean=20.0, r2_sd=4.0, r2_floor=6.0,
    adherence_beta_a=7.0, adherence_beta_b=3.0,
    ramp_tau=4.0, noise_sd=4.0,
    control_threshold=130.0, ttg_delta=15.0, tto_delta=25.0, confirm_window=4,
    stall_tau_g=8, stall_tau_o=8, stall_tau_r=8,
    units="mmHg",
)

T2D = ConditionSpec(
    condition_id="T2D",
    setpoint_mean=8.8, setpoint_sd=1.0, setpoint_clip_lo=7.2, setpoint_clip_hi=12.5,
    r1_mean=0.9, r1_sd=0.25, r1_floor=0.3,
    r2_mean=1.8, r2_sd=0.4, r2_floor=0.6,
    adherence_beta_a=7.0, adherence_beta_b=3.0,
    ramp_tau=8.0, noise_sd=0.15,
    control_threshold=7.0, ttg_delta=1.0, tto_delta=1.5, confirm_window=4,
    stall_tau_g=16, stall_tau_o=16, stall_tau_r=8,
    units="%",
)

CONDITIONS = {"HTN": HTN, "T2D": T2D}


def get_condition(condition_id: str) -> ConditionSpec:
    try:
        return CONDITIONS[condition_id.upper()]
    except KeyError:
        raise ValueError(f"unknown condition {condition_id!r}; expected one of {sorted(CONDITIONS)}") from None


@dataclass(frozen=True)
class Action:
    med_level: int
    op: int

    def __post_init__(self):
        if self.med_level not in (0, 1, 2) or self.op not in (0, 1):
            raise ValueError(f"invalid action ({self.med_level}, {self.op})")

    @property
    def index(self) -> int:
        return 2 * self.med_level + self.op

    @classmethod
    def from_index(cls, index: int) -> "Action":
        index = int(index)
        if not 0 <= index < N_ACTIONS:
            raise ValueError(f"action index {index} outside [0, {N_ACTIONS})")
        return cls(index // 2, index % 2)


NO_ACTION = Action(0, 0)


@dataclass
class PatientParams:
    setpoint: float
    response_r1: float
    response_r2: float
    adherence: float
    archetype_id: Optional[str] = None

    def response(self, med_level: int) -> float:
        return (0.0, self.response_r1, self.response_r2)[med_level]


@dataclass
class MilestoneRecord:
    ttg_week: Optional[int] = None
    tto_week: Optional[int] = None
    ttc_week: Optional[int] = None
    t0_week: int = 0

    def reached(self, name: str) -> bool:
        return getattr(self, f"{name}_week") is not None


@dataclass
class StallFlags:
    stall_g: bool = False
    stall_o: bool = False
    stall_r: bool = False
    loss_persist_weeks: int = 0


@dataclass
class PatientState:
    week: int
    med_level: int
    weeks_on_current: int
    observed: float
    baseline: float
    prev_action: Action = NO_ACTION
    in_control_streak: int = 0
    uncontrolled_streak: int = 0
    milestones: MilestoneRecord = field(default_factory=MilestoneRecord)
    adherence_effective: float = 0.0
    adherent: bool = False
    events: tuple = ()

    def copy(self) -> "PatientState":
        return replace(self, milestones=replace(self.milestones))


def sample_patient(spec: ConditionSpec, rng: np.random.Generator) -> PatientParams:
    """Draw one patient's latent parameters from a dedicated stream."""
    mu = float(np.clip(rng.normal(spec.setpoint_mean, spec.setpoint_sd),
                       spec.setpoint_clip_lo, spec.setpoint_clip_hi))
    r1 = max(float(rng.normal(spec.r1_mean, spec.r1_sd)), spec.r1_floor)
    r2 = max(float(rng.normal(spec.r2_mean, spec.r2_sd)), spec.r2_floor)
    alpha = float(rng.beta(spec.adherence_beta_a, spec.adherence_beta_b))
    return PatientParams(setpoint=mu, response_r1=r1, response_r2=r2, adherence=alpha)


def biomarker_mean(params: PatientParams, spec: ConditionSpec, m: int, w: float, adherent: bool) -> float:
    """Noise-free biomarker for medication level ``m`` after ``w`` weeks on it."""
    if m not in (0, 1, 2):
        raise ContractError(f"medication level {m} outside {{0, 1, 2}}")
    if w < 0:
        raise ContractError("weeks on medication must be non-negative")
    if not adherent or m == 0:
        return params.setpoint
    return params.setpoint - params.response(m) * (1.0 - math.exp(-w / spec.ramp_tau))


def initial_state(params: PatientParams, spec: ConditionSpec, rng: np.random.Generator) -> PatientState:
    """Week-0 observation on no medication; this value becomes the baseline."""
    obs = params.setpoint + spec.noise_sd * float(rng.standard_normal())
    controlled = obs < spec.control_threshold
    return PatientState(
        week=0, med_level=0, weeks_on_current=0, observed=obs, baseline=obs,
        in_control_streak=int(controlled), uncontrolled_streak=int(not controlled),
    )


def step(
    params: PatientParams,
    state: PatientState,
    action: Action,
    clinical_executes: bool,
    spec: ConditionSpec,
    rng: np.random.Generator,
) -> PatientState:
    """Advance ``state`` by one week in place and return it.

    ``clinical_executes`` is the execution-gate verdict for a medication change.
    Exactly two draws are taken from ``rng`` per call regardless of the action,
    so a patient's physiology stream is policy-independent.
    """
    if state.week >= spec.horizon_weeks:
        raise ContractError(f"cannot step past horizon week {spec.horizon_weeks}")

    if clinical_executes and action.med_level != state.med_level:
        state.med_level = action.med_level
        state.weeks_on_current = 0
    else:
        state.weeks_on_current += 1

    alpha_eff = min(params.adherence + spec.op_adherence_boost * action.op, spec.adherence_cap)
    u = float(rng.random())
    z = float(rng.standard_normal())
    adherent = u < alpha_eff
    observed = biomarker_mean(params, spec, state.med_level, state.weeks_on_current, adherent) + spec.noise_sd * z

    state.week += 1
    state.adherence_effective = alpha_eff
    state.adherent = adherent
    state.observed = observed
    if observed < spec.control_threshold:
        state.in_control_streak += 1
        state.uncontrolled_streak = 0
    else:
        state.in_control_streak = 0
        state.uncontrolled_streak += 1

    before = tuple(state.milestones.reached(name) for name in MILESTONES)
    update_milestones(state, observed, spec)
    state.events = tuple(
        name for name, was in zip(MILESTONES, before) if not was and state.milestones.reached(name)
    )
    state.prev_action = action
    return state


def update_milestones(state: PatientState, observed: float, spec: ConditionSpec) -> MilestoneRecord:
    """Record first passages at ``state.week``.  Fields are set once and never unset."""
    ms = state.milestones
    reduction = state.baseline - observed
    if ms.ttg_week is None and reduction >= spec.ttg_delta:
        ms.ttg_week = state.week
    if ms.tto_week is None and reduction >= spec.tto_delta:
        ms.tto_week = state.week
    if ms.ttc_week is None and state.in_control_streak >= spec.confirm_window:
        ms.ttc_week = state.week
    return ms


def detect_stalls(state: PatientState, spec: ConditionSpec) -> StallFlags:
    t = state.week
    ms = state.milestones
    stall_g = ms.ttg_week is None and t > spec.stall_tau_g
    stall_o = ms.ttg_week is not None and ms.tto_week is None and t > ms.ttg_week + spec.stall_tau_o
    loss = 0
    if ms.ttc_week is not None and state.uncontrolled_streak > 0:
        loss = state.uncontrolled_streak - 1
    stall_r = ms.ttc_week is not None and state.uncontrolled_streak > 0 and loss >= spec.stall_tau_r
    return StallFlags(stall_g=stall_g, stall_o=stall_o, stall_r=stall_r, loss_persist_weeks=loss)
