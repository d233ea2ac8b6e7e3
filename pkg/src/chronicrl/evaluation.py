"""Policy rollouts on fresh patients, outcome metrics, and the two study pipelines."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import rng as rngmod
from .behavior import BehaviorConfig, BehaviorPolicy, generate_dataset, rollout_patient
from .capability import CapabilityEstimate, infer_kappa
from .dataset import Dataset, DiscretizationSpec, default_discretization, encode_state
from .env import Action, ConditionSpec, get_condition, sample_patient
from .offline_q import OfflineQLearner, QTable, TrainConfig, available_actions, greedy_action
from .reward import RewardConfig

log = logging.getLogger(__name__)

EVAL_NAMESPACE = "eval"
FINAL_WINDOW = 4


class FixedPolicy:
    """Always proposes the same action (useful as an oracle and for tests)."""

    def __init__(self, action: Action, name: Optional[str] = None):
        self.action = action
        self.name = name or f"fixed({action.med_level},{action.op})"

    def start_patient(self, condition_id, policy_rng):
        return None, lambda state, spec: self.action


class QPolicy:
    """Greedy policy read off a trained Q-table.

    States never visited in training fall back to (current med, no op); for an
    eps-aware table the lookup first backs off to the nearest eps bucket that
    does have data.
    """

    def __init__(self, table: QTable, eps_min=0.0, name: str = "q"):
        self.table = table
        self.eps_min = eps_min
        self.name = name
        self.unseen_fallbacks = 0
        self.eps_backoffs = 0
        self.deescalations = 0
        self.decisions = 0
        disc = table.discretization
        self._seen = table.data_counts.sum(axis=1) > 0
        self._shape = disc.shape
        self.eps_deploy = 1.0

    def _lookup(self, idx: tuple) -> Optional[int]:
        flat = int(np.ravel_multi_index(idx, self._shape))
        if self._seen[flat]:
            return flat
        if len(idx) == 5:
            n_eps = self._shape[4]
            order = sorted(range(n_eps), key=lambda b: (abs(b - idx[4]), b))
            for b in order[1:]:
                alt = int(np.ravel_multi_index(idx[:4] + (b,), self._shape))
                if self._seen[alt]:
                    self.eps_backoffs += 1
                    return alt
        return None

    def act(self, state, spec: ConditionSpec, eps_hat: float) -> Action:
        disc = self.table.discretization
        idx = encode_state(state.observed, state.baseline, state.med_level, state.weeks_on_current, disc,
                           eps_hat if disc.eps_aware else None)
        self.decisions += 1
        flat = self._lookup(idx)
        if flat is None:
            self.unseen_fallbacks += 1
            return Action(state.med_level, 0)
        avail = available_actions(idx, eps_hat, self.eps_min)
        a = Action.from_index(greedy_action(self.table.q[flat], state.med_level, avail))
        if a.med_level < state.med_level:
            self.deescalations += 1
        return a

    def start_patient(self, condition_id, policy_rng):
        return None, lambda state, spec: self.act(state, spec, self.eps_deploy)

    @classmethod
    def from_learner(cls, learner: OfflineQLearner, name: str = "q") -> "QPolicy":
        return cls(learner.q_table_, learner.eps_min_, name)


@dataclass
class PatientOutcomes:
    ttg: np.ndarray
    tto: np.ndarray
    ttc: np.ndarray
    reduction: np.ndarray
    archetype: list = field(default_factory=list)

    def metrics(self) -> dict:
        return {
            "ttg_rate": 100.0 * float(self.ttg.mean()),
            "tto_rate": 100.0 * float(self.tto.mean()),
            "ttc_rate": 100.0 * float(self.ttc.mean()),
            "mean_reduction": float(self.reduction.mean()),
        }


def rollout_policy(policy, condition, n_patients: int, eps_deploy: float = 1.0, seed: int = 0,
                   namespace: str = EVAL_NAMESPACE) -> PatientOutcomes:
    """Simulate ``n_patients`` fresh patients under ``policy`` with medication changes gated by ``eps_deploy``."""
    spec = get_condition(condition) if isinstance(condition, str) else condition
    if hasattr(policy, "eps_deploy"):
        policy.eps_deploy = float(eps_deploy)
    ns = f"{namespace}/{spec.condition_id}"
    ttg = np.zeros(n_patients, dtype=bool)
    tto = np.zeros(n_patients, dtype=bool)
    ttc = np.zeros(n_patients, dtype=bool)
    red = np.zeros(n_patients)
    arch = []
    for pid in range(n_patients):
        env_rng, policy_rng = rngmod.patient_streams(seed, ns, pid)
        params = sample_patient(spec, env_rng)
        label, propose = policy.start_patient(spec.condition_id, policy_rng)
        arch.append(label)
        tail: list = []

        def on_step(before, proposed, executed, st, tail=tail):
            tail.append(st.observed)

        state = rollout_patient(params, spec, propose, eps_deploy, env_rng, policy_rng, on_step)
        ms = state.milestones
        ttg[pid] = ms.ttg_week is not None
        tto[pid] = ms.tto_week is not None
        ttc[pid] = ms.ttc_week is not None
        red[pid] = state.baseline - float(np.mean(tail[-FINAL_WINDOW:]))
    return PatientOutcomes(ttg, tto, ttc, red, arch)


@dataclass
class SeedResult:
    label: str
    condition: str
    seed: int
    eps_deploy: float
    n_patients: int
    ttg_rate: float
    tto_rate: float
    ttc_rate: float
    mean_reduction: float
    units: str = ""
    deescalations: int = 0
    unseen_fallbacks: int = 0
    eps_backoffs: int = 0


@dataclass
class EvalReport:
    study: str
    rows: list = field(default_factory=list)
    capability: list = field(default_factory=list)
    runtime_s: float = 0.0

    def summary(self) -> list:
        return summarize(self.rows)

    def lookup(self, label: str, condition: str, eps_deploy: Optional[float] = None) -> dict:
        for row in self.summary():
            if row["label"] == label and row["condition"] == condition and (
                eps_deploy is None or math.isclose(row["eps_deploy"], eps_deploy)
            ):
                return row
        raise KeyError((label, condition, eps_deploy))

    def write_csv(self, path) -> None:
        fields_ = list(asdict(self.rows[0])) + ["kind"]
        summ = self.summary()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(fields_)
            for r in self.rows:
                w.writerow(list(asdict(r).values()) + ["seed"])
            for s in summ:
                for stat in ("mean", "std"):
                    w.writerow([
                        s["label"], s["condition"], stat, s["eps_deploy"], s["n_patients"],
                        s[f"ttg_rate_{stat}"], s[f"tto_rate_{stat}"], s[f"ttc_rate_{stat}"],
                        s[f"mean_reduction_{stat}"], s["units"], s["deescalations"], s["unseen_fallbacks"],
                        s["eps_backoffs"], "summary",
                    ])

    @classmethod
    def read_csv(cls, path, study: str = "") -> "EvalReport":
        """Rebuild a report from the per-seed rows of :meth:`write_csv` (summary rows are recomputed)."""
        types = {f.name: f.type for f in fields(SeedResult)}
        conv = {"int": int, "float": float, "str": str}
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                if rec.get("kind") != "seed":
                    continue
                rows.append(SeedResult(**{k: conv[types[k]](v) for k, v in rec.items() if k in types}))
        if not rows:
            raise ValueError(f"{path}: no per-seed rows")
        return cls(study, rows)

    def write_capability_csv(self, path) -> None:
        if not self.capability:
            return
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(self.capability[0]))
            w.writeheader()
            w.writerows(self.capability)

    def read_capability_csv(self, path) -> None:
        with open(path, newline="") as fh:
            self.capability = [
                {k: (v if k == "condition" else int(v) if k == "seed" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)
            ]


METRICS = ("ttg_rate", "tto_rate", "ttc_rate", "mean_reduction")


def summarize(rows: Sequence[SeedResult]) -> list:
    """Mean and sample std (n-1; 0 for a single seed) per (label, condition, eps)."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r.label, r.condition, r.eps_deploy), []).append(r)
    out = []
    for (label, cond, eps), rs in groups.items():
        row = {"label": label, "condition": cond, "eps_deploy": eps, "n_patients": rs[0].n_patients,
               "seeds": [r.seed for r in rs], "units": rs[0].units,
               "deescalations": sum(r.deescalations for r in rs),
               "unseen_fallbacks": sum(r.unseen_fallbacks for r in rs),
               "eps_backoffs": sum(r.eps_backoffs for r in rs)}
        for m in METRICS:
            vals = np.array([getattr(r, m) for r in rs], dtype=float)
            row[f"{m}_mean"] = float(vals.mean())
            row[f"{m}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out.append(row)
    return out


def mean_std(values: Sequence[float]) -> tuple:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("need at least one value")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def _evaluate(policy, label, spec, n_eval, eps, seed) -> SeedResult:
    out = rollout_policy(policy, spec, n_eval, eps, seed)
    m = out.metrics()
    return SeedResult(
        label=label, condition=spec.condition_id, seed=seed, eps_deploy=float(eps), n_patients=n_eval,
        units=spec.units, deescalations=getattr(policy, "deescalations", 0),
        unseen_fallbacks=getattr(policy, "unseen_fallbacks", 0), eps_backoffs=getattr(policy, "eps_backoffs", 0),
        **m,
    )


STUDY_A_CONFIGS = (
    ("behavior", None, None),
    ("uniform_tiered", "tiered", False),
    ("capability_tiered", "tiered", True),
    ("capability_terminal", "terminal", True),
    # left out of the headline table; needed for the per-reward-kind weighting comparison
    ("uniform_terminal", "terminal", False),
)
TABLE1_LABELS = ("behavior", "uniform_tiered", "capability_tiered", "capability_terminal")
STUDY_B_TRAIN_EPS = (0.25, 0.5, 0.75)
STUDY_B_DEPLOY_EPS = (0.25, 0.5, 0.75, 0.9)


@dataclass
class StudySettings:
    conditions: tuple = ("HTN", "T2D")
    seeds: tuple = (0, 1, 2, 3, 4)
    n_train: int = 2000
    n_eval: int = 1000
    beta: float = 2.5
    behavior: BehaviorConfig = field(default_factory=BehaviorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    condition_overrides: dict = field(default_factory=dict)
    discretization_overrides: dict = field(default_factory=dict)
    study_b_reward: str = "tiered"
    study_b_beta: float = 2.5
    study_b_train_eps: tuple = STUDY_B_TRAIN_EPS
    study_b_naive_eps: float = 0.5
    study_b_deploy_eps: tuple = STUDY_B_DEPLOY_EPS
    study_b_action_source: str = "executed"

    def condition(self, cid: str) -> ConditionSpec:
        spec = get_condition(cid)
        over = self.condition_overrides.get(cid)
        return spec.with_overrides(**over) if over else spec

    def discretization(self, cid: str, eps_aware: bool = False) -> DiscretizationSpec:
        base = default_discretization(cid)
        over = self.discretization_overrides.get(cid)
        if over:
            base = DiscretizationSpec(**{**base.to_dict(), **over})
        return base.with_eps() if eps_aware and not base.eps_aware else base


def _reward(settings: StudySettings, kind: str) -> RewardConfig:
    return RewardConfig(**{**settings.reward.to_dict(), "kind": kind})


def _train_cfg(settings: StudySettings, seed: int, beta: float, eps_aware: bool = False) -> TrainConfig:
    t = settings.train
    return replace(t, beta=beta, eps_aware=eps_aware, seed=seed)


def _fit(settings, cid, seed, data, kind, beta, estimate, eps_aware=False, **train_over) -> OfflineQLearner:
    learner = OfflineQLearner.from_config(
        replace(_train_cfg(settings, seed, beta, eps_aware), **train_over), _reward(settings, kind),
        settings.discretization(cid, eps_aware),
    )
    return learner.fit(data, estimate)


def study_a_unit(settings: StudySettings, cid: str, seed: int) -> tuple:
    """One (condition, seed) cell of Study A: returns ``(rows, capability_row)``."""
    spec = settings.condition(cid)
    data = generate_dataset(settings.n_train, spec, settings.behavior, 1.0, seed,
                            settings.discretization(cid))
    est = infer_kappa(data, beta=settings.beta)
    cap = {"condition": cid, "seed": seed,
           **{f"kappa_{a}": est.kappa[a] for a in est.archetypes},
           **{f"score_{a}": est.scores[a] for a in est.archetypes}}
    rows = []
    for label, kind, weighted in STUDY_A_CONFIGS:
        if kind is None:
            policy = BehaviorPolicy(settings.behavior)
        else:
            beta = settings.beta if weighted else 0.0
            learner = _fit(settings, cid, seed, data, kind, beta, est if weighted else None)
            policy = QPolicy.from_learner(learner, label)
        rows.append(_evaluate(policy, label, spec, settings.n_eval, 1.0, seed))
    return rows, cap


def study_b_unit(settings: StudySettings, cid: str, seed: int) -> tuple:
    """One (condition, seed) cell of Study B: both variants at every deployment eps."""
    spec = settings.condition(cid)
    kind, beta = settings.study_b_reward, settings.study_b_beta
    naive_data = generate_dataset(settings.n_train, spec, settings.behavior, settings.study_b_naive_eps, seed,
                                  settings.discretization(cid), namespace="train-b")
    k = len(settings.study_b_train_eps)
    sizes = [settings.n_train // k + (i < settings.n_train % k) for i in range(k)]
    aware_data = Dataset.concat([
        generate_dataset(n, spec, settings.behavior, e, seed, settings.discretization(cid), namespace="train-b")
        for n, e in zip(sizes, settings.study_b_train_eps)
    ])
    variants = []
    for label, data, aware in (("eps_naive", naive_data, False), ("eps_aware", aware_data, True)):
        est = infer_kappa(data, beta=beta) if beta > 0 else None
        variants.append((label, _fit(settings, cid, seed, data, kind, beta, est, aware,
                                             action_source=settings.study_b_action_source)))
    rows = []
    for eps in settings.study_b_deploy_eps:
        for label, learner in variants:
            rows.append(_evaluate(QPolicy.from_learner(learner, label), label, spec, settings.n_eval, eps, seed))
    return rows, None


def _run_study(name, unit, settings, progress, jobs) -> EvalReport:
    report = EvalReport(name)
    t0 = time.perf_counter()
    cells = [(cid, seed) for cid in settings.conditions for seed in settings.seeds]
    if jobs and jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(unit, [settings] * len(cells), *zip(*cells)))
    else:
        results = []
        for cid, seed in cells:
            results.append(unit(settings, cid, seed))
            if progress:
                for row in results[-1][0]:
                    progress(row)
    for rows, cap in results:
        report.rows.extend(rows)
        if cap is not None:
            report.capability.append(cap)
    report.runtime_s = time.perf_counter() - t0
    return report


def study_a(settings: Optional[StudySettings] = None, progress: Optional[Callable] = None, jobs: int = 1) -> EvalReport:
    """Uniform vs capability-weighted offline Q-learning against the behavior mixture."""
    return _run_study("A", study_a_unit, settings or StudySettings(), progress, jobs)


def study_b(settings: Optional[StudySettings] = None, progress: Optional[Callable] = None, jobs: int = 1) -> EvalReport:
    """eps-naive (single training eps) vs eps-aware (pooled, eps in state) across deployment eps."""
    return _run_study("B", study_b_unit, settings or StudySettings(seeds=(0, 1, 2)), progress, jobs)
