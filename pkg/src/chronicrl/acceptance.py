"""Acceptance checks over Study A / Study B reports plus the self-contained property and density suites.

Every check yields one :class:`Check`; ``format_checks`` renders one PASS/FAIL line each.
"""
from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass
from typing import Iterable, List

import numpy as np

from .behavior import generate_dataset
from .capability import CapabilityEstimate, kappa_from_scores, zscore
from .dataset import TransitionRecord, read_dataset, write_dataset
from .env import HTN, T2D, Action, PatientParams, PatientState, biomarker_mean, get_condition, step
from .offline_q import OfflineQLearner
from .reward import RewardConfig, compute_rewards, reward_density

# (lo, hi) bands for the behavior baseline, per condition
CALIBRATION_BANDS = {
    "HTN": {"ttg_rate": (93.0, 99.0), "ttc_rate": (9.0, 19.0), "mean_reduction": (12.3, 15.3)},
    "T2D": {"ttg_rate": (88.0, 94.0), "ttc_rate": (22.0, 32.0), "mean_reduction": (0.87, 1.17)},
}
KAPPA_TARGETS = {"HTN": (0.78, -1.41), "T2D": (0.83, -1.41)}
KAPPA_TOL = 0.15
STUDY_A_GAPS = {"HTN": 2.0, "T2D": 10.0}
T2D_UNIFORM_GAP = -5.0
STUDY_B_MIN_GAP = {"HTN": 1.0, "T2D": 0.10}
STUDY_B_MIN_CLIMB = {"HTN": 0.1, "T2D": 0.03}
STUDY_B_NAIVE_FLAT = {"HTN": 0.5, "T2D": 0.05}
DENSITY_BAND = (0.7, 1.5)
TERMINAL_DENSITY = 0.2


@dataclass
class Check:
    criterion: int
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] C{self.criterion} {self.name}: {self.detail}"


def format_checks(checks: Iterable[Check]) -> str:
    return "\n".join(c.line() for c in checks)


def all_passed(checks: Iterable[Check]) -> bool:
    return all(c.passed for c in checks)


def _fmt(x: float) -> str:
    return f"{x:.3f}" if abs(x) < 10 else f"{x:.2f}"


# criterion 1 ---------------------------------------------------------------
def check_calibration(report) -> List[Check]:
    out = []
    for cid in _conditions(report):
        row = report.lookup("behavior", cid)
        for metric, (lo, hi) in CALIBRATION_BANDS[cid].items():
            v = row[f"{metric}_mean"]
            out.append(Check(1, f"{cid} behavior {metric}", lo <= v <= hi,
                             f"{_fmt(v)} (std {_fmt(row[f'{metric}_std'])}) in [{lo}, {hi}]"))
    return out


# criterion 2 ---------------------------------------------------------------
def check_kappa(report) -> List[Check]:
    out = []
    for cid in _conditions(report):
        rows = [c for c in report.capability if c["condition"] == cid]
        if not rows:
            out.append(Check(2, f"{cid} kappa", False, "no capability rows in report"))
            continue
        bad = [c["seed"] for c in rows
               if not float(c["kappa_ops_augmented"]) > float(c["kappa_high"]) > float(c["kappa_low"])]
        out.append(Check(2, f"{cid} ordering ops_augmented > high > low", not bad,
                         f"{len(rows) - len(bad)}/{len(rows)} seeds" + (f"; violated on seeds {bad}" if bad else "")))
        top, bottom = KAPPA_TARGETS[cid]
        for arch, target in (("ops_augmented", top), ("low", bottom)):
            vals = [float(c[f"kappa_{arch}"]) for c in rows]
            worst = max(vals, key=lambda v: abs(v - target))
            out.append(Check(2, f"{cid} kappa[{arch}] within {KAPPA_TOL} of {target:+.2f}",
                             all(abs(v - target) <= KAPPA_TOL for v in vals),
                             f"per-seed {', '.join(f'{v:+.3f}' for v in vals)}; worst {worst:+.3f}"))
    return out


# criteria 3 and 4 ------------------------------------------------------------
def check_study_a(report) -> List[Check]:
    out = []
    for cid in _conditions(report):
        beh = report.lookup("behavior", cid)["ttc_rate_mean"]
        cap = report.lookup("capability_terminal", cid)["ttc_rate_mean"]
        need = STUDY_A_GAPS[cid]
        out.append(Check(3, f"{cid} capability_terminal - behavior TTC >= {need:+.0f}pp", cap - beh >= need,
                         f"{cap:.1f}% - {beh:.1f}% = {cap - beh:+.1f}pp"))
        if cid == "T2D":
            uni = report.lookup("uniform_tiered", cid)["ttc_rate_mean"]
            out.append(Check(3, f"T2D uniform_tiered - behavior TTC <= {T2D_UNIFORM_GAP:+.0f}pp",
                             uni - beh <= T2D_UNIFORM_GAP, f"{uni:.1f}% - {beh:.1f}% = {uni - beh:+.1f}pp"))
    runtime = getattr(report, "runtime_s", 0.0) or 0.0
    if runtime:
        out.append(Check(3, "Study A runtime < 30 min", runtime < 1800, f"{runtime / 60:.1f} min"))
    return out


def check_weighting(report) -> List[Check]:
    out = []
    if "T2D" not in _conditions(report):
        return out
    for kind in ("tiered", "terminal"):
        cap = report.lookup(f"capability_{kind}", "T2D")["ttc_rate_mean"]
        uni = report.lookup(f"uniform_{kind}", "T2D")["ttc_rate_mean"]
        out.append(Check(4, f"T2D {kind}: capability TTC >= uniform TTC", cap >= uni, f"{cap:.1f}% vs {uni:.1f}%"))
    return out


# criterion 5 ---------------------------------------------------------------
def check_study_b(report) -> List[Check]:
    out = []
    for cid in _conditions(report):
        u = get_condition(cid).units
        def red(label, eps):
            return report.lookup(label, cid, eps)["mean_reduction_mean"]
        eps_values = sorted({r.eps_deploy for r in report.rows if r.condition == cid})
        for eps in eps_values:
            a, n = red("eps_aware", eps), red("eps_naive", eps)
            out.append(Check(5, f"{cid} aware > naive at eps={eps}", a > n,
                             f"{_fmt(a)} vs {_fmt(n)} {u}"))
        if 0.5 in eps_values:
            a, n = red("eps_aware", 0.5), red("eps_naive", 0.5)
            need = STUDY_B_MIN_GAP[cid]
            out.append(Check(5, f"{cid} aware - naive at eps=0.5 >= {need}", a - n >= need,
                             f"{a - n:+.3f} {u}"))
        if 0.5 in eps_values and 0.9 in eps_values:
            climb = red("eps_aware", 0.9) - red("eps_aware", 0.5)
            need = STUDY_B_MIN_CLIMB[cid]
            out.append(Check(5, f"{cid} aware gain eps 0.5->0.9 >= {need}", climb >= need, f"{climb:+.3f} {u}"))
            drift = red("eps_naive", 0.9) - red("eps_naive", 0.5)
            lim = STUDY_B_NAIVE_FLAT[cid]
            out.append(Check(5, f"{cid} naive change eps 0.5->0.9 within +-{lim}", abs(drift) <= lim,
                             f"{drift:+.3f} {u}"))
    return out


# criterion 6 ---------------------------------------------------------------
def check_properties(n_patients: int = 200, seed: int = 0) -> List[Check]:
    """Quick versions of the invariant suites; the test suite runs the hypothesis variants."""
    out = []
    for spec in (HTN, T2D):
        data = generate_dataset(n_patients, spec, seed=seed)
        trajs = list(data.patients().values())

        nested = single = 0
        for traj in trajs:
            weeks = {}
            ok_single = True
            for name in ("ttg", "tto", "ttc"):
                hits = [r.week + 1 for r in traj if getattr(r, f"hit_{name}")]
                ok_single &= len(hits) <= 1
                weeks[name] = hits[0] if hits else None
            single += ok_single
            g, o = weeks["ttg"], weeks["tto"]
            nested += o is None or (g is not None and g <= o)
        out.append(Check(6, f"{spec.condition_id} milestone nesting", nested == len(trajs),
                         f"{nested}/{len(trajs)} trajectories"))
        out.append(Check(6, f"{spec.condition_id} first-passage single-fire", single == len(trajs),
                         f"{single}/{len(trajs)} trajectories"))

        cfg = RewardConfig(stall_penalty_per_week=0.01)
        rewards = compute_rewards(data, cfg)
        worst = 0.0
        start = 0
        for traj in trajs:
            got = float(rewards[start:start + len(traj)].sum())
            start += len(traj)
            want = (cfg.w_g * any(r.hit_ttg for r in traj) + cfg.w_o * any(r.hit_tto for r in traj)
                    + cfg.w_c * any(r.hit_ttc for r in traj)
                    - sum(cfg.med_change_cost * r.med_changed + cfg.op_cost * r.op_taken for r in traj)
                    - sum(cfg.stall_penalty_per_week * r.stall_g for r in traj))
            worst = max(worst, abs(got - want))
        out.append(Check(6, f"{spec.condition_id} tiered accounting identity", worst < 1e-9,
                         f"max |error| {worst:.2e}"))

        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "d.csv")
            write_dataset(data, path)
            back = read_dataset(path)
        out.append(Check(6, f"{spec.condition_id} dataset round-trip bit-exact", back.records == data.records,
                         f"{len(data.records)} records"))

        again = generate_dataset(n_patients, spec, seed=seed)
        same = [r.next_obs for r in again.records] == [r.next_obs for r in data.records]
        kw = dict(n_iterations=20, batch_size=256, random_state=seed)
        t1 = OfflineQLearner(**kw).fit(data).q_table_.digest()
        t2 = OfflineQLearner(**kw).fit(again).q_table_.digest()
        out.append(Check(6, f"{spec.condition_id} deterministic reruns", same and t1 == t2,
                         "dataset and q-table digests identical" if same and t1 == t2 else "digests differ"))

        est = kappa_from_scores({"low": 1.0, "high": 2.0, "ops_augmented": 4.0})
        flat = CapabilityEstimate(est.archetypes, est.scores, {k: 0.0 for k in est.kappa})
        u = OfflineQLearner(beta=0.0, **kw).fit(data).q_table_.digest()
        w = OfflineQLearner(beta=2.5, **kw).fit(data, flat).q_table_.digest()
        out.append(Check(6, f"{spec.condition_id} beta=0 equals uniform weighting", u == w == t1,
                         "identical q-tables" if u == w == t1 else "q-tables differ"))

    rng = np.random.default_rng(seed)
    worst_sum = worst_sd = 0.0
    for _ in range(200):
        v = rng.normal(size=int(rng.integers(2, 8))) * rng.uniform(0.1, 100)
        z = zscore(v)
        worst_sum = max(worst_sum, abs(z.sum()))
        worst_sd = max(worst_sd, abs(z.std() - 1.0))
    out.append(Check(6, "z-normalization sum 0 and std 1", worst_sum < 1e-9 and worst_sd < 1e-9,
                     f"max |sum| {worst_sum:.1e}, max |std-1| {worst_sd:.1e}"))

    spec = HTN.with_overrides(noise_sd=0.0, adherence_cap=1.0)
    params = PatientParams(160.0, 10.0, 20.0, 1.0)
    state = PatientState(week=3, med_level=1, weeks_on_current=3, observed=160.0, baseline=160.0)
    step(params, state, Action(1, 0), True, spec, np.random.default_rng(0))
    oracle = 160.0 - 10.0 * (1.0 - math.exp(-4 / 4.0))
    out.append(Check(6, "noise-free step equals closed form", abs(state.observed - oracle) < 1e-12
                     and state.observed == biomarker_mean(params, spec, 1, 4, True),
                     f"{state.observed:.6f} vs {oracle:.6f}"))
    return out


# criterion 7 ---------------------------------------------------------------
def synthetic_population(n: int = 100, ttg_only: float = 0.5, full: float = 0.2, spec=HTN) -> list:
    """Trajectories with a fixed share of TTG-only and full TTG/TTO/TTC patients.

    Full-milestone patients pass each tier in a different week and end
    controlled; everyone else ends neither controlled nor poor.
    """
    n_ttg = int(round(n * ttg_only))
    n_full = int(round(n * full))
    base = spec.setpoint_mean
    good = spec.control_threshold - 0.5 * spec.ttg_delta
    middle = base - 0.5 * (spec.ttg_delta + spec.tto_delta)
    trajs = []
    for pid in range(n):
        if pid < n_ttg:
            events = {6: ("ttg",)}
            end = middle
        elif pid < n_ttg + n_full:
            events = {4: ("ttg",), 10: ("tto",), 16: ("ttc",)}
            end = good
        else:
            events = {}
            end = middle
        recs = []
        for w in range(spec.horizon_weeks):
            names = events.get(w, ())
            last = w == spec.horizon_weeks - 1
            recs.append(TransitionRecord(
                patient_id=pid, archetype_id="synthetic", week=w, obs=base, next_obs=end if last else base,
                baseline=base, med_level=0, weeks_on=w, next_med_level=0, next_weeks_on=w + 1,
                action_index=0, proposed_index=0, med_changed=False, op_taken=False,
                hit_ttg="ttg" in names, hit_tto="tto" in names, hit_ttc="ttc" in names, terminal=last,
            ))
        trajs.append(recs)
    return trajs


def check_density() -> List[Check]:
    pop = synthetic_population()
    tiered = reward_density(pop, "tiered", HTN)
    terminal = reward_density(pop, "terminal", HTN)
    lo, hi = DENSITY_BAND
    return [
        Check(7, "tiered density in 0.7-1.5 events/patient-year", lo <= tiered <= hi, f"{tiered:.3f}"),
        Check(7, "terminal density ~0.2 events/patient-year", abs(terminal - TERMINAL_DENSITY) < 0.05,
              f"{terminal:.3f}"),
        Check(7, "tiered density >= terminal density", tiered >= terminal, f"{tiered:.3f} vs {terminal:.3f}"),
    ]


def _conditions(report) -> list:
    seen = []
    for r in report.rows:
        if r.condition not in seen:
            seen.append(r.condition)
    return seen


def run_checks(report_a=None, report_b=None, properties: bool = False, density: bool = False) -> List[Check]:
    checks: List[Check] = []
    if report_a is not None:
        checks += check_calibration(report_a)
        checks += check_kappa(report_a)
        checks += check_study_a(report_a)
        checks += check_weighting(report_a)
    if report_b is not None:
        checks += check_study_b(report_b)
    if properties:
        checks += check_properties()
    if density:
        checks += check_density()
    return checks
