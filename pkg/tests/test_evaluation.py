import numpy as np
import pytest

from chronicrl.behavior import BehaviorPolicy, generate_dataset
from chronicrl.env import HTN, Action
from chronicrl.evaluation import (
    FixedPolicy,
    QPolicy,
    SeedResult,
    StudySettings,
    mean_std,
    rollout_policy,
    study_a,
    study_b,
    summarize,
)
from chronicrl.offline_q import OfflineQLearner, TrainConfig


def _row(seed, red, label="x"):
    return SeedResult(label, "HTN", seed, 1.0, 10, 50.0, 20.0, 10.0, red)


def test_summarize_two_seeds():
    (row,) = summarize([_row(0, 10.0), _row(1, 14.0)])
    assert row["mean_reduction_mean"] == 12.0
    assert row["mean_reduction_std"] == pytest.approx(2.8284271247461903)


def test_summarize_single_seed_zero_std():
    (row,) = summarize([_row(0, 10.0)])
    assert row["mean_reduction_std"] == 0.0


def test_mean_std():
    assert mean_std([1.0, 3.0]) == (2.0, pytest.approx(2 ** 0.5))
    with pytest.raises(ValueError):
        mean_std([])


def test_maximal_treatment_bounds_behavior():
    top = rollout_policy(FixedPolicy(Action(2, 1)), "HTN", 300, seed=0).metrics()
    beh = rollout_policy(BehaviorPolicy(), "HTN", 300, seed=0).metrics()
    none = rollout_policy(FixedPolicy(Action(0, 0)), "HTN", 300, seed=0).metrics()
    assert top["mean_reduction"] > beh["mean_reduction"] > none["mean_reduction"]
    assert abs(none["mean_reduction"]) < 1.0


def test_rollout_deterministic():
    a = rollout_policy(BehaviorPolicy(), "T2D", 50, seed=3)
    b = rollout_policy(BehaviorPolicy(), "T2D", 50, seed=3)
    assert np.array_equal(a.reduction, b.reduction) and a.archetype == b.archetype


def test_low_eps_gates_fixed_escalation():
    full = rollout_policy(FixedPolicy(Action(2, 0)), "HTN", 300, eps_deploy=1.0, seed=1).metrics()
    low = rollout_policy(FixedPolicy(Action(2, 0)), "HTN", 300, eps_deploy=0.25, seed=1).metrics()
    assert full["mean_reduction"] > low["mean_reduction"]


def test_qpolicy_unseen_state_keeps_level():
    data = generate_dataset(20, "HTN", seed=0)
    learner = OfflineQLearner(n_iterations=5, batch_size=32).fit(data)
    pol = QPolicy.from_learner(learner)
    from chronicrl.env import PatientState

    st = PatientState(week=3, med_level=1, weeks_on_current=2, observed=250.0, baseline=100.0)
    assert pol.act(st, HTN, 1.0) == Action(1, 0)
    assert pol.unseen_fallbacks == 1


def test_qpolicy_eps_backoff():
    data = generate_dataset(30, "HTN", eps_gate=0.5, seed=0)
    learner = OfflineQLearner(eps_aware=True, n_iterations=5, batch_size=32).fit(data)
    pol = QPolicy.from_learner(learner)
    from chronicrl.env import PatientState

    r = data.records[0]
    st = PatientState(week=0, med_level=r.med_level, weeks_on_current=r.weeks_on, observed=r.obs,
                      baseline=r.baseline)
    pol.act(st, HTN, 0.9)
    assert pol.eps_backoffs == 1 and pol.unseen_fallbacks == 0


TINY = dict(conditions=("HTN",), seeds=(0,), n_train=60, n_eval=40,
            train=TrainConfig(iterations=5, batch_size=64))


def test_study_a_smoke(tmp_path):
    rep = study_a(StudySettings(**TINY))
    labels = {r.label for r in rep.rows}
    assert {"behavior", "uniform_tiered", "capability_tiered", "capability_terminal"} <= labels
    assert len(rep.capability) == 1
    rep.write_csv(tmp_path / "a.csv")
    assert (tmp_path / "a.csv").read_text().count("\n") > len(rep.rows)


def test_study_b_smoke():
    rep = study_b(StudySettings(**TINY))
    assert {(r.label, r.eps_deploy) for r in rep.rows} == {
        (lab, e) for lab in ("eps_naive", "eps_aware") for e in (0.25, 0.5, 0.75, 0.9)}
    assert rep.lookup("eps_aware", "HTN", 0.9)["n_patients"] == 40
