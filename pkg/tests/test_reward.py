import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chronicrl.behavior import generate_dataset
from chronicrl.dataset import TransitionRecord
from chronicrl.env import HTN, Action
from chronicrl.reward import (
    RewardConfig,
    action_cost,
    compute_rewards,
    final_status,
    reward_density,
    terminal_reward,
    tiered_reward,
)


def rec(**kw):
    base = dict(patient_id=0, archetype_id="low", week=10, obs=150.0, next_obs=150.0, baseline=160.0,
                med_level=1, weeks_on=3, next_med_level=1, next_weeks_on=4, action_index=2, proposed_index=2,
                med_changed=False, op_taken=False)
    base.update(kw)
    return TransitionRecord(**base)


class TestCosts:
    def test_none(self):
        assert action_cost(Action(1, 0), Action(1, 0)) == 0.0

    def test_change_and_op_additive(self):
        assert action_cost(Action(2, 1), Action(1, 0)) == pytest.approx(0.015)

    def test_op_only(self):
        assert action_cost(Action(1, 1), Action(1, 0)) == pytest.approx(0.005)


class TestTiered:
    def test_ttc_week(self):
        assert tiered_reward(rec(hit_ttc=True)) == 2.5

    def test_costs_only(self):
        assert tiered_reward(rec(med_changed=True, op_taken=True)) == pytest.approx(-0.015)

    def test_quiet_week(self):
        assert tiered_reward(rec()) == 0.0

    def test_stall_penalty_optional(self):
        assert tiered_reward(rec(stall_g=True)) == 0.0
        cfg = RewardConfig(stall_penalty_per_week=0.01)
        assert tiered_reward(rec(stall_g=True), cfg) == pytest.approx(-0.01)

    def test_same_week_multiple_tiers(self):
        assert tiered_reward(rec(hit_ttg=True, hit_tto=True)) == pytest.approx(2.5)


class TestTerminal:
    def test_controlled_at_end(self):
        assert terminal_reward(rec(terminal=True, next_obs=125.0), spec=HTN) == 2.5

    def test_mid_trajectory_op(self):
        assert terminal_reward(rec(op_taken=True), spec=HTN) == pytest.approx(-0.005)

    def test_middle_band(self):
        # reduction 20 (not poor), still above 130 (not controlled)
        assert terminal_reward(rec(terminal=True, baseline=160.0, next_obs=140.0), spec=HTN) == 0.0

    def test_poor_outcome(self):
        assert terminal_reward(rec(terminal=True, baseline=160.0, next_obs=150.0), spec=HTN) == -2.5
        cfg = RewardConfig(kind="terminal", poor_outcome_rule="none")
        assert terminal_reward(rec(terminal=True, next_obs=150.0), config=cfg, spec=HTN) == 0.0

    def test_summary_override(self):
        assert terminal_reward(rec(terminal=True), (True, False)) == 2.5

    def test_final_status(self):
        assert final_status(rec(next_obs=129.9), HTN) == (True, False)


def test_config_validation():
    with pytest.raises(ValueError):
        RewardConfig(w_g=2.0, w_o=1.5)
    with pytest.raises(ValueError):
        RewardConfig(med_change_cost=-0.1)
    with pytest.raises(ValueError):
        RewardConfig(kind="dense")


@pytest.fixture(scope="module")
def data():
    return generate_dataset(150, "HTN", seed=5)


def test_accounting_identity_exact(data):
    cfg = RewardConfig(stall_penalty_per_week=0.01)
    rewards = compute_rewards(data, cfg)
    by_pid = {}
    for r, x in zip(data.records, rewards):
        by_pid.setdefault(r.patient_id, []).append((r, x))
    for rows in by_pid.values():
        recs = [r for r, _ in rows]
        expected = (cfg.w_g * any(r.hit_ttg for r in recs) + cfg.w_o * any(r.hit_tto for r in recs)
                    + cfg.w_c * any(r.hit_ttc for r in recs))
        expected -= sum(cfg.med_change_cost * r.med_changed + cfg.op_cost * r.op_taken for r in recs)
        expected -= sum(cfg.stall_penalty_per_week * r.stall_g for r in recs)
        assert sum(x for _, x in rows) == pytest.approx(expected, abs=1e-12)


def test_each_tier_fires_at_most_once(data):
    for traj in data.patients().values():
        for name in ("ttg", "tto", "ttc"):
            assert sum(getattr(r, f"hit_{name}") for r in traj) <= 1


def test_tiered_density_at_least_terminal(data):
    assert reward_density(data, "tiered") >= reward_density(data, "terminal")


def _traj(pid, events=(), controlled_end=False):
    recs = []
    for w in range(52):
        kw = {}
        for name, week in events:
            if week == w:
                kw[f"hit_{name}"] = True
        end_obs = 125.0 if controlled_end else 140.0
        recs.append(rec(patient_id=pid, week=w, terminal=w == 51, next_obs=end_obs if w == 51 else 150.0, **kw))
    return recs


def test_density_zero_milestones():
    pop = [_traj(i) for i in range(10)]
    assert reward_density(pop, "tiered") == 0.0


def test_density_terminal_counts_controlled():
    pop = [_traj(i, controlled_end=i < 2) for i in range(10)]
    assert reward_density(pop, "terminal", spec=HTN) == pytest.approx(0.2)


def test_density_mixed_population():
    pop = ([_traj(i, [("ttg", 5)]) for i in range(5)]
           + [_traj(i, [("ttg", 4), ("tto", 9), ("ttc", 14)], True) for i in range(5, 7)]
           + [_traj(i) for i in range(7, 10)])
    assert reward_density(pop, "tiered") == pytest.approx(1.1)


@given(st.lists(st.tuples(st.booleans(), st.booleans(), st.booleans(), st.booleans(), st.booleans()),
                min_size=1, max_size=30))
@settings(max_examples=100)
def test_tiered_reward_bounded(flags):
    cfg = RewardConfig()
    for g, o, c, mc, op in flags:
        x = tiered_reward(rec(hit_ttg=g, hit_tto=o, hit_ttc=c, med_changed=mc, op_taken=op), cfg)
        assert abs(x) <= cfg.max_abs_reward
