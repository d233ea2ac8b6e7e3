import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chronicrl.env import (
    HTN,
    T2D,
    Action,
    ContractError,
    MilestoneRecord,
    PatientParams,
    PatientState,
    biomarker_mean,
    detect_stalls,
    initial_state,
    sample_patient,
    step,
    update_milestones,
)


def _closed_form(mu, r, w, tau):
    # independent restatement of the weekly response curve
    return mu - r * (1.0 - math.exp(-w / tau))


class TestSamplePatient:
    def test_zero_variance_forces_means(self):
        spec = HTN.with_overrides(setpoint_sd=0.0, r1_sd=0.0, r2_sd=0.0)
        p = sample_patient(spec, np.random.default_rng(0))
        assert (p.setpoint, p.response_r1, p.response_r2) == (160.0, 10.0, 20.0)

    def test_setpoint_clipped_to_upper_bound(self):
        spec = HTN.with_overrides(setpoint_mean=210.0, setpoint_sd=0.0)
        assert sample_patient(spec, np.random.default_rng(0)).setpoint == 195.0

    def test_response_floors(self):
        spec = HTN.with_overrides(r1_mean=-50.0, r1_sd=0.0, r2_mean=-50.0, r2_sd=0.0)
        p = sample_patient(spec, np.random.default_rng(0))
        assert p.response_r1 == HTN.r1_floor and p.response_r2 == HTN.r2_floor

    def test_adherence_mean_matches_beta_7_3(self):
        rng = np.random.default_rng(123)
        alphas = [sample_patient(HTN, rng).adherence for _ in range(10_000)]
        assert abs(np.mean(alphas) - 0.7) < 0.02

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_params_respect_bounds(self, seed):
        for spec in (HTN, T2D):
            p = sample_patient(spec, np.random.default_rng(seed))
            assert spec.setpoint_clip_lo <= p.setpoint <= spec.setpoint_clip_hi
            assert p.response_r1 >= spec.r1_floor and p.response_r2 >= spec.r2_floor
            assert 0.0 <= p.adherence <= 1.0


class TestBiomarkerMean:
    params = PatientParams(setpoint=160.0, response_r1=10.0, response_r2=20.0, adherence=0.7)

    @pytest.mark.parametrize("w", [0, 3, 50])
    def test_no_medication_is_setpoint(self, w):
        assert biomarker_mean(self.params, HTN, 0, w, True) == 160.0

    def test_zero_weeks_no_effect(self):
        assert biomarker_mean(self.params, HTN, 2, 0, True) == 160.0

    def test_eight_weeks_second_line(self):
        got = biomarker_mean(self.params, HTN, 2, 8, True)
        assert got == pytest.approx(142.7067, abs=1e-4)
        assert got == pytest.approx(_closed_form(160.0, 20.0, 8, 4.0), abs=1e-12)

    def test_non_adherent_is_setpoint(self):
        assert biomarker_mean(self.params, HTN, 2, 30, False) == 160.0

    def test_t2d_ramp_uses_eight_weeks(self):
        p = PatientParams(8.8, 0.9, 1.8, 0.7)
        assert biomarker_mean(p, T2D, 1, 8, True) == pytest.approx(8.8 - 0.9 * (1 - math.exp(-1)))

    @given(st.integers(0, 2), st.integers(0, 200), st.booleans())
    def test_monotone_ramp(self, m, w, adherent):
        a = biomarker_mean(self.params, HTN, m, w, adherent)
        b = biomarker_mean(self.params, HTN, m, w + 1, adherent)
        assert b <= a

    def test_bad_level_rejected(self):
        with pytest.raises(ContractError):
            biomarker_mean(self.params, HTN, 3, 1, True)


def _state(**kw):
    base = dict(week=3, med_level=1, weeks_on_current=3, observed=160.0, baseline=160.0)
    base.update(kw)
    return PatientState(**base)


class TestStep:
    def test_noise_free_full_adherence_matches_closed_form(self):
        spec = HTN.with_overrides(noise_sd=0.0, adherence_cap=1.0)
        params = PatientParams(160.0, 10.0, 20.0, 1.0)
        st_ = step(params, _state(), Action(1, 0), True, spec, np.random.default_rng(0))
        assert st_.weeks_on_current == 4
        assert st_.observed == pytest.approx(153.6788, abs=1e-4)
        assert st_.observed == biomarker_mean(params, spec, 1, 4, True)

    def test_adherence_cap_binds(self):
        params = PatientParams(160.0, 10.0, 20.0, 0.98)
        st_ = step(params, _state(), Action(1, 1), True, HTN, np.random.default_rng(0))
        assert st_.adherence_effective == 0.98

    def test_op_boost(self):
        params = PatientParams(160.0, 10.0, 20.0, 0.5)
        st_ = step(params, _state(), Action(1, 1), True, HTN, np.random.default_rng(0))
        assert st_.adherence_effective == pytest.approx(0.8)

    def test_blocked_change_keeps_level(self):
        params = PatientParams(160.0, 10.0, 20.0, 0.7)
        st_ = step(params, _state(med_level=0, weeks_on_current=5), Action(2, 0), False, HTN,
                   np.random.default_rng(0))
        assert st_.med_level == 0 and st_.weeks_on_current == 6

    def test_change_resets_weeks_on(self):
        params = PatientParams(160.0, 10.0, 20.0, 0.7)
        st_ = step(params, _state(med_level=0, weeks_on_current=5), Action(2, 0), True, HTN,
                   np.random.default_rng(0))
        assert st_.med_level == 2 and st_.weeks_on_current == 0

    def test_step_past_horizon_rejected(self):
        params = PatientParams(160.0, 10.0, 20.0, 0.7)
        with pytest.raises(ContractError):
            step(params, _state(week=52), Action(0, 0), True, HTN, np.random.default_rng(0))

    def test_two_draws_per_step_regardless_of_action(self):
        params = PatientParams(160.0, 10.0, 20.0, 0.7)
        r1, r2 = np.random.default_rng(5), np.random.default_rng(5)
        step(params, _state(), Action(0, 0), True, HTN, r1)
        step(params, _state(), Action(2, 1), True, HTN, r2)
        assert r1.random() == r2.random()


class TestMilestones:
    def test_ttg_first_passage(self):
        s = _state(week=6, baseline=170.0)
        update_milestones(s, 154.0, HTN)
        assert s.milestones.ttg_week == 6 and s.milestones.tto_week is None

    def test_ttc_recorded_when_window_completes(self):
        spec = HTN.with_overrides(noise_sd=0.0)
        params = PatientParams(125.0, 10.0, 20.0, 0.7)
        rng = np.random.default_rng(0)
        s = PatientState(week=0, med_level=0, weeks_on_current=0, observed=150.0, baseline=150.0)
        seq = [150.0] * 9 + [125.0] * 4 + [150.0] * 3
        for obs in seq:
            params.setpoint = obs
            step(params, s, Action(0, 0), True, spec, rng)
        # controlled at weeks 10..13
        assert s.milestones.ttc_week == 13

    def test_no_reduction_no_milestones(self):
        spec = HTN.with_overrides(noise_sd=0.0)
        params = PatientParams(170.0, 10.0, 20.0, 0.7)
        rng = np.random.default_rng(0)
        s = initial_state(params, spec, rng)
        for _ in range(52):
            step(params, s, Action(0, 0), True, spec, rng)
        assert s.milestones == MilestoneRecord()

    def test_first_passage_is_sticky(self):
        s = _state(week=4, baseline=170.0)
        update_milestones(s, 150.0, HTN)
        s.week = 5
        update_milestones(s, 140.0, HTN)
        assert s.milestones.ttg_week == 4 and s.milestones.tto_week == 5


class TestStalls:
    def test_progress_stall_after_tau_g(self):
        assert detect_stalls(_state(week=9), HTN).stall_g

    def test_nothing_before_timeout(self):
        f = detect_stalls(_state(week=4), HTN)
        assert not (f.stall_g or f.stall_o or f.stall_r)

    def test_intermediate_stall(self):
        s = _state(week=20)
        s.milestones.ttg_week = 10
        assert detect_stalls(s, HTN).stall_o
        s.week = 18
        assert not detect_stalls(s, HTN).stall_o

    def test_regression_stall_at_tau_r(self):
        spec = HTN.with_overrides(noise_sd=0.0)
        params = PatientParams(120.0, 10.0, 20.0, 0.7)
        rng = np.random.default_rng(0)
        s = PatientState(week=0, med_level=0, weeks_on_current=0, observed=120.0, baseline=120.0,
                         in_control_streak=1)
        flags_at = {}
        for week in range(1, 52):
            params.setpoint = 120.0 if week < 30 else 150.0
            step(params, s, Action(0, 0), True, spec, rng)
            flags_at[week] = detect_stalls(s, spec)
        assert s.milestones.ttc_week == 3
        tau = spec.stall_tau_r
        assert not flags_at[30 + tau - 1].stall_r
        assert flags_at[30 + tau].stall_r
        assert flags_at[30 + tau].loss_persist_weeks == tau


def _simulate(seed, spec, policy):
    rng = np.random.default_rng(seed)
    params = sample_patient(spec, rng)
    s = initial_state(params, spec, rng)
    trace = []
    for _ in range(spec.horizon_weeks):
        before = (s.milestones.ttg_week, s.milestones.tto_week, s.milestones.ttc_week)
        step(params, s, policy(s), True, spec, rng)
        after = (s.milestones.ttg_week, s.milestones.tto_week, s.milestones.ttc_week)
        for b, a in zip(before, after):
            assert b is None or a == b
        trace.append(s.observed)
    return s, trace


@given(st.integers(0, 2**31), st.sampled_from([HTN, T2D]), st.integers(0, 5))
@settings(max_examples=60, deadline=None)
def test_milestone_nesting_and_single_fire(seed, spec, a):
    s, _ = _simulate(seed, spec, lambda _s: Action.from_index(a))
    ms = s.milestones
    weeks = [w for w in (ms.ttg_week, ms.tto_week) if w is not None]
    assert weeks == sorted(weeks)
    if ms.tto_week is not None:
        assert ms.ttg_week is not None and ms.ttg_week <= ms.tto_week


def test_deterministic_trajectories():
    a = _simulate(42, HTN, lambda s: Action(2, 1))[1]
    b = _simulate(42, HTN, lambda s: Action(2, 1))[1]
    assert a == b


def test_action_index_bijection():
    seen = {Action.from_index(i).index for i in range(6)}
    assert seen == set(range(6))
    with pytest.raises(ValueError):
        Action.from_index(6)


def test_condition_spec_invariants():
    with pytest.raises(ValueError):
        HTN.with_overrides(ttg_delta=30.0)
    with pytest.raises(ValueError):
        HTN.with_overrides(setpoint_clip_lo=200.0)
