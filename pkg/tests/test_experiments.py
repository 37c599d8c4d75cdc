"""Experiment drivers: survival grid, parameter studies, follower runs."""

import numpy as np
import pytest

from cbftune.experiments import (FollowerReport, GridResult, GridSpec,
                                 InitStudy, car_grid, car_rfggd_study,
                                 follower_study)
from cbftune.plants import ParamVector, unicycle_model
from cbftune.updates import RfggdConfig

from oracles import car_simulate


def _small_spec(**kw):
    defaults = dict(a_range=(1e-3, 5.0, 8), b_range=(1e-3, 5.0, 8),
                    c=0.3, x0=0.5, horizon_cap=40, dt=0.01)
    defaults.update(kw)
    return GridSpec(**defaults)


def test_grid_spec_validation():
    with pytest.raises(ValueError):
        GridSpec(a_range=(5.0, 1.0, 10))
    with pytest.raises(ValueError):
        GridSpec(a_range=(0.1, 1.0, 1))
    with pytest.raises(ValueError):
        GridSpec(c=1.0)
    with pytest.raises(ValueError):
        GridSpec(horizon_cap=0)


def test_grid_axes_are_linspace():
    spec = _small_spec()
    np.testing.assert_allclose(spec.a_values(), np.linspace(1e-3, 5.0, 8))
    np.testing.assert_allclose(spec.b_values(), np.linspace(1e-3, 5.0, 8))


def test_grid_matches_oracle_cellwise():
    spec = _small_spec()
    res = car_grid(spec, workers=1)
    assert isinstance(res, GridResult)
    assert res.values.shape == (8, 8)
    assert res.values.min() >= 0
    assert res.values.max() <= spec.horizon_cap
    for i, a in enumerate(spec.a_values()):
        for j, b in enumerate(spec.b_values()):
            _, _, n_oracle = car_simulate(spec.x0, a, b, spec.c, spec.dt,
                                          spec.horizon_cap)
            assert res.values[i, j] == n_oracle, (a, b)


def test_grid_is_asymmetric():
    # the two rates play different physical roles; in the low-rate
    # transition band swapping (a, b) changes the survival time
    spec = GridSpec(a_range=(1e-3, 0.03, 10), b_range=(1e-3, 0.03, 10),
                    c=0.3, x0=0.5, horizon_cap=100, dt=0.01)
    res = car_grid(spec, workers=1)
    assert not np.array_equal(res.values, res.values.T)


def test_grid_has_both_extremes():
    res = car_grid(_small_spec(horizon_cap=40), workers=1)
    assert (res.values == 0).any()
    assert (res.values == 40).any()


def test_car_rfggd_study_recovers_feasibility():
    inits = [ParamVector(cbf_rates=np.array([0.002, 0.004])),
             ParamVector(cbf_rates=np.array([0.01, 0.001]))]
    studies = car_rfggd_study(0.5, 0.3, inits, RfggdConfig(), dt=0.01,
                              horizon_cap=60, case1_steps=2)
    assert len(studies) == 2
    for st in studies:
        assert isinstance(st, InitStudy)
        hist = np.array(st.feasibility)
        assert (np.diff(hist) >= 0).all()
        assert hist[-1] == 60
        assert not st.stalled
        assert len(st.thetas) == len(st.feasibility) == len(st.phases)
        assert st.phases[0] == "init"
        assert "case2" in st.phases
        # rates stay inside the admissible box at every iterate
        for th in st.thetas:
            assert th.cbf_rates.min() >= 1e-3 - 1e-12
            assert th.cbf_rates.max() <= 5.0 + 1e-12


def test_car_rfggd_study_polishes_when_feasible():
    inits = [ParamVector(cbf_rates=np.array([0.5, 0.5]))]
    studies = car_rfggd_study(0.5, 0.3, inits, RfggdConfig(), dt=0.01,
                              horizon_cap=30, case1_steps=3)
    st = studies[0]
    assert st.feasibility[0] == 30          # feasible from the start
    assert set(st.phases[1:]) <= {"case1"}  # only reward polish ran


def test_follower_study_report():
    m = unicycle_model()
    theta0 = ParamVector(cbf_rates=np.array([0.5, 0.5, 0.5]), clf_rate=0.5)
    rep = follower_study(m, theta0, 30, RfggdConfig())
    assert isinstance(rep, FollowerReport)
    assert rep.adaptive.inputs.shape == (30, 2)
    assert rep.baseline.inputs.shape == (30, 2)
    # the baseline run never moves its parameters
    assert (rep.baseline.theta_history == theta0.to_array()).all()
    assert rep.total_baseline == pytest.approx(
        rep.baseline.horizon_objectives.sum())
    # identical first instant by construction
    np.testing.assert_array_equal(rep.adaptive.inputs[0],
                                  rep.baseline.inputs[0])
    np.testing.assert_array_equal(rep.adaptive.states[1],
                                  rep.baseline.states[1])


def test_follower_study_adaptation_pays():
    m = unicycle_model()
    theta0 = ParamVector(cbf_rates=np.array([0.5, 0.5, 0.5]), clf_rate=0.5)
    rep = follower_study(m, theta0, 60, RfggdConfig())
    assert rep.total_adaptive > rep.total_baseline
    assert rep.adaptive.barrier_values.min() >= 0.0
