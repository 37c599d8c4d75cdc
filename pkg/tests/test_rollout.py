"""Closed-loop rollouts: oracle agreement, sensitivities, CSV output."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbftune.plants import ParamVector, car_model, unicycle_model
from cbftune.rollout import (GradientBundle, RolloutTrace, grad_margins,
                             grad_objective, objective_value, rollout,
                             write_csv, write_trace_csv)

from oracles import car_objective, car_simulate, central_diff


def _car_theta(a, b, u_nom=None):
    return ParamVector(
        cbf_rates=np.array([a, b]),
        nominal_input=None if u_nom is None else np.array([u_nom]))


# --- agreement with the closed-form car oracle ------------------------------

@given(st.integers(0, 20_000))
@settings(max_examples=60)
def test_car_rollout_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    c = float(rng.uniform(-0.3, 0.8))
    dt = float(rng.uniform(0.02, 0.1))
    a, b = rng.uniform(0.05, 3.0, size=2)
    x0 = float(rng.uniform(0.05, 0.95))
    horizon = 30
    m = car_model(c, dt=dt)
    tr = rollout(m, np.array([x0]), 0.0, _car_theta(a, b), horizon,
                 compute_sens=False)
    states, inputs, n_feas = car_simulate(x0, a, b, c, dt, horizon)
    assert tr.feasible_steps == n_feas
    np.testing.assert_allclose(tr.states[:len(states)].ravel(), states,
                               atol=1e-7)
    np.testing.assert_allclose(tr.inputs.ravel(), inputs, atol=1e-7)
    if tr.complete:
        assert objective_value(tr) == pytest.approx(car_objective(inputs),
                                                    abs=1e-7)
    else:
        assert tr.status == "infeasible"
        assert tr.feasible_steps < horizon


def test_trace_shapes_on_truncation():
    # far-too-aggressive decay rates make the corner cell die quickly
    m = car_model(0.3, dt=0.01)
    tr = rollout(m, np.array([0.5]), 0.0, _car_theta(1e-3, 1e-3), 100,
                 compute_sens=False)
    assert not tr.complete
    k = tr.feasible_steps
    assert 0 <= k < 100
    assert tr.states.shape == (k + 1, 1)
    assert tr.inputs.shape == (k, 1)
    assert tr.margins.shape == (k, 2)
    assert len(tr.active_sets) == k
    assert tr.state_sens is None


def test_rollout_times_and_sens_shapes():
    m = car_model(0.3, dt=0.1)
    tr = rollout(m, np.array([0.5]), 0.25, _car_theta(0.5, 0.5), 5)
    np.testing.assert_allclose(tr.times(), 0.25 + 0.1 * np.arange(6))
    assert tr.state_sens.shape == (6, 1, 2)
    assert tr.z_sens.shape == (5, 1, 2)
    np.testing.assert_array_equal(tr.state_sens[0], np.zeros((1, 2)))
    assert tr.input_sens.shape == (5, 1, 2)


# --- hand-derived two-step gradients ----------------------------------------

def test_two_step_closed_form():
    # x0 = 0.02 with rates 0.5: lower row binds both steps.
    #   u1 = 1 - a h0/dt = 0.9            u2 = 1 - a(1-a) h0/dt = 0.95
    #   dJ/da = -2 u1 (-h0/dt) at a = 1/2 (u2 term vanishes) = 0.36
    m = car_model(0.3, dt=0.1)
    tr = rollout(m, np.array([0.02]), 0.0, _car_theta(0.5, 0.5), 2)
    assert tr.complete
    np.testing.assert_allclose(tr.inputs.ravel(), [0.9, 0.95], atol=1e-10)
    assert objective_value(tr) == pytest.approx(-1.7125, abs=1e-10)
    grad = grad_objective(tr, m)
    assert grad.shape == (2,)
    assert grad[0] == pytest.approx(0.36, abs=1e-10)
    assert grad[1] == pytest.approx(0.0, abs=1e-10)
    # duals: lambda = 2 u / dt on the binding row
    assert tr.duals[0][0] == pytest.approx(18.0, abs=1e-8)
    assert tr.active_sets[0] == (0,)


# --- finite-difference checks ------------------------------------------------

def _fd_objective_grad(model, x0, theta, horizon, h=1e-6):
    arr = theta.to_array()

    def J(vec):
        tr = rollout(model, x0, 0.0, theta.with_array(vec), horizon,
                     compute_sens=False)
        assert tr.complete
        return np.array([objective_value(tr)])

    return central_diff(J, arr, h=h).ravel()


def test_car_objective_gradient_vs_fd():
    m = car_model(0.3, dt=0.1)
    th = _car_theta(0.6, 0.8, u_nom=0.2)
    x0 = np.array([0.3])
    tr = rollout(m, x0, 0.0, th, 10)
    assert tr.complete
    grad = grad_objective(tr, m)
    fd = _fd_objective_grad(m, x0, th, 10)
    np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-8)


def test_unicycle_objective_gradient_vs_fd():
    m = unicycle_model()
    th = ParamVector(cbf_rates=np.array([0.6, 0.7, 0.8]), clf_rate=0.5)
    x0 = np.array([-1.1, 0.1, 0.1])
    tr = rollout(m, x0, 0.0, th, 8)
    assert tr.complete
    grad = grad_objective(tr, m)
    fd = _fd_objective_grad(m, x0, th, 8)
    np.testing.assert_allclose(grad, fd, rtol=2e-3, atol=1e-6)


def test_margin_gradients_vs_fd():
    m = car_model(0.3, dt=0.1)
    th = _car_theta(0.6, 0.8)
    x0 = np.array([0.3])
    horizon = 6
    tr = rollout(m, x0, 0.0, th, horizon)
    bundle = grad_margins(tr, m)
    assert isinstance(bundle, GradientBundle)
    assert bundle.margin_grads.shape == (horizon, 2, 2)

    h = 1e-6
    arr = th.to_array()
    for j in range(arr.size):
        step = np.zeros_like(arr)
        step[j] = h
        hi = rollout(m, x0, 0.0, th.with_array(arr + step), horizon,
                     compute_sens=False)
        lo = rollout(m, x0, 0.0, th.with_array(arr - step), horizon,
                     compute_sens=False)
        fd = (hi.margins - lo.margins) / (2 * h)
        np.testing.assert_allclose(bundle.margin_grads[:, :, j], fd,
                                   rtol=1e-5, atol=1e-7)


def test_margin_gradients_on_truncated_trace():
    m = car_model(0.3, dt=0.01)
    tr = rollout(m, np.array([0.5]), 0.0, _car_theta(0.01, 0.01), 100,
                 compute_sens=True)
    assert not tr.complete
    bundle = grad_margins(tr, m)
    assert bundle.margin_grads.shape == (tr.feasible_steps, 2, 2)
    assert np.isfinite(bundle.margin_grads).all()


def test_grad_objective_requires_complete_trace():
    m = car_model(0.3, dt=0.01)
    tr = rollout(m, np.array([0.5]), 0.0, _car_theta(0.01, 0.01), 100)
    assert not tr.complete
    with pytest.raises(ValueError):
        grad_objective(tr, m)


# --- CSV ---------------------------------------------------------------------

def test_write_csv_atomic_and_stable(tmp_path):
    path = tmp_path / "out.csv"
    write_csv(str(path), ["a", "b"], [["1.5", "x"], ["2.5", "y"]])
    first = path.read_bytes()
    assert first == b"a,b\n1.5,x\n2.5,y\n"
    write_csv(str(path), ["a", "b"], [["1.5", "x"], ["2.5", "y"]])
    assert path.read_bytes() == first
    assert list(tmp_path.iterdir()) == [path]  # no stray temp files


def test_write_trace_csv_complete(tmp_path):
    m = car_model(0.3, dt=0.1)
    tr = rollout(m, np.array([0.5]), 0.0, _car_theta(0.5, 0.5), 4,
                 compute_sens=False)
    path = tmp_path / "trace.csv"
    write_trace_csv(tr, str(path))
    lines = path.read_text().splitlines()
    assert len(lines) == 1 + 4
    assert lines[0].startswith("t,")
    # floats are round-trippable reprs
    val = lines[1].split(",")[1]
    assert float(val) == tr.states[0, 0]


def test_write_trace_csv_truncated(tmp_path):
    m = car_model(0.3, dt=0.01)
    tr = rollout(m, np.array([0.5]), 0.0, _car_theta(1e-3, 1e-3), 100,
                 compute_sens=False)
    path = tmp_path / "trace.csv"
    write_trace_csv(tr, str(path))
    lines = path.read_text().splitlines()
    assert len(lines) == 1 + tr.feasible_steps + 1
    assert lines[-1].endswith("infeasible")
