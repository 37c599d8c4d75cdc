"""Parameter updates that respect closed-loop QP feasibility.

Two regimes share one projection machinery:

* feasible horizon -- ascend the rollout reward, projected so every margin's
  first-order prediction stays nonnegative (update_feasible);
* infeasible horizon -- diagnose the first failing step by its least-squares
  relaxation, take the limiting row's margin gradient as ascent, and project
  it against the margins of the feasible prefix (update_infeasible).

Both clip rates into a configured box after every step and re-simulate before
accepting, so feasibility history never regresses and reward never drops on
an accepted feasible-regime step.  `online_adapt` interleaves one accepted
update per simulated instant with acting in the loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .plants import ParamVector, PlantModel, build_qp
from .qp import QpProblem, QpStatus, min_relaxation, solve
from .rollout import (GradientBundle, RolloutTrace, grad_margins,
                      objective_value, rollout)

RATE_MIN = 1e-3
RATE_MAX = 5.0


@dataclass(frozen=True)
class RfggdConfig:
    """Knobs of the feasibility-guided update rules.

    learning_rate scales the projected direction (0 disables adaptation);
    trust_radius bounds each component of the direction; regularization is
    the quadratic damping of the direction QP; rates are clipped into
    [rate_min, rate_max] after every update.
    """

    learning_rate: float = 1.0
    trust_radius: float = 0.5
    regularization: float = 1.0
    max_case2_iters: int = 50
    max_backtracks: int = 12
    rate_min: float = RATE_MIN
    rate_max: float = RATE_MAX
    lookahead: int = 10

    def __post_init__(self):
        if self.learning_rate < 0.0:
            raise ValueError("learning_rate must be >= 0")
        if self.regularization < 0.0:
            raise ValueError("regularization must be >= 0")
        if not (self.trust_radius > 0.0 or self.regularization > 0.0):
            raise ValueError("need a trust radius or regularization to bound steps")
        if not 0.0 < self.rate_min < self.rate_max:
            raise ValueError("rate box must satisfy 0 < rate_min < rate_max")
        if self.lookahead < 1 or self.max_case2_iters < 1 or self.max_backtracks < 1:
            raise ValueError("iteration counts must be >= 1")


@dataclass
class DirectionResult:
    """Outcome of the feasible-direction projection QP."""

    d_theta: np.ndarray
    predicted_margins: np.ndarray   # (K, m): margins + grads @ d
    objective_projection: float     # inner product of ascent with d
    solver_status: QpStatus


@dataclass
class Case1Result:
    """One reward-ascent attempt on a feasible horizon."""

    theta: ParamVector
    direction: DirectionResult
    trace_before: RolloutTrace
    trace_after: RolloutTrace
    accepted: bool
    backtracks: int
    objective_before: float
    objective_after: float
    status: str                     # accepted | no_op | backtrack_exhausted


@dataclass
class Case2Result:
    """Feasibility-extension loop outcome."""

    theta: ParamVector
    iterations_used: int
    feasibility_history: list
    stalled: bool
    theta_history: list = field(default_factory=list)


@dataclass
class OnlineResult:
    """Closed-loop adaptation run: trajectory, parameters, horizon objectives."""

    times: np.ndarray               # (S+1,)
    states: np.ndarray              # (S+1, n_x)
    inputs: np.ndarray              # (S, n_u)
    barrier_values: np.ndarray      # (S+1, n_barriers)
    rewards: np.ndarray             # (S,) realized stage rewards
    horizon_objectives: np.ndarray  # (S,) lookahead J of the policy used
    theta_history: np.ndarray       # (S+1, n_theta)
    feasible_steps_history: np.ndarray  # (S,) lookahead feasibility before acting
    annotations: list               # (S,) '', 'stalled', 'backtrack_exhausted'

    @property
    def total_objective(self) -> float:
        return float(self.horizon_objectives.sum())


def feasible_direction(bundle: GradientBundle | None, ascent: np.ndarray,
                       cfg: RfggdConfig) -> DirectionResult:
    """Project an ascent direction against linearized margin constraints.

    Solves max <ascent, d> - 0.5*reg*|d|^2 subject to every bundled margin's
    first-order prediction staying >= 0 and |d|_inf <= trust_radius.  d = 0
    is always admissible for margins from a solved trace, so the projection
    cannot come back infeasible on sane inputs.
    """
    ascent = np.asarray(ascent, dtype=float).reshape(-1)
    n_th = ascent.shape[0]
    if bundle is not None and bundle.margin_grads.shape[2] != n_th:
        raise ValueError("ascent length does not match margin gradients")
    empty = np.zeros((0, n_th))
    if not np.any(ascent):
        pred = bundle.margin_values.copy() if bundle is not None \
            else np.zeros((0, 0))
        return DirectionResult(np.zeros(n_th), pred, 0.0, QpStatus.OPTIMAL)

    rows = [bundle.margin_grads.reshape(-1, n_th)] if bundle is not None else []
    rhs = [-bundle.margin_values.reshape(-1)] if bundle is not None else []
    if np.isfinite(cfg.trust_radius):
        eye = np.eye(n_th)
        rows += [eye, -eye]
        rhs += [np.full(n_th, -cfg.trust_radius)] * 2
    G = np.vstack(rows) if rows else empty
    w = np.concatenate(rhs) if rhs else np.zeros(0)
    prob = QpProblem(H=cfg.regularization * np.eye(n_th), f=-ascent, G=G, w=w)
    sol = solve(prob)
    d = sol.z if sol.optimal else np.zeros(n_th)
    if bundle is not None:
        pred = bundle.margin_values + bundle.margin_grads @ d
    else:
        pred = np.zeros((0, 0))
    return DirectionResult(d, pred, float(ascent @ d), sol.status)


def _clip_step(theta: ParamVector, d: np.ndarray, beta: float,
               cfg: RfggdConfig) -> ParamVector:
    return theta.with_array(theta.to_array() + beta * d).clipped(
        cfg.rate_min, cfg.rate_max)


def update_feasible(model: PlantModel, x0: np.ndarray, t0: float,
                    theta: ParamVector, horizon: int, cfg: RfggdConfig,
                    trace: RolloutTrace | None = None) -> Case1Result:
    """One reward-ascent step on a horizon-feasible parameter point.

    Backtracks the learning rate until the re-simulated candidate keeps the
    horizon feasible and does not lower the objective; exhausting the
    backtracking budget returns the original parameters, flagged.
    """
    if trace is None:
        trace = rollout(model, x0, t0, theta, horizon)
    if not trace.complete:
        raise ValueError("update_feasible requires a horizon-feasible trace")
    theta = theta.clipped(cfg.rate_min, cfg.rate_max)
    bundle = grad_margins(trace, model)
    direction = feasible_direction(bundle, bundle.grad_J, cfg)
    j0 = objective_value(trace)

    if not np.any(direction.d_theta):
        return Case1Result(theta, direction, trace, trace, True, 0, j0, j0, "no_op")

    beta = cfg.learning_rate
    for k in range(cfg.max_backtracks):
        cand = _clip_step(theta, direction.d_theta, beta, cfg)
        cand_trace = rollout(model, x0, t0, cand, horizon, compute_sens=False)
        jc = objective_value(cand_trace)
        if cand_trace.feasible_steps >= trace.feasible_steps and jc >= j0:
            status = "accepted" if np.any(cand.to_array() != theta.to_array()) \
                else "no_op"
            return Case1Result(cand, direction, trace, cand_trace, True, k,
                               j0, jc, status)
        beta *= 0.5
    return Case1Result(theta, direction, trace, trace, False,
                       cfg.max_backtracks, j0, j0, "backtrack_exhausted")


def _limiting_row_ascent(model: PlantModel, trace: RolloutTrace,
                         cfg: RfggdConfig):
    """Gradient of the limiting margin at the first infeasible step.

    The failing QP is relaxed by least-squares slacks; the row needing the
    largest slack is the limiting one.  Its margin gradient is taken at the
    relaxed solution with z frozen (no implicit QP sensitivity exists at an
    infeasible point), chained through the stored state sensitivity.

    A violated row whose margin has a vanishing parameter gradient cannot be
    raised by gradient ascent (typical once its barrier value has decayed to
    zero), so candidate rows are tried in decreasing-slack order and the
    first usable gradient wins; ties keep the lower index first.
    """
    T = trace.feasible_steps
    t_fail = trace.t0 + T * trace.dt
    x_fail = trace.states[T]
    prob, sg = build_qp(model, t_fail, x_fail, trace.theta)
    report = min_relaxation(prob)
    if report.limiting_index is None:
        return None  # borderline: the step is feasible after all
    zr = report.relaxed_solution
    n_th = trace.theta.dim
    violated = [j for j in np.argsort(-report.slacks, kind="stable")
                if report.slacks[j] > 1e-12]

    def _row_gradient(j):
        e_x = np.array([sg.x.dG[kx][j] @ zr - sg.x.dw[kx][j]
                        for kx in range(model.n_x)])
        e_th = np.array([sg.theta.dG[jt][j] @ zr - sg.theta.dw[jt][j]
                         for jt in range(n_th)])
        return e_x @ trace.state_sens[T] + e_th

    for j in violated:
        ascent = _row_gradient(int(j))
        if np.abs(ascent).max(initial=0.0) > 1e-12:
            return ascent
    return None


def _case2_direction(model: PlantModel, trace: RolloutTrace,
                     cfg: RfggdConfig) -> np.ndarray | None:
    """Ascent on the limiting margin projected against the feasible prefix."""
    ascent = _limiting_row_ascent(model, trace, cfg)
    if ascent is None:
        return None
    bundle = grad_margins(trace, model) if trace.feasible_steps > 0 else None
    return feasible_direction(bundle, ascent, cfg).d_theta


def update_infeasible(model: PlantModel, x0: np.ndarray, t0: float,
                      theta: ParamVector, cfg: RfggdConfig,
                      horizon: int | None = None) -> Case2Result:
    """Extend the feasible horizon by at least one step.

    Iterates candidate steps along the projected limiting-margin gradient;
    candidates that would shrink the feasible prefix are rejected (halving
    the rate), so the recorded feasibility history is nondecreasing.  Each
    iteration is one candidate re-simulation; running out of iterations
    before gaining a step reports a stall instead of hiding it.
    """
    horizon = cfg.lookahead if horizon is None else horizon
    theta = theta.clipped(cfg.rate_min, cfg.rate_max)
    trace = rollout(model, x0, t0, theta, horizon)
    t_init = trace.feasible_steps
    history = [t_init]
    thetas = [theta]
    if t_init >= horizon:
        return Case2Result(theta, 0, history, False, thetas)
    target = t_init + 1

    beta = cfg.learning_rate
    iterations = 0
    for _ in range(cfg.max_case2_iters):
        d = _case2_direction(model, trace, cfg)
        if d is None or not np.any(d):
            break  # no usable ascent direction: stalled
        cand = _clip_step(theta, d, beta, cfg)
        if np.array_equal(cand.to_array(), theta.to_array()):
            iterations += 1
            history.append(trace.feasible_steps)
            thetas.append(theta)
            beta *= 0.5
            continue
        cand_trace = rollout(model, x0, t0, cand, horizon, compute_sens=False)
        iterations += 1
        if cand_trace.feasible_steps < trace.feasible_steps:
            beta *= 0.5
            history.append(trace.feasible_steps)
            thetas.append(theta)
            continue
        theta = cand
        history.append(cand_trace.feasible_steps)
        thetas.append(theta)
        beta = cfg.learning_rate
        if cand_trace.feasible_steps >= min(target, horizon):
            return Case2Result(theta, iterations, history, False, thetas)
        trace = rollout(model, x0, t0, theta, horizon)
    return Case2Result(theta, iterations, history, True, thetas)


def _case2_single_step(model: PlantModel, x0: np.ndarray, t0: float,
                       theta: ParamVector, cfg: RfggdConfig,
                       trace: RolloutTrace):
    """One accepted (non-regressing) feasibility-extension step, for online use."""
    d = _case2_direction(model, trace, cfg)
    if d is None or not np.any(d):
        return theta, trace, "stalled"
    beta = cfg.learning_rate
    for _ in range(cfg.max_backtracks):
        cand = _clip_step(theta, d, beta, cfg)
        cand_trace = rollout(model, x0, t0, cand, trace.horizon,
                             compute_sens=False)
        if cand_trace.feasible_steps >= trace.feasible_steps:
            return cand, cand_trace, ""
        beta *= 0.5
    return theta, trace, "backtrack_exhausted"


def online_adapt(model: PlantModel, x0: np.ndarray, theta0: ParamVector,
                 sim_steps: int, cfg: RfggdConfig,
                 t0: float = 0.0) -> OnlineResult:
    """Simulate the plant while adapting parameters one accepted step per instant.

    Instant k rolls a lookahead from the current state; from the second
    instant on, one accepted update (reward ascent if the lookahead is
    feasible, feasibility extension otherwise) is applied before acting, and
    the first control of the updated policy drives the plant.  The first
    instant acts unadapted, so a learning_rate of 0 reproduces the fixed-
    parameter closed loop exactly, step for step.
    """
    x = np.asarray(x0, dtype=float).reshape(-1)
    t = float(t0)
    theta = theta0.clipped(cfg.rate_min, cfg.rate_max)
    adapting = cfg.learning_rate > 0.0

    def _barriers(tt, xx):
        return np.array([model.barrier(i, tt, xx)[0]
                         for i in range(model.n_barriers)])

    times = [t]
    states = [x.copy()]
    barrier_values = [_barriers(t, x)]
    thetas = [theta.to_array()]
    inputs, rewards, horizon_js, feas_hist, annotations = [], [], [], [], []

    for k in range(sim_steps):
        needs_sens = adapting and k > 0
        trace = rollout(model, x, t, theta, cfg.lookahead,
                        compute_sens=needs_sens)
        annotation = ""
        if needs_sens:
            if trace.complete:
                res = update_feasible(model, x, t, theta, cfg.lookahead, cfg,
                                      trace=trace)
                theta = res.theta
                trace = res.trace_after
                if not res.accepted:
                    annotation = res.status
            else:
                theta, trace, annotation = _case2_single_step(
                    model, x, t, theta, cfg, trace)
        if trace.feasible_steps < 1:
            raise RuntimeError(
                f"control QP infeasible at the real state (instant {k}); "
                "cannot actuate")
        u = trace.inputs[0]
        inputs.append(u.copy())
        rewards.append(model.reward(t, x, u)[0])
        horizon_js.append(objective_value(trace))
        feas_hist.append(trace.feasible_steps)
        annotations.append(annotation)

        x = model.step(t, x, u)
        t = t0 + (k + 1) * model.dt
        times.append(t)
        states.append(x.copy())
        barrier_values.append(_barriers(t, x))
        thetas.append(theta.to_array())

    return OnlineResult(
        times=np.array(times), states=np.array(states),
        inputs=np.array(inputs), barrier_values=np.array(barrier_values),
        rewards=np.array(rewards), horizon_objectives=np.array(horizon_js),
        theta_history=np.array(thetas),
        feasible_steps_history=np.array(feas_hist, dtype=int),
        annotations=annotations,
    )
