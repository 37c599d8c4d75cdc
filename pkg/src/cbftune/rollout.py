"""Closed-loop rollouts of QP controllers with forward sensitivities.

Each step solves the control QP at the current state, differentiates the
solution through its KKT system, and pushes parameter sensitivities forward:

    D_{k+1} = (dx+/dx) D_k + (dx+/du) U_k,      D_0 = 0
    U_k     = (du/dx) D_k + (du/dtheta)_direct

so every stored margin and reward carries an exact first-order response to
the controller parameters.  Rollouts stop at the first infeasible step; the
trace stays truncated there rather than zero-filled.
"""

from __future__ import annotations

import csv
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .plants import ParamVector, PlantModel, build_qp
from .qp import NumericalFailureError, QpStatus, solve
from .qp_diff import solution_jacobian

STATUS_COMPLETE = "complete"
STATUS_INFEASIBLE = "infeasible"


@dataclass
class RolloutTrace:
    """Everything one rollout produced.

    With feasible_steps = K, `states` holds K+1 entries (the last one is
    where the next QP failed, for infeasible traces) and the per-step arrays
    hold exactly K entries.  Sensitivity arrays are None when the rollout was
    run without gradients.
    """

    t0: float
    dt: float
    theta: ParamVector
    horizon: int
    feasible_steps: int
    status: str
    states: np.ndarray          # (K+1, n_x)
    z: np.ndarray               # (K, n) full QP solutions
    inputs: np.ndarray          # (K, n_u) control block of z
    margins: np.ndarray         # (K, m)
    duals: np.ndarray           # (K, m)
    active_sets: list           # K tuples
    rewards: np.ndarray         # (K,)
    state_sens: np.ndarray | None   # (K+1, n_x, n_theta)
    z_sens: np.ndarray | None   # (K, n, n_theta)
    flags: list | None          # K lists of DegeneracyFlag

    @property
    def complete(self) -> bool:
        return self.status == STATUS_COMPLETE

    @property
    def input_sens(self) -> np.ndarray | None:
        """Total du_k/dtheta per step, control block of z_sens."""
        if self.z_sens is None:
            return None
        return self.z_sens[:, : self.inputs.shape[1], :]

    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.states.shape[0])


@dataclass
class GradientBundle:
    """Margins of a trace plus their total parameter gradients.

    grad_J sums reward gradients over the steps the trace covers; for a
    truncated trace that is the gradient of the partial objective.
    """

    grad_J: np.ndarray          # (n_theta,)
    margin_values: np.ndarray   # (K, m)
    margin_grads: np.ndarray    # (K, m, n_theta)


def rollout(model: PlantModel, x0: np.ndarray, t0: float, theta: ParamVector,
            horizon: int, compute_sens: bool = True,
            tol: float = 1e-8) -> RolloutTrace:
    """Simulate `horizon` QP-controlled steps from (t0, x0).

    Stops early with status "infeasible" when a step QP has no solution.
    Raises NumericalFailureError (annotated with the step index) when the
    solver fails numerically, and SingularKktError when a solution cannot
    be differentiated.
    """
    model.check_theta(theta)
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    x = np.asarray(x0, dtype=float).reshape(-1)
    n_th = theta.dim
    n_u = model.n_u

    states = [x.copy()]
    zs, margins, duals, actives, rewards, flags = [], [], [], [], [], []
    state_sens = [np.zeros((model.n_x, n_th))] if compute_sens else None
    z_sens = [] if compute_sens else None

    status = STATUS_COMPLETE
    steps = 0
    for k in range(horizon):
        t_k = t0 + k * model.dt
        prob, sg = build_qp(model, t_k, x, theta, with_gradients=compute_sens)
        sol = solve(prob, tol=tol)
        if sol.status is QpStatus.INFEASIBLE:
            status = STATUS_INFEASIBLE
            break
        if sol.status is not QpStatus.OPTIMAL:
            raise NumericalFailureError(
                f"QP solve failed numerically at step {k + 1}")

        u = sol.z[:n_u]
        zs.append(sol.z.copy())
        margins.append(prob.margins(sol.z))
        duals.append(sol.duals.copy())
        actives.append(sol.active_set)
        rewards.append(model.reward(t_k, x, u)[0])

        if compute_sens:
            J = solution_jacobian(prob, sol)
            flags.append(J.flags)
            dz_dx = J.apply_many(sg.x)          # (n, n_x)
            dz_dth = J.apply_many(sg.theta)     # (n, n_theta)
            Zk = dz_dx @ state_sens[k] + dz_dth
            z_sens.append(Zk)
            A, B = model.step_jacobians(t_k, x, u)
            state_sens.append(A @ state_sens[k] + B @ Zk[:n_u])

        x = model.step(t_k, x, u)
        states.append(x.copy())
        steps += 1

    n = zs[0].shape[0] if zs else (n_u + (1 if model.has_lyapunov else 0))
    m = margins[0].shape[0] if margins else \
        model.n_barriers + (1 if model.has_lyapunov else 0)
    return RolloutTrace(
        t0=t0, dt=model.dt, theta=theta, horizon=horizon,
        feasible_steps=steps, status=status,
        states=np.array(states),
        z=np.array(zs).reshape(steps, n),
        inputs=np.array(zs).reshape(steps, n)[:, :n_u],
        margins=np.array(margins).reshape(steps, m),
        duals=np.array(duals).reshape(steps, m),
        active_sets=actives,
        rewards=np.array(rewards),
        state_sens=None if state_sens is None else np.array(state_sens),
        z_sens=None if z_sens is None else np.array(z_sens).reshape(steps, n, n_th),
        flags=flags if compute_sens else None,
    )


def objective_value(trace: RolloutTrace) -> float:
    """Accumulated stage reward over the steps the trace covers."""
    return float(trace.rewards.sum())


def grad_objective(trace: RolloutTrace, model: PlantModel) -> np.ndarray:
    """Gradient of the rollout objective w.r.t. the flat parameter vector.

    Requires a fully feasible trace rolled with sensitivities.
    """
    if not trace.complete:
        raise ValueError("objective gradient needs a fully feasible trace")
    return _grad_rewards(trace, model)


def _grad_rewards(trace: RolloutTrace, model: PlantModel) -> np.ndarray:
    if trace.z_sens is None:
        raise ValueError("trace was rolled without sensitivities")
    n_u = trace.inputs.shape[1]
    g = np.zeros(trace.theta.dim)
    for k in range(trace.feasible_steps):
        t_k = trace.t0 + k * trace.dt
        _, dR_dx, dR_du = model.reward(t_k, trace.states[k], trace.inputs[k])
        g += dR_dx @ trace.state_sens[k] + dR_du @ trace.z_sens[k][:n_u]
    return g


def grad_margins(trace: RolloutTrace, model: PlantModel) -> GradientBundle:
    """Total parameter gradients of every stored QP margin.

    Margins depend on theta directly (through the rows), through the solved
    z, and through the drifted state; all three channels are chained here.
    Works on truncated traces, covering their feasible prefix.
    """
    if trace.z_sens is None:
        raise ValueError("trace was rolled without sensitivities")
    K = trace.feasible_steps
    m = trace.margins.shape[1]
    n_th = trace.theta.dim
    grads = np.zeros((K, m, n_th))
    for k in range(K):
        t_k = trace.t0 + k * trace.dt
        prob, sg = build_qp(model, t_k, trace.states[k], trace.theta)
        zk = trace.z[k]
        # d margin / d x, holding z: rows stack over state components
        e_x = np.stack([sg.x.dG[kx] @ zk - sg.x.dw[kx]
                        for kx in range(model.n_x)], axis=1)      # (m, n_x)
        e_th = np.stack([sg.theta.dG[j] @ zk - sg.theta.dw[j]
                         for j in range(n_th)], axis=1)           # (m, n_theta)
        grads[k] = e_x @ trace.state_sens[k] + prob.G @ trace.z_sens[k] + e_th
    return GradientBundle(grad_J=_grad_rewards(trace, model),
                          margin_values=trace.margins.copy(),
                          margin_grads=grads)


def _fmt(v) -> str:
    return repr(float(v))


def write_trace_csv(trace: RolloutTrace, path: str) -> None:
    """Serialize a trace, one row per executed step; atomic replace on write."""
    n_x = trace.states.shape[1]
    n_u = trace.inputs.shape[1]
    m = trace.margins.shape[1]
    header = (["t"] + [f"x{i}" for i in range(n_x)] + [f"u{i}" for i in range(n_u)]
              + [f"margin{i}" for i in range(m)] + ["status"])
    rows = []
    for k in range(trace.feasible_steps):
        t_k = trace.t0 + k * trace.dt
        rows.append([_fmt(t_k)] + [_fmt(v) for v in trace.states[k]]
                    + [_fmt(v) for v in trace.inputs[k]]
                    + [_fmt(v) for v in trace.margins[k]] + ["feasible"])
    if not trace.complete:
        t_k = trace.t0 + trace.feasible_steps * trace.dt
        rows.append([_fmt(t_k)] + [_fmt(v) for v in trace.states[-1]]
                    + [""] * (n_u + m) + [trace.status])
    write_csv(path, header, rows)


def write_csv(path: str, header: list, rows: list) -> None:
    """Write rows atomically: temp file in the target directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
