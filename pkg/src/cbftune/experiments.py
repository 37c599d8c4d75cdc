"""Reproducible studies: feasibility grids, iterate paths, follower runs.

Everything here is deterministic given its inputs; grid cells are pure
fixed-parameter rollouts and can be evaluated in parallel worker processes
when more than one CPU is available.
"""

from __future__ import annotations

import dataclasses
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .plants import CarModel, ParamVector, PlantModel
from .rollout import rollout
from .updates import (RATE_MAX, RATE_MIN, Case1Result, OnlineResult,
                      RfggdConfig, online_adapt, update_feasible,
                      update_infeasible)


@dataclass(frozen=True)
class GridSpec:
    """Axes and scenario of a car feasibility grid.

    a_range / b_range are (min, max, count) for the two barrier rates; the
    cell value is how many steps the closed loop stays QP-feasible, capped
    at horizon_cap.
    """

    a_range: tuple = (RATE_MIN, RATE_MAX, 50)
    b_range: tuple = (RATE_MIN, RATE_MAX, 50)
    c: float = 0.3
    x0: float = 0.5
    horizon_cap: int = 100
    dt: float = 0.01

    def __post_init__(self):
        for name, rng in (("a_range", self.a_range), ("b_range", self.b_range)):
            lo, hi, count = rng
            if not (0.0 < lo < hi):
                raise ValueError(f"{name} must satisfy 0 < min < max, got {rng}")
            if int(count) < 2:
                raise ValueError(f"{name} needs at least 2 points, got {count}")
        if not self.c < 1.0:
            raise ValueError(f"c must be < 1, got {self.c}")
        if self.horizon_cap < 1:
            raise ValueError("horizon_cap must be >= 1")

    def a_values(self) -> np.ndarray:
        lo, hi, count = self.a_range
        return np.linspace(lo, hi, int(count))

    def b_values(self) -> np.ndarray:
        lo, hi, count = self.b_range
        return np.linspace(lo, hi, int(count))


@dataclass
class GridResult:
    """feasible-steps matrix, indexed [a_index, b_index]."""

    values: np.ndarray
    a_values: np.ndarray
    b_values: np.ndarray
    spec: GridSpec


def _grid_row(args):
    a, b_values, c, dt, x0, cap = args
    model = CarModel(c=c, dt=dt)
    x = np.array([x0])
    out = np.empty(len(b_values), dtype=int)
    for jj, b in enumerate(b_values):
        theta = ParamVector(cbf_rates=np.array([a, b]))
        out[jj] = rollout(model, x, 0.0, theta, cap,
                          compute_sens=False).feasible_steps
    return out


def car_grid(spec: GridSpec, workers: int | None = None) -> GridResult:
    """Sweep the (a, b) rate plane; each cell is a fixed-theta rollout.

    Cells are independent; with multiple CPUs rows go to worker processes.
    """
    a_values = spec.a_values()
    b_values = spec.b_values()
    jobs = [(float(a), b_values, spec.c, spec.dt, float(spec.x0),
             spec.horizon_cap) for a in a_values]
    if workers is None:
        workers = os.cpu_count() or 1
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_grid_row, jobs))
    else:
        rows = [_grid_row(job) for job in jobs]
    values = np.vstack(rows)
    return GridResult(values=values, a_values=a_values, b_values=b_values,
                      spec=spec)


@dataclass
class InitStudy:
    """Iterate path of one parameter initialization.

    thetas[k] is the accepted parameter after iteration k (thetas[0] is the
    clipped init); feasibility aligns with thetas; phases marks which update
    regime produced each entry.
    """

    init: ParamVector
    thetas: list
    feasibility: list
    phases: list
    stalled: bool


def car_rfggd_study(x0: float, c: float, theta_inits: list,
                    cfg: RfggdConfig, dt: float = 0.01,
                    horizon_cap: int = 100, case1_steps: int = 3,
                    max_rounds: int = 40) -> list:
    """Drive each init toward horizon-cap feasibility, then polish reward.

    Each round is one feasibility-extension call (gaining at least one step
    or reporting a stall); once at the cap, a few reward-ascent steps run.
    Feasibility histories are nondecreasing by construction.
    """
    model = CarModel(c=c, dt=dt)
    x = np.array([float(x0)])
    studies = []
    for init in theta_inits:
        theta = init.clipped(cfg.rate_min, cfg.rate_max)
        first = rollout(model, x, 0.0, theta, horizon_cap,
                        compute_sens=False).feasible_steps
        thetas = [theta]
        feas = [first]
        phases = ["init"]
        stalled = False
        for _ in range(max_rounds):
            if feas[-1] >= horizon_cap:
                break
            res = update_infeasible(model, x, 0.0, theta, cfg,
                                    horizon=horizon_cap)
            theta = res.theta
            thetas.extend(res.theta_history[1:])
            feas.extend(res.feasibility_history[1:])
            phases.extend(["case2"] * (len(res.feasibility_history) - 1))
            if res.stalled:
                stalled = True
                break
        if feas[-1] >= horizon_cap:
            for _ in range(case1_steps):
                res1: Case1Result = update_feasible(model, x, 0.0, theta,
                                                    horizon_cap, cfg)
                theta = res1.theta
                thetas.append(theta)
                feas.append(res1.trace_after.feasible_steps)
                phases.append("case1")
                if not res1.accepted or res1.status == "no_op":
                    break
        studies.append(InitStudy(init=init, thetas=thetas, feasibility=feas,
                                 phases=phases, stalled=stalled))
    return studies


@dataclass
class FollowerReport:
    """Adaptive run vs. frozen-parameter baseline on the same scenario."""

    adaptive: OnlineResult
    baseline: OnlineResult

    @property
    def total_adaptive(self) -> float:
        return self.adaptive.total_objective

    @property
    def total_baseline(self) -> float:
        return self.baseline.total_objective


def follower_study(model: PlantModel, theta0: ParamVector, sim_steps: int,
                   cfg: RfggdConfig,
                   x0: np.ndarray | None = None) -> FollowerReport:
    """Run online adaptation and its learning_rate=0 twin from one state.

    Both runs share the initial state and, because the first instant acts
    before any update, the first input as well.
    """
    x0 = np.zeros(model.n_x) if x0 is None else np.asarray(x0, dtype=float)
    adaptive = online_adapt(model, x0, theta0, sim_steps, cfg)
    frozen = dataclasses.replace(cfg, learning_rate=0.0)
    baseline = online_adapt(model, x0, theta0, sim_steps, frozen)
    return FollowerReport(adaptive=adaptive, baseline=baseline)
