"""Command-line entry points: car-grid, car-rfggd, follow.

Runs are declared in a strict JSON config (versioned `schema` field, unknown
keys rejected) so reruns with the same config and seed produce byte-identical
CSV outputs.  Exit codes: 0 success, 2 config error, 3 numerical failure,
4 a study ended in a stalled / backtrack-exhausted terminal state.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import dataclass, fields

import numpy as np

from .experiments import (FollowerReport, GridSpec, car_grid,
                          car_rfggd_study, follower_study)
from .plants import CarModel, ParamVector, UnicycleModel
from .qp import NumericalFailureError
from .qp_diff import SingularKktError
from .rollout import write_csv
from .updates import OnlineResult, RfggdConfig

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_STALLED = 4


class ConfigError(Exception):
    """Invalid run configuration; message carries the offending key path."""


@dataclass
class RunConfig:
    seed: int
    out_dir: str
    model: dict
    rfggd: RfggdConfig
    experiment: dict


def _require(mapping: dict, key: str, path: str):
    if key not in mapping:
        raise ConfigError(f"{path}: missing required key '{key}'")
    return mapping[key]


def _check_keys(mapping: dict, allowed: set, path: str) -> None:
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}; allowed: {sorted(allowed)}")


def _as_number(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    return float(value)


def _as_int(value, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path}: expected an integer, got {value!r}")
    return value


def load_config(path: str) -> RunConfig:
    """Parse and validate a JSON run configuration."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(raw, {"schema", "seed", "out_dir", "model", "rfggd",
                      "experiment"}, "config")
    schema = _require(raw, "schema", "config")
    if schema != SCHEMA_VERSION:
        raise ConfigError(f"config.schema: expected {SCHEMA_VERSION}, got {schema}")
    seed = _as_int(raw.get("seed", 0), "config.seed")
    out_dir = _require(raw, "out_dir", "config")
    if not isinstance(out_dir, str):
        raise ConfigError("config.out_dir: expected a string")
    model = _require(raw, "model", "config")
    if not isinstance(model, dict):
        raise ConfigError("config.model: expected an object")
    _validate_model(model)
    rfggd = _parse_rfggd(raw.get("rfggd", {}))
    experiment = _require(raw, "experiment", "config")
    if not isinstance(experiment, dict):
        raise ConfigError("config.experiment: expected an object")
    return RunConfig(seed=seed, out_dir=out_dir, model=model, rfggd=rfggd,
                     experiment=experiment)


def _validate_model(model: dict) -> None:
    kind = _require(model, "kind", "config.model")
    if kind == "car":
        _check_keys(model, {"kind", "c", "dt"}, "config.model")
        c = _as_number(_require(model, "c", "config.model"), "config.model.c")
        if not c < 1.0:
            raise ConfigError(f"config.model.c: must be < 1, got {c}")
        if "dt" in model:
            _as_number(model["dt"], "config.model.dt")
    elif kind == "unicycle":
        _check_keys(model, {"kind", "s_min", "s_max", "gamma_deg", "s_d",
                            "dt", "leader_origin", "slack_weight"},
                    "config.model")
        for key in ("s_min", "s_max", "gamma_deg", "s_d", "dt", "slack_weight"):
            if key in model:
                _as_number(model[key], f"config.model.{key}")
        if "leader_origin" in model:
            lo = model["leader_origin"]
            if not (isinstance(lo, list) and len(lo) == 2):
                raise ConfigError("config.model.leader_origin: expected [x, y]")
    else:
        raise ConfigError(f"config.model.kind: unknown kind {kind!r}")


def _parse_rfggd(raw: dict) -> RfggdConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config.rfggd: expected an object")
    allowed = {f.name for f in fields(RfggdConfig)}
    _check_keys(raw, allowed, "config.rfggd")
    kwargs = {}
    for f in fields(RfggdConfig):
        if f.name not in raw:
            continue
        if f.type == "int":
            kwargs[f.name] = _as_int(raw[f.name], f"config.rfggd.{f.name}")
        else:
            kwargs[f.name] = _as_number(raw[f.name], f"config.rfggd.{f.name}")
    try:
        return RfggdConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"config.rfggd: {exc}") from exc


def build_model(model: dict):
    if model["kind"] == "car":
        return CarModel(c=model["c"], dt=model.get("dt", 0.01))
    kwargs = {k: model[k] for k in ("s_min", "s_max", "s_d", "dt",
                                    "slack_weight") if k in model}
    if "gamma_deg" in model:
        kwargs["gamma"] = math.radians(model["gamma_deg"])
    if "leader_origin" in model:
        kwargs["leader_origin"] = tuple(model["leader_origin"])
    return UnicycleModel(**kwargs)


def _fmt(v) -> str:
    return repr(float(v))


def _progress(quiet: bool, msg: str) -> None:
    if not quiet:
        print(msg)


# --- subcommands -----------------------------------------------------------

def cmd_car_grid(cfg: RunConfig, quiet: bool = False) -> int:
    exp = cfg.experiment
    _check_keys(exp, {"kind", "a_range", "b_range", "x0", "horizon_cap",
                      "svg"}, "config.experiment")
    if exp.get("kind") != "car-grid":
        raise ConfigError("config.experiment.kind: expected 'car-grid'")
    if cfg.model["kind"] != "car":
        raise ConfigError("car-grid requires config.model.kind = 'car'")

    def _range(key):
        rng = exp.get(key)
        if rng is None:
            return (1e-3, 5.0, 50)
        if not (isinstance(rng, list) and len(rng) == 3):
            raise ConfigError(f"config.experiment.{key}: expected [min, max, count]")
        return (float(rng[0]), float(rng[1]), int(rng[2]))

    spec = GridSpec(a_range=_range("a_range"), b_range=_range("b_range"),
                    c=cfg.model["c"], x0=float(exp.get("x0", 0.5)),
                    horizon_cap=int(exp.get("horizon_cap", 100)),
                    dt=cfg.model.get("dt", 0.01))
    _progress(quiet, f"car-grid: {spec.a_range[2]}x{spec.b_range[2]} cells, "
                     f"c={spec.c}, x0={spec.x0}")
    result = car_grid(spec)
    rows = []
    for i, a in enumerate(result.a_values):
        for j, b in enumerate(result.b_values):
            rows.append([_fmt(a), _fmt(b), str(int(result.values[i, j]))])
    out = f"{cfg.out_dir}/grid.csv"
    write_csv(out, ["a", "b", "feasible_steps"], rows)
    _progress(quiet, f"wrote {out}")
    if exp.get("svg"):
        _render_grid_svg(result, f"{cfg.out_dir}/grid.svg")
        _progress(quiet, f"wrote {cfg.out_dir}/grid.svg")
    return EXIT_OK


def _render_grid_svg(result, path: str) -> None:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise ConfigError(
            "svg output requires matplotlib (install extra 'plots')") from exc
    fig, ax = plt.subplots(figsize=(5, 4))
    mesh = ax.pcolormesh(result.b_values, result.a_values, result.values,
                         shading="nearest")
    fig.colorbar(mesh, ax=ax, label="feasible steps")
    ax.set_xlabel("upper-barrier rate b")
    ax.set_ylabel("lower-barrier rate a")
    ax.set_title(f"time to infeasibility (c={result.spec.c})")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def cmd_car_rfggd(cfg: RunConfig, quiet: bool = False) -> int:
    exp = cfg.experiment
    _check_keys(exp, {"kind", "x0", "horizon_cap", "theta_inits",
                      "case1_steps"}, "config.experiment")
    if exp.get("kind") != "car-rfggd":
        raise ConfigError("config.experiment.kind: expected 'car-rfggd'")
    if cfg.model["kind"] != "car":
        raise ConfigError("car-rfggd requires config.model.kind = 'car'")
    raw_inits = _require(exp, "theta_inits", "config.experiment")
    if not (isinstance(raw_inits, list) and raw_inits):
        raise ConfigError("config.experiment.theta_inits: expected a nonempty list")
    inits = []
    for idx, pair in enumerate(raw_inits):
        if not (isinstance(pair, list) and len(pair) == 2):
            raise ConfigError(
                f"config.experiment.theta_inits[{idx}]: expected [a, b]")
        inits.append(ParamVector(cbf_rates=np.array([float(pair[0]),
                                                     float(pair[1])])))
    x0 = float(exp.get("x0", 0.5))
    cap = int(exp.get("horizon_cap", 100))
    _progress(quiet, f"car-rfggd: {len(inits)} inits, x0={x0}, cap={cap}")
    studies = car_rfggd_study(x0, cfg.model["c"], inits, cfg.rfggd,
                              dt=cfg.model.get("dt", 0.01), horizon_cap=cap,
                              case1_steps=int(exp.get("case1_steps", 3)))
    it_rows, feas_rows = [], []
    for sid, study in enumerate(studies):
        for k, (theta, feas, phase) in enumerate(
                zip(study.thetas, study.feasibility, study.phases)):
            arr = theta.to_array()
            it_rows.append([str(sid), str(k), phase] + [_fmt(v) for v in arr])
            feas_rows.append([str(sid), str(k), str(int(feas))])
    write_csv(f"{cfg.out_dir}/iterates.csv",
              ["init_id", "iteration", "phase", "a", "b"], it_rows)
    write_csv(f"{cfg.out_dir}/feasibility.csv",
              ["init_id", "iteration", "feasible_steps"], feas_rows)
    _progress(quiet, f"wrote {cfg.out_dir}/iterates.csv, feasibility.csv")
    if any(study.stalled for study in studies):
        _progress(quiet, "warning: at least one init stalled before the cap")
        return EXIT_STALLED
    return EXIT_OK


def _online_rows(run: OnlineResult) -> list:
    rows = []
    n_steps = run.inputs.shape[0]
    for k in range(n_steps):
        rows.append(
            [_fmt(run.times[k])]
            + [_fmt(v) for v in run.states[k]]
            + [_fmt(v) for v in run.inputs[k]]
            + [_fmt(v) for v in run.barrier_values[k]]
            + [_fmt(v) for v in run.theta_history[k]]
            + [_fmt(run.horizon_objectives[k]),
               str(int(run.feasible_steps_history[k])),
               run.annotations[k]])
    return rows


def cmd_follow(cfg: RunConfig, quiet: bool = False) -> int:
    exp = cfg.experiment
    _check_keys(exp, {"kind", "sim_steps", "theta0", "x0"},
                "config.experiment")
    if exp.get("kind") != "follow":
        raise ConfigError("config.experiment.kind: expected 'follow'")
    if cfg.model["kind"] != "unicycle":
        raise ConfigError("follow requires config.model.kind = 'unicycle'")
    sim_steps = _as_int(_require(exp, "sim_steps", "config.experiment"),
                        "config.experiment.sim_steps")
    theta_raw = _require(exp, "theta0", "config.experiment")
    if not (isinstance(theta_raw, dict) and "clf_rate" in theta_raw
            and "cbf_rates" in theta_raw):
        raise ConfigError(
            "config.experiment.theta0: expected {clf_rate, cbf_rates[, nominal_input]}")
    _check_keys(theta_raw, {"clf_rate", "cbf_rates", "nominal_input"},
                "config.experiment.theta0")
    rates = theta_raw["cbf_rates"]
    if not (isinstance(rates, list) and len(rates) == 3):
        raise ConfigError("config.experiment.theta0.cbf_rates: expected 3 rates")
    theta0 = ParamVector(
        cbf_rates=np.array([float(v) for v in rates]),
        clf_rate=float(theta_raw["clf_rate"]),
        nominal_input=None if theta_raw.get("nominal_input") is None
        else np.array([float(v) for v in theta_raw["nominal_input"]]))
    model = build_model(cfg.model)
    x0 = None
    if "x0" in exp:
        raw_x0 = exp["x0"]
        if not (isinstance(raw_x0, list) and len(raw_x0) == model.n_x):
            raise ConfigError(f"config.experiment.x0: expected {model.n_x} numbers")
        x0 = np.array([float(v) for v in raw_x0])
    _progress(quiet, f"follow: {sim_steps} steps, lookahead {cfg.rfggd.lookahead}")
    report = follower_study(model, theta0, sim_steps, cfg.rfggd, x0=x0)

    header = (["t", "x", "y", "psi", "v", "omega", "h_near", "h_far",
               "h_view", "clf_rate", "rate1", "rate2", "rate3",
               "horizon_objective", "feasible_steps", "annotation"])
    write_csv(f"{cfg.out_dir}/adaptive.csv", header,
              _online_rows(report.adaptive))
    write_csv(f"{cfg.out_dir}/baseline.csv", header,
              _online_rows(report.baseline))
    reward_rows = [
        [_fmt(report.adaptive.times[k]),
         _fmt(report.adaptive.horizon_objectives[k]),
         _fmt(report.baseline.horizon_objectives[k])]
        for k in range(report.adaptive.inputs.shape[0])]
    reward_rows.append(["total", _fmt(report.total_adaptive),
                        _fmt(report.total_baseline)])
    write_csv(f"{cfg.out_dir}/rewards.csv",
              ["t", "adaptive_J", "baseline_J"], reward_rows)
    _progress(quiet, f"wrote {cfg.out_dir}/adaptive.csv, baseline.csv, rewards.csv; "
                     f"total J adaptive={report.total_adaptive:.4f} "
                     f"baseline={report.total_baseline:.4f}")
    return EXIT_OK


def main(argv: list | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="cbftune",
        description="Feasibility-guided tuning studies for QP safety controllers")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("car-grid", "feasible-steps grid over rate pairs"),
                            ("car-rfggd", "iterate paths from parameter inits"),
                            ("follow", "adaptive vs. frozen leader-follower run")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--out", help="override config out_dir")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--quiet", action="store_true", help="suppress progress")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
        if args.out is not None:
            cfg.out_dir = args.out
        if args.seed is not None:
            cfg.seed = args.seed
        np.random.seed(cfg.seed % (2 ** 32))
        handler = {"car-grid": cmd_car_grid, "car-rfggd": cmd_car_rfggd,
                   "follow": cmd_follow}[args.command]
        return handler(cfg, quiet=args.quiet)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailureError, SingularKktError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
