#!/usr/bin/env python3
"""Trace the parameter-update path from several infeasible car inits.

Each init runs the feasibility-extension loop until the horizon cap, then a
few reward-polish steps; prints the per-iteration history and writes
iterates.csv / feasibility.csv.
"""

import argparse
import os
import sys

import numpy as np

from cbftune.experiments import car_rfggd_study
from cbftune.plants import ParamVector
from cbftune.rollout import write_csv
from cbftune.updates import RfggdConfig


DEFAULT_INITS = [(0.002, 0.004), (0.001, 0.001), (0.005, 0.002),
                 (0.02, 0.001), (0.001, 0.02)]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--c", type=float, default=0.3)
    ap.add_argument("--x0", type=float, default=0.5)
    ap.add_argument("--dt", type=float, default=0.01)
    ap.add_argument("--horizon", type=int, default=100)
    ap.add_argument("--polish-steps", type=int, default=3)
    ap.add_argument("--out", default="out/iterates")
    args = ap.parse_args()

    inits = [ParamVector(cbf_rates=np.array(pair)) for pair in DEFAULT_INITS]
    studies = car_rfggd_study(args.x0, args.c, inits, RfggdConfig(),
                              dt=args.dt, horizon_cap=args.horizon,
                              case1_steps=args.polish_steps)
    it_rows, feas_rows = [], []
    for sid, st in enumerate(studies):
        hist = st.feasibility
        print(f"init {DEFAULT_INITS[sid]}: feasible steps "
              f"{hist[0]} -> {hist[-1]} in {len(hist) - 1} iterations"
              f"{' (stalled)' if st.stalled else ''}")
        for k, (theta, feas, phase) in enumerate(
                zip(st.thetas, st.feasibility, st.phases)):
            arr = theta.to_array()
            it_rows.append([str(sid), str(k), phase]
                           + [repr(float(v)) for v in arr])
            feas_rows.append([str(sid), str(k), str(int(feas))])
    write_csv(os.path.join(args.out, "iterates.csv"),
              ["init_id", "iteration", "phase", "a", "b"], it_rows)
    write_csv(os.path.join(args.out, "feasibility.csv"),
              ["init_id", "iteration", "feasible_steps"], feas_rows)
    print(f"wrote {args.out}/iterates.csv and feasibility.csv")
    return 0


if __name__ == "__main__":
    sys.exit(main())
