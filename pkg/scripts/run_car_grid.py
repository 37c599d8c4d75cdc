#!/usr/bin/env python3
"""Sweep both decay rates of the car controller and map time-to-infeasibility.

Writes grid.csv per leader speed and, with --plot, an SVG heat map.
"""

import argparse
import os
import sys

import numpy as np

from cbftune.experiments import GridSpec, car_grid
from cbftune.rollout import write_csv


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--c", type=float, nargs="+", default=[0.3, 0.7],
                    help="leader speeds to sweep")
    ap.add_argument("--cells", type=int, default=50, help="grid cells per axis")
    ap.add_argument("--x0", type=float, default=0.5)
    ap.add_argument("--horizon", type=int, default=100)
    ap.add_argument("--dt", type=float, default=0.01)
    ap.add_argument("--out", default="out/grids")
    ap.add_argument("--plot", action="store_true", help="also write SVG maps")
    args = ap.parse_args()

    for c in args.c:
        spec = GridSpec(a_range=(1e-3, 5.0, args.cells),
                        b_range=(1e-3, 5.0, args.cells),
                        c=c, x0=args.x0, horizon_cap=args.horizon, dt=args.dt)
        res = car_grid(spec)
        rows = [[repr(float(a)), repr(float(b)), str(int(res.values[i, j]))]
                for i, a in enumerate(res.a_values)
                for j, b in enumerate(res.b_values)]
        path = os.path.join(args.out, f"grid_c{c:g}.csv")
        write_csv(path, ["a", "b", "feasible_steps"], rows)
        vals = res.values
        print(f"c={c:g}: wrote {path}; zero-cells={int((vals == 0).sum())} "
              f"full-cells={int((vals == spec.horizon_cap).sum())}")
        if args.plot:
            import matplotlib
            matplotlib.use("Agg")
            import matplotlib.pyplot as plt

            fig, ax = plt.subplots(figsize=(5, 4))
            mesh = ax.pcolormesh(res.b_values, res.a_values, vals,
                                 shading="nearest")
            fig.colorbar(mesh, ax=ax, label="feasible steps")
            ax.set_xlabel("upper-barrier rate b")
            ax.set_ylabel("lower-barrier rate a")
            ax.set_title(f"time to infeasibility (c={c:g})")
            fig.tight_layout()
            svg = os.path.join(args.out, f"grid_c{c:g}.svg")
            fig.savefig(svg, format="svg")
            plt.close(fig)
            print(f"  plot: {svg}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
