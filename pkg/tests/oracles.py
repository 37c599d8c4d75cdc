"""Independent reference implementations used to check the library.

Nothing here imports from cbftune: the enumeration solver, the closed-form
car simulator, and the finite-difference helpers are deliberately written
from scratch so agreement with the package is meaningful evidence.
"""

from __future__ import annotations

import itertools

import numpy as np

MARGIN_TOL = 1e-9
DUAL_TOL = 1e-9


def enumerate_qp(H, f, G, w):
    """Brute-force a convex inequality QP by trying every candidate active set.

    min ½ zᵀHz + fᵀz  s.t.  Gz ≥ w.   For each subset A with |A| ≤ n and
    independent rows, solve the equality-constrained KKT system; keep
    candidates whose duals are nonnegative and whose full margin vector is
    feasible; return the feasible candidate with the lowest objective.
    Returns (z, objective, active_set) or None when infeasible.
    """
    H = np.asarray(H, dtype=float)
    f = np.asarray(f, dtype=float)
    G = np.asarray(G, dtype=float).reshape(-1, H.shape[0])
    w = np.asarray(w, dtype=float).ravel()
    n = H.shape[0]
    m = G.shape[0]
    best = None
    for size in range(min(n, m) + 1):
        for subset in itertools.combinations(range(m), size):
            GA = G[list(subset)]
            if size and np.linalg.matrix_rank(GA, tol=1e-10) < size:
                continue
            K = np.zeros((n + size, n + size))
            K[:n, :n] = H
            if size:
                K[:n, n:] = -GA.T
                K[n:, :n] = GA
            rhs = np.concatenate([-f, w[list(subset)]])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            z, lam = sol[:n], sol[n:]
            if size and lam.min() < -DUAL_TOL:
                continue
            if m and (G @ z - w).min() < -MARGIN_TOL:
                continue
            obj = 0.5 * z @ H @ z + f @ z
            if best is None or obj < best[1] - 1e-12:
                best = (z, obj, subset)
    return best


def feasible_by_lp(G, w, n_samples=0):
    """Crude feasibility check: does any z satisfy Gz ≥ w?

    Uses scipy linprog (independent of the library under test).
    """
    from scipy.optimize import linprog

    G = np.asarray(G, dtype=float)
    w = np.asarray(w, dtype=float).ravel()
    m, n = G.shape
    # min t  s.t.  Gz + t·1 ≥ w, t ≥ 0:  feasible iff optimal t ≈ 0
    c = np.zeros(n + 1)
    c[-1] = 1.0
    A_ub = np.hstack([-G, -np.ones((m, 1))])
    res = linprog(c, A_ub=A_ub, b_ub=-w,
                  bounds=[(None, None)] * n + [(0, None)],
                  method="highs")
    assert res.success, res.message
    return res.x[-1] <= 1e-7


# --- closed-form single-integrator car -------------------------------------

def car_interval(t, x, a, b, c, dt):
    """Admissible input interval [L, U] for the two-barrier car QP."""
    h1 = x - t
    h2 = 1.0 + c * t - x
    L = 1.0 - a * h1 / dt
    U = c + b * h2 / dt
    return L, U, h1, h2


def car_simulate(x0, a, b, c, dt, horizon, u_nominal=0.0):
    """Re-derive the car rollout from scratch: clip nominal into [L, U].

    Returns (states, inputs, n_feasible) where n_feasible counts steps whose
    interval was nonempty (simulation stops at the first empty interval).
    """
    x = float(x0)
    states = [x]
    inputs = []
    for k in range(horizon):
        t = k * dt
        L, U, _, _ = car_interval(t, x, a, b, c, dt)
        if L > U + 1e-9:
            return np.array(states), np.array(inputs), k
        u = min(max(u_nominal, L), U)
        inputs.append(u)
        x = x + dt * u
        states.append(x)
    return np.array(states), np.array(inputs), horizon


def car_objective(inputs):
    return -np.sum(np.asarray(inputs) ** 2)


# --- finite differences -----------------------------------------------------

def central_diff(fun, x, h=1e-6):
    """Central finite-difference Jacobian of fun: R^n -> R^k, columns d/dx_i."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(fun(x), dtype=float)
    out = np.zeros(f0.shape + (x.size,))
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = h
        out[..., i] = (np.asarray(fun(x + step)) - np.asarray(fun(x - step))) / (2 * h)
    return out


def random_convex_qp(rng, n, m, strict=0.1):
    """Random strictly convex QP with H = MᵀM + strict·I."""
    M = rng.standard_normal((n, n))
    H = M.T @ M + strict * np.eye(n)
    f = rng.standard_normal(n)
    G = rng.standard_normal((m, n))
    w = rng.standard_normal(m)
    return H, f, G, w
