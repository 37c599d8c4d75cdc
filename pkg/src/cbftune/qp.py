"""Dense convex QP solving for small controller subproblems.

Problems are stated as

    minimize   0.5 * z' H z + f' z
    subject to G z >= w

so each constraint carries a nonnegative "margin" G_i z - w_i at a feasible
point.  That margin convention is load-bearing: the rest of the package reads
margins, multipliers and active sets straight off :class:`QpSolution`.

The solver is a primal active-set method.  Problems here are tiny (a handful
of variables, at most a few dozen rows), active sets are needed as first-class
outputs for sensitivity analysis, and warm logic beats generality, which is
why this is hand-rolled rather than delegated to a general-purpose NLP code.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

# Margin >= -FEAS_TOL counts as satisfied; fixed absolute tolerance.
FEAS_TOL = 1e-8
# |margin| <= ACTIVE_TOL marks a row as candidate-active in reporting.
ACTIVE_TOL = 1e-7
# Multipliers above DUAL_TOL count as engaged.
DUAL_TOL = 1e-7
# Positive-definite floor added to H inside the iteration.
RIDGE = 1e-9

_MAX_FACE_ITERS = 200


class QpStatus(Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    NUMERICAL_FAILURE = "numerical_failure"


class NumericalFailureError(RuntimeError):
    """An internal solve could not certify its result."""


@dataclass(frozen=True)
class QpProblem:
    """Dense convex QP data.  H symmetric PSD, rows of G paired with w."""

    H: np.ndarray
    f: np.ndarray
    G: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "H", np.atleast_2d(np.asarray(self.H, dtype=float)))
        object.__setattr__(self, "f", np.atleast_1d(np.asarray(self.f, dtype=float)))
        G = np.asarray(self.G, dtype=float)
        if G.size == 0:
            G = G.reshape(0, self.f.shape[0])
        object.__setattr__(self, "G", np.atleast_2d(G))
        object.__setattr__(self, "w", np.asarray(self.w, dtype=float).reshape(-1))
        n = self.f.shape[0]
        if self.H.shape != (n, n):
            raise ValueError(f"H shape {self.H.shape} incompatible with f of length {n}")
        if self.G.shape[1] != n:
            raise ValueError(f"G has {self.G.shape[1]} columns, expected {n}")
        if self.w.shape[0] != self.G.shape[0]:
            raise ValueError(f"w length {self.w.shape[0]} != number of rows {self.G.shape[0]}")

    @property
    def n_vars(self) -> int:
        return self.f.shape[0]

    @property
    def n_rows(self) -> int:
        return self.w.shape[0]

    def validate(self) -> None:
        """Check symmetry, PSD-ness and finiteness; raise ValueError if bad."""
        for name in ("H", "f", "G", "w"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite entries")
        if np.max(np.abs(self.H - self.H.T), initial=0.0) > 1e-12:
            raise ValueError("H is not symmetric to 1e-12")
        # smallest eigenvalue of the symmetrized H must clear -1e-10
        evals = np.linalg.eigvalsh(0.5 * (self.H + self.H.T))
        if evals.size and evals[0] < -1e-10:
            raise ValueError(f"H has negative eigenvalue {evals[0]:.3e}")

    def margins(self, z: np.ndarray) -> np.ndarray:
        return self.G @ z - self.w

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ self.H @ z + self.f @ z)


@dataclass(frozen=True)
class QpSolution:
    """Solver output; duals and margins follow the G z >= w convention."""

    status: QpStatus
    z: np.ndarray
    duals: np.ndarray
    active_set: tuple
    objective: float

    @property
    def optimal(self) -> bool:
        return self.status is QpStatus.OPTIMAL


@dataclass(frozen=True)
class RelaxationReport:
    """Least-squares diagnosis of an infeasible (or feasible) problem.

    slacks minimize sum(s_i^2) subject to G z + s >= w, s >= 0.
    limiting_index is the row needing the largest slack, None when the
    problem was feasible as given.
    """

    slacks: np.ndarray
    limiting_index: int | None
    relaxed_solution: np.ndarray

    @property
    def feasible(self) -> bool:
        return self.limiting_index is None


def _min_violation(G: np.ndarray, w: np.ndarray, z0: np.ndarray | None = None):
    """Minimize 0.5*sum(max(0, w - G z)^2) over z.

    Gauss-Newton on the active face with an Armijo backstop.  The objective is
    convex piecewise quadratic, so the face iteration terminates; on the final
    face a single least-squares step lands on the exact minimizer, which keeps
    reported slacks free of regularization bias.

    Returns (z, violations) with violations = max(0, w - G z).
    """
    m, n = G.shape
    z = np.zeros(n) if z0 is None else z0.astype(float).copy()
    if m == 0:
        return z, np.zeros(0)
    for _ in range(_MAX_FACE_ITERS):
        r = w - G @ z
        act = r > 0.0
        if not act.any():
            break
        Ga = G[act]
        ra = r[act]
        grad = -Ga.T @ ra
        if np.linalg.norm(grad, np.inf) <= 1e-13 * (1.0 + np.linalg.norm(w, np.inf)):
            break
        d = np.linalg.lstsq(Ga, ra, rcond=None)[0]
        gtd = grad @ d
        if gtd >= 0.0:
            break  # no descent available: stationary up to rounding
        phi0 = 0.5 * float(ra @ ra)
        step = 1.0
        while step > 1e-12:
            rn = w - G @ (z + step * d)
            phin = 0.5 * float(np.sum(np.square(np.clip(rn, 0.0, None))))
            if phin <= phi0 + 1e-4 * step * gtd:
                break
            step *= 0.5
        z = z + step * d
    viol = np.clip(w - G @ z, 0.0, None)
    return z, viol


def _independent_subset(G: np.ndarray, rows: list) -> list:
    """Greedy prefix of `rows` whose G-rows stay linearly independent."""
    keep: list = []
    for i in rows:
        trial = G[keep + [i]]
        if np.linalg.matrix_rank(trial, tol=1e-10) == len(keep) + 1:
            keep.append(i)
        if len(keep) == G.shape[1]:
            break
    return keep


def _kkt_solve(H: np.ndarray, f: np.ndarray, G: np.ndarray, w: np.ndarray, W: list):
    """Solve the equality-constrained KKT system on working set W."""
    n = f.shape[0]
    k = len(W)
    K = np.zeros((n + k, n + k))
    K[:n, :n] = H
    if k:
        GW = G[W]
        K[:n, n:] = -GW.T
        K[n:, :n] = GW
    rhs = np.concatenate([-f, w[W] if k else np.zeros(0)])
    sol = np.linalg.solve(K, rhs)
    return sol[:n], sol[n:]


def _verify_kkt(p: QpProblem, z: np.ndarray, lam: np.ndarray, tol: float) -> bool:
    margins = p.margins(z)
    if margins.size and margins.min() < -FEAS_TOL:
        return False
    if lam.size and lam.min() < -1e-10:
        return False
    stat = p.H @ z + p.f - (p.G.T @ lam if lam.size else 0.0)
    if np.linalg.norm(stat, np.inf) > max(tol, 1e-6) * (1.0 + np.linalg.norm(p.f, np.inf)):
        return False
    if margins.size and np.max(np.abs(lam * margins)) > 1e-6:
        return False
    return True


def _solve_scalar(p: QpProblem, tol: float) -> QpSolution | None:
    """Closed-form path for one-dimensional problems: clip into an interval.

    Returns None whenever anything is unusual (non-positive curvature, an
    unsatisfiable zero row, an empty or pinched interval, a failed KKT
    check) so the general algorithm keeps sole authority over edge cases.
    """
    h = p.H[0, 0]
    if not h > 0.0:
        return None
    g = p.G[:, 0]
    w = p.w
    zero = g == 0.0
    if zero.any() and w[zero].max() > -FEAS_TOL:
        return None
    z_uc = -p.f[0] / h
    lo, hi = -np.inf, np.inf
    lo_idx = hi_idx = -1
    pos = np.nonzero(g > 0.0)[0]
    if pos.size:
        bounds = w[pos] / g[pos]
        k = int(np.argmax(bounds))
        lo, lo_idx = bounds[k], int(pos[k])
    neg = np.nonzero(g < 0.0)[0]
    if neg.size:
        bounds = w[neg] / g[neg]
        k = int(np.argmin(bounds))
        hi, hi_idx = bounds[k], int(neg[k])
    if not lo < hi:  # empty or single-point interval: let phase-1 decide
        return None
    z = min(max(z_uc, lo), hi)
    lam = np.zeros(p.n_rows)
    grad = h * z + p.f[0]
    if z > z_uc and lo_idx >= 0:
        lam[lo_idx] = grad / g[lo_idx]
    elif z < z_uc and hi_idx >= 0:
        lam[hi_idx] = grad / g[hi_idx]
    zv = np.array([z])
    if not _verify_kkt(p, zv, lam, tol):
        return None
    margins = p.margins(zv)
    active = tuple(i for i in range(p.n_rows)
                   if margins[i] <= ACTIVE_TOL and lam[i] > DUAL_TOL)
    return QpSolution(QpStatus.OPTIMAL, zv, lam, active, p.objective(zv))


def solve(p: QpProblem, tol: float = 1e-8) -> QpSolution:
    """Solve the QP; never returns a KKT-violating point as OPTIMAL.

    Infeasibility is decided by a phase-1 least-violation pass with the fixed
    margin tolerance -1e-8.  On success the final working set is re-solved
    against the unregularized H so reported (z, duals) satisfy stationarity
    to machine accuracy, not just to the ridge floor.
    """
    n, m = p.n_vars, p.n_rows
    if n == 1 and m > 0:
        fast = _solve_scalar(p, tol)
        if fast is not None:
            return fast
    H = 0.5 * (p.H + p.H.T)
    f, G, w = p.f, p.G, p.w
    Hr = H + RIDGE * np.eye(n)

    def _failure() -> QpSolution:
        return QpSolution(QpStatus.NUMERICAL_FAILURE, np.full(n, np.nan),
                          np.zeros(m), (), float("nan"))

    # Unconstrained minimizer doubles as phase-1 warm start.
    try:
        z_uc = np.linalg.solve(Hr, -f)
    except np.linalg.LinAlgError:
        return _failure()

    if m == 0:
        z, lam = z_uc, np.zeros(0)
        try:  # polish away the ridge when H itself is invertible
            z_pol = np.linalg.solve(H, -f)
            if np.all(np.isfinite(z_pol)):
                z = z_pol
        except np.linalg.LinAlgError:
            pass
        if not _verify_kkt(p, z, lam, tol):
            return _failure()
        return QpSolution(QpStatus.OPTIMAL, z, lam, (), p.objective(z))

    if p.margins(z_uc).min() >= 0.0:
        z0 = z_uc
    else:
        z0, viol = _min_violation(G, w, z_uc)
        if viol.size and viol.max() > FEAS_TOL:
            return QpSolution(QpStatus.INFEASIBLE, z0, np.zeros(m), (), float("nan"))

    near = [i for i in range(m) if G[i] @ z0 - w[i] <= 1e-9 * (1.0 + abs(w[i]))]
    W = _independent_subset(G, near)
    z = z0.copy()
    lam_W = np.zeros(len(W))

    max_iter = 50 * (m + 1)
    converged = False
    for _ in range(max_iter):
        try:
            z_eq, lam_W = _kkt_solve(Hr, f, G, w, W)
        except np.linalg.LinAlgError:
            return _failure()
        step = z_eq - z
        if np.linalg.norm(step, np.inf) <= 1e-12 * (1.0 + np.linalg.norm(z, np.inf)):
            if len(W) == 0 or lam_W.min() >= -1e-10:
                z = z_eq
                converged = True
                break
            W.pop(int(np.argmin(lam_W)))
            continue
        # ratio test against rows outside the working set
        alpha = 1.0
        block = -1
        in_W = np.zeros(m, dtype=bool)
        in_W[W] = True
        gp = G @ step
        marg = G @ z - w
        for i in range(m):
            if in_W[i] or gp[i] >= -1e-13:
                continue
            ai = max(0.0, marg[i] / (-gp[i]))
            if ai < alpha - 1e-15:
                alpha = ai
                block = i
        z = z + alpha * step
        if block >= 0:
            W.append(block)

    if not converged:
        return _failure()

    lam = np.zeros(m)
    lam[W] = lam_W

    # Polish: exact KKT on the final working set with the true H.
    try:
        z_pol, lamW_pol = _kkt_solve(H, f, G, w, W)
        lam_pol = np.zeros(m)
        lam_pol[W] = lamW_pol
        if _verify_kkt(p, z_pol, np.clip(lam_pol, 0.0, None), tol):
            z, lam = z_pol, lam_pol
        elif not _verify_kkt(p, z, np.clip(lam, 0.0, None), tol):
            return _failure()
    except np.linalg.LinAlgError:
        if not _verify_kkt(p, z, np.clip(lam, 0.0, None), tol):
            return _failure()

    lam = np.clip(lam, 0.0, None)
    margins = p.margins(z)
    active = tuple(i for i in range(m)
                   if margins[i] <= ACTIVE_TOL and lam[i] > DUAL_TOL)
    return QpSolution(QpStatus.OPTIMAL, z, lam, active, p.objective(z))


def min_relaxation(p: QpProblem) -> RelaxationReport:
    """Diagnose a problem by the smallest sum-of-squares slack relaxation.

    Ties for the limiting row (within 1e-9 of the max slack) break toward the
    smallest row index.  Raises NumericalFailureError if the inner iteration
    produced non-finite values.
    """
    z, viol = _min_violation(p.G, p.w)
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(viol))):
        raise NumericalFailureError("least-violation iteration diverged")
    if viol.size == 0 or viol.max() <= FEAS_TOL:
        return RelaxationReport(np.zeros(p.n_rows), None, z)
    smax = viol.max()
    limiting = int(np.flatnonzero(viol >= smax - 1e-9)[0])
    return RelaxationReport(viol, limiting, z)
