"""Implicit differentiation of QP solutions through their KKT conditions.

At a non-degenerate optimum the strictly active rows stay active under small
data perturbations, so (z, lambda) respond linearly through the reduced KKT
system

    [ H   -G_A' ] [dz      ]   [ -dH z - df + dG_A' lam_A ]
    [ G_A   0   ] [dlam_A  ] = [ dw_A - dG_A z            ]

The system is factorized once per solution and reused for every right-hand
side (structural x- and theta-directions alike).  Rows whose margin and
multiplier both sit inside tolerance are degenerate: they get flagged and
treated as inactive, which picks one subgradient deterministically.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.linalg

from .qp import QpProblem, QpSolution, QpStatus

TOL_ACT = 1e-7
TOL_DUAL = 1e-7

_COND_LIMIT = 1e12


class SingularKktError(RuntimeError):
    """Active-constraint gradients are linearly dependent; no Jacobian."""


class DegeneracyFlag(Enum):
    STRICTLY_ACTIVE = "strictly_active"
    STRICTLY_INACTIVE = "strictly_inactive"
    DEGENERATE = "degenerate"


@dataclass
class DataGradients:
    """Derivatives of QP data along k directions.

    df: (k, n), dG: (k, m, n), dw: (k, m); dH omitted when identically zero.
    """

    df: np.ndarray
    dG: np.ndarray
    dw: np.ndarray
    dH: np.ndarray | None = None

    @property
    def n_dirs(self) -> int:
        return self.df.shape[0]


@dataclass
class SolutionJacobian:
    """Factorized sensitivity map of one QP solution.

    apply() sends data perturbations (dH, df, dG, dw) to (dz, dlam).  dlam of
    rows treated as inactive is exactly zero, and perturbing such rows leaves
    dz exactly zero as well.
    """

    z: np.ndarray
    duals: np.ndarray
    active: tuple
    flags: list
    _lu: tuple
    _n: int
    _m: int

    def _solve(self, rhs: np.ndarray) -> np.ndarray:
        return scipy.linalg.lu_solve(self._lu, rhs)

    def apply(self, dH=None, df=None, dG=None, dw=None):
        """Map one data perturbation to (dz, dlam)."""
        n, m = self._n, self._m
        A = list(self.active)
        top = np.zeros(n)
        bot = np.zeros(len(A))
        if dH is not None:
            dHs = 0.5 * (np.asarray(dH, float) + np.asarray(dH, float).T)
            top -= dHs @ self.z
        if df is not None:
            top -= np.asarray(df, float)
        if dG is not None:
            dG = np.asarray(dG, float)
            if A:
                top += dG[A].T @ self.duals[A]
                bot -= dG[A] @ self.z
        if dw is not None and A:
            bot += np.asarray(dw, float)[A]
        sol = self._solve(np.concatenate([top, bot]))
        dz = sol[:n]
        dlam = np.zeros(m)
        if A:
            dlam[A] = sol[n:]
        return dz, dlam

    def apply_many(self, grads: DataGradients) -> np.ndarray:
        """Batched apply over the k directions of a DataGradients; returns dz (n, k)."""
        n = self._n
        A = list(self.active)
        k = grads.n_dirs
        rhs = np.zeros((n + len(A), k))
        for j in range(k):
            top = -grads.df[j].copy()
            if grads.dH is not None:
                dHs = 0.5 * (grads.dH[j] + grads.dH[j].T)
                top -= dHs @ self.z
            bot = np.zeros(len(A))
            if A:
                top += grads.dG[j][A].T @ self.duals[A]
                bot = grads.dw[j][A] - grads.dG[j][A] @ self.z
            rhs[:n, j] = top
            rhs[n:, j] = bot
        sol = self._solve(rhs)
        return sol[:n]


def classify_rows(p: QpProblem, s: QpSolution,
                  tol_act: float = TOL_ACT, tol_dual: float = TOL_DUAL) -> list:
    """Flag each constraint row strictly active / inactive / degenerate."""
    margins = p.margins(s.z)
    flags = []
    for i in range(p.n_rows):
        if margins[i] > tol_act:
            flags.append(DegeneracyFlag.STRICTLY_INACTIVE)
        elif s.duals[i] > tol_dual:
            flags.append(DegeneracyFlag.STRICTLY_ACTIVE)
        else:
            flags.append(DegeneracyFlag.DEGENERATE)
    return flags


def solution_jacobian(p: QpProblem, s: QpSolution,
                      tol_act: float = TOL_ACT,
                      tol_dual: float = TOL_DUAL) -> SolutionJacobian:
    """Build the sensitivity map at an OPTIMAL solution.

    Degenerate rows are dropped from the active set (one-sided choice) and
    reported in .flags so callers can distrust the gradient there.  Raises
    SingularKktError when the reduced KKT matrix is singular even after a
    small ridge retry.
    """
    if s.status is not QpStatus.OPTIMAL:
        raise ValueError("solution_jacobian requires an OPTIMAL solution")
    n, m = p.n_vars, p.n_rows
    flags = classify_rows(p, s, tol_act, tol_dual)
    active = tuple(i for i, fl in enumerate(flags)
                   if fl is DegeneracyFlag.STRICTLY_ACTIVE)
    H = 0.5 * (p.H + p.H.T)
    a = len(active)
    K = np.zeros((n + a, n + a))
    K[:n, :n] = H
    if a:
        GA = p.G[list(active)]
        if np.linalg.matrix_rank(GA, tol=1e-10) < a:
            # dependent active rows: duals are non-unique, so the linear
            # system below has no meaningful answer — refuse rather than
            # let the ridge fabricate one
            raise SingularKktError(
                f"active rows {active} are linearly dependent")
        K[:n, n:] = -GA.T
        K[n:, :n] = GA
    for ridge in (0.0, 1e-9):
        Kr = K if ridge == 0.0 else K + ridge * np.eye(n + a)
        try:
            if np.linalg.cond(Kr) > _COND_LIMIT:
                continue
            lu = scipy.linalg.lu_factor(Kr)
            return SolutionJacobian(z=s.z, duals=s.duals, active=active,
                                    flags=flags, _lu=lu, _n=n, _m=m)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError):
            continue
    raise SingularKktError(
        f"reduced KKT system singular for active set {active}")


def chain_to_inputs(J: SolutionJacobian, d_data_dx: DataGradients,
                    d_data_dtheta: DataGradients, n_controls: int):
    """Chain QP-data gradients through J to control-component sensitivities.

    Returns (du_dx, du_dtheta) of shapes (n_controls, n_x) and
    (n_controls, n_theta); slack components of z are dropped.
    """
    if not 0 < n_controls <= J._n:
        raise ValueError(f"n_controls {n_controls} out of range for {J._n} variables")
    dz_dx = J.apply_many(d_data_dx)
    dz_dth = J.apply_many(d_data_dtheta)
    return dz_dx[:n_controls], dz_dth[:n_controls]
