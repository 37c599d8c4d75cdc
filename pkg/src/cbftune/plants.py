"""Plant models and assembly of the per-step control QP.

A plant supplies a discrete-time control-affine step x+ = f(t,x) + g(t,x) u,
barrier functions h_i(t, x) that must not decay faster than their class-K
rate allows, an optional Lyapunov-style tracking function V(t, x), and a
stage reward.  `build_qp` linearizes these about the current state into rows
of a small QP over z = (u, slack):

    barrier row i:  h_i + grad_h_i'(f + g u - x) + dt * dh_i/dt - (1 - rate_i) h_i >= 0
    tracking row:   -(V + grad_V'(f + g u - x)) + (1 - rate_0) V + slack >= 0

with cost (u - u_nom)' P (u - u_nom) + slack_weight * slack^2.  Margins of
these rows, their multipliers and their parameter gradients are what the
rollout and update layers consume.
"""

from __future__ import annotations

import abc
import math
from dataclasses import dataclass

import numpy as np

from .qp import QpProblem
from .qp_diff import DataGradients

# Relative step for the finite-difference state-gradients of the QP rows.
# Rows are affine in x for the car (central differences exact); for the
# unicycle the O(h^2) truncation sits far below the downstream tolerances.
_FD_STEP = 1e-4


@dataclass(frozen=True)
class ParamVector:
    """Adaptable controller parameters.

    cbf_rates holds one decay rate per barrier; clf_rate is present exactly
    when the plant has a tracking function; nominal_input is an optional
    preferred control.  The flat layout used for gradients and updates is
    [clf_rate?, cbf_rates..., nominal_input...].
    """

    cbf_rates: np.ndarray
    clf_rate: float | None = None
    nominal_input: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "cbf_rates",
                           np.asarray(self.cbf_rates, dtype=float).reshape(-1))
        if self.nominal_input is not None:
            object.__setattr__(self, "nominal_input",
                               np.asarray(self.nominal_input, dtype=float).reshape(-1))

    @property
    def dim(self) -> int:
        d = self.cbf_rates.shape[0]
        if self.clf_rate is not None:
            d += 1
        if self.nominal_input is not None:
            d += self.nominal_input.shape[0]
        return d

    @property
    def n_rates(self) -> int:
        return self.cbf_rates.shape[0] + (0 if self.clf_rate is None else 1)

    def to_array(self) -> np.ndarray:
        parts = []
        if self.clf_rate is not None:
            parts.append(np.array([self.clf_rate]))
        parts.append(self.cbf_rates)
        if self.nominal_input is not None:
            parts.append(self.nominal_input)
        return np.concatenate(parts)

    def with_array(self, arr: np.ndarray) -> "ParamVector":
        """Rebuild a ParamVector with this structure from a flat array."""
        arr = np.asarray(arr, dtype=float).reshape(-1)
        if arr.shape[0] != self.dim:
            raise ValueError(f"expected {self.dim} entries, got {arr.shape[0]}")
        k = 0
        clf = None
        if self.clf_rate is not None:
            clf = float(arr[0])
            k = 1
        nb = self.cbf_rates.shape[0]
        rates = arr[k:k + nb].copy()
        k += nb
        nom = arr[k:].copy() if self.nominal_input is not None else None
        return ParamVector(cbf_rates=rates, clf_rate=clf, nominal_input=nom)

    def clipped(self, rate_min: float, rate_max: float) -> "ParamVector":
        """Clip all rates into [rate_min, rate_max]; nominal input untouched."""
        clf = None if self.clf_rate is None else float(
            min(max(self.clf_rate, rate_min), rate_max))
        return ParamVector(cbf_rates=np.clip(self.cbf_rates, rate_min, rate_max),
                           clf_rate=clf,
                           nominal_input=None if self.nominal_input is None
                           else self.nominal_input.copy())


class PlantModel(abc.ABC):
    """Discrete-time control-affine plant with barriers and a stage reward."""

    n_x: int
    n_u: int
    n_barriers: int
    dt: float
    has_lyapunov: bool = False

    @abc.abstractmethod
    def dynamics(self, t: float, x: np.ndarray):
        """Return (f, g) with x+ = f + g @ u; f: (n_x,), g: (n_x, n_u)."""

    def step(self, t: float, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        f, g = self.dynamics(t, x)
        return f + g @ u

    @abc.abstractmethod
    def step_jacobians(self, t: float, x: np.ndarray, u: np.ndarray):
        """Return (A, B) = (d x+/dx, d x+/du), both analytic."""

    @abc.abstractmethod
    def barrier(self, i: int, t: float, x: np.ndarray):
        """Return (value, d/dx, d/dt) of barrier i at (t, x)."""

    def lyapunov(self, t: float, x: np.ndarray):
        """Return (value, d/dx); only for plants with has_lyapunov."""
        raise NotImplementedError("plant has no tracking function")

    @abc.abstractmethod
    def reward(self, t: float, x: np.ndarray, u: np.ndarray):
        """Return (value, d/dx, d/du) of the stage reward at (t, x, u)."""

    @abc.abstractmethod
    def qp_weights(self):
        """Return (P, slack_weight): control cost matrix and slack penalty."""

    def check_theta(self, theta: ParamVector) -> None:
        if theta.cbf_rates.shape[0] != self.n_barriers:
            raise ValueError(
                f"theta has {theta.cbf_rates.shape[0]} barrier rates, "
                f"plant has {self.n_barriers} barriers")
        if (theta.clf_rate is not None) != self.has_lyapunov:
            raise ValueError("clf_rate presence must match plant's tracking function")
        if theta.nominal_input is not None and \
                theta.nominal_input.shape[0] != self.n_u:
            raise ValueError("nominal_input length must equal n_u")


class CarModel(PlantModel):
    """Double-boundary car on a line: x+ = x + dt * u.

    The safe region x in [t, 1 + c*t] shrinks at rate (1 - c) per unit time,
    so persistent feasibility eventually fails for any rates; how long it
    survives is exactly what the grid experiment maps out.
    """

    n_x = 1
    n_u = 1
    n_barriers = 2
    has_lyapunov = False

    def __init__(self, c: float, dt: float = 0.01):
        if not c < 1.0:
            raise ValueError(f"shrink ratio c must be < 1, got {c}")
        if not dt > 0.0:
            raise ValueError(f"dt must be positive, got {dt}")
        self.c = float(c)
        self.dt = float(dt)

    def dynamics(self, t, x):
        return x.astype(float).copy(), np.array([[self.dt]])

    def step_jacobians(self, t, x, u):
        return np.array([[1.0]]), np.array([[self.dt]])

    def barrier(self, i, t, x):
        if i == 0:  # stay ahead of the advancing lower edge
            return float(x[0] - t), np.array([1.0]), -1.0
        if i == 1:  # stay below the slower upper edge
            return float(1.0 + self.c * t - x[0]), np.array([-1.0]), self.c
        raise IndexError(f"car has 2 barriers, got index {i}")

    def reward(self, t, x, u):
        return -float(u[0]) ** 2, np.zeros(1), np.array([-2.0 * u[0]])

    def qp_weights(self):
        return np.eye(1), 10.0


def leader_trajectory(t: float, origin=(0.0, 0.0)):
    """Leader position/velocity: unit forward speed, fast vertical weave.

    velocity = (1, 12 sin(4 pi t)), integrated in closed form from `origin`.
    """
    w = 4.0 * math.pi
    pos = np.array([origin[0] + t, origin[1] + (12.0 / w) * (1.0 - math.cos(w * t))])
    vel = np.array([1.0, 12.0 * math.sin(w * t)])
    return pos, vel


class UnicycleModel(PlantModel):
    """Unicycle follower keeping a moving leader in an annulus and view cone.

    State (x, y, psi), inputs (v, omega), Euler step with the plant's dt.
    Barriers: squared-range above s_min, squared-range below s_max, and
    cosine-of-view-angle above cos(gamma).  Tracking function
    V = (range - s_d)^2 pulls toward the preferred standoff distance.
    """

    n_x = 3
    n_u = 2
    n_barriers = 3
    has_lyapunov = True

    def __init__(self, s_min: float = 0.3, s_max: float = 2.0,
                 gamma: float = math.radians(30.0), s_d: float = 0.7,
                 dt: float = 0.02, leader=None, leader_origin=(0.7, 0.0),
                 slack_weight: float = 10.0):
        if not 0.0 < s_min < s_d < s_max:
            raise ValueError(f"need 0 < s_min < s_d < s_max, got "
                             f"{s_min}, {s_d}, {s_max}")
        if not 0.0 < gamma < 0.5 * math.pi:
            raise ValueError(f"view half-angle must lie in (0, pi/2), got {gamma}")
        if not dt > 0.0:
            raise ValueError(f"dt must be positive, got {dt}")
        self.s_min = float(s_min)
        self.s_max = float(s_max)
        self.gamma = float(gamma)
        self.s_d = float(s_d)
        self.dt = float(dt)
        if leader is None:
            origin = tuple(leader_origin)
            leader = lambda t: leader_trajectory(t, origin)  # noqa: E731
        self.leader = leader
        self.slack_weight = float(slack_weight)

    def _rel(self, t, x):
        """Relative leader offset r, its norm s, and leader velocity."""
        pos, vel = self.leader(t)
        r = pos - x[:2]
        s2 = float(r @ r)
        if s2 < 1e-18:
            raise ValueError("leader coincides with follower; bearing undefined")
        return r, s2, vel

    def dynamics(self, t, x):
        psi = x[2]
        g = self.dt * np.array([[math.cos(psi), 0.0],
                                [math.sin(psi), 0.0],
                                [0.0, 1.0]])
        return x.astype(float).copy(), g

    def step_jacobians(self, t, x, u):
        psi = x[2]
        v = u[0]
        A = np.eye(3)
        A[0, 2] = -self.dt * v * math.sin(psi)
        A[1, 2] = self.dt * v * math.cos(psi)
        B = self.dt * np.array([[math.cos(psi), 0.0],
                                [math.sin(psi), 0.0],
                                [0.0, 1.0]])
        return A, B

    def barrier(self, i, t, x):
        r, s2, vel = self._rel(t, x)
        if i == 0:
            grad = np.array([-2.0 * r[0], -2.0 * r[1], 0.0])
            return s2 - self.s_min ** 2, grad, 2.0 * float(r @ vel)
        if i == 1:
            grad = np.array([2.0 * r[0], 2.0 * r[1], 0.0])
            return self.s_max ** 2 - s2, grad, -2.0 * float(r @ vel)
        if i == 2:
            s = math.sqrt(s2)
            b = r / s
            e = np.array([math.cos(x[2]), math.sin(x[2])])
            proj = np.eye(2) - np.outer(b, b)
            grad = np.empty(3)
            grad[:2] = -(proj @ e) / s
            grad[2] = -math.sin(x[2]) * b[0] + math.cos(x[2]) * b[1]
            return float(e @ b) - math.cos(self.gamma), grad, float(e @ proj @ vel) / s
        raise IndexError(f"unicycle has 3 barriers, got index {i}")

    def lyapunov(self, t, x):
        r, s2, _ = self._rel(t, x)
        s = math.sqrt(s2)
        grad = np.zeros(3)
        grad[:2] = -2.0 * (s - self.s_d) * (r / s)
        return (s - self.s_d) ** 2, grad

    def reward(self, t, x, u, kappa: float = 10.0):
        """Smooth minimum of the three barrier values (soft worst-case margin)."""
        vals = np.empty(3)
        grads = np.empty((3, 3))
        for i in range(3):
            vals[i], grads[i], _ = self.barrier(i, t, x)
        mn = vals.min()
        expo = np.exp(-kappa * (vals - mn))
        total = expo.sum()
        value = mn - math.log(total) / kappa
        weights = expo / total
        return float(value), weights @ grads, np.zeros(2)

    def qp_weights(self):
        return np.eye(2), self.slack_weight


def build_qp(model: PlantModel, t: float, x: np.ndarray, theta: ParamVector,
             with_gradients: bool = True):
    """Assemble the per-step QP and (optionally) its structural gradients.

    Returns (QpProblem, StructuralGradients | None).  Gradients w.r.t. x are
    central finite differences of the assembled rows (the model interface
    only carries first derivatives); gradients w.r.t. theta are analytic.
    """
    model.check_theta(theta)
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != model.n_x:
        raise ValueError(f"state has length {x.shape[0]}, plant expects {model.n_x}")
    n_u = model.n_u
    n = n_u + (1 if model.has_lyapunov else 0)
    m = model.n_barriers + (1 if model.has_lyapunov else 0)

    P, slack_weight = model.qp_weights()
    u_nom = theta.nominal_input if theta.nominal_input is not None \
        else np.zeros(n_u)
    H = np.zeros((n, n))
    H[:n_u, :n_u] = 2.0 * P
    if model.has_lyapunov:
        H[n_u, n_u] = 2.0 * slack_weight
    f = np.zeros(n)
    f[:n_u] = -2.0 * (P @ u_nom)

    G, w, h_vals, V_val = _assemble_rows(model, t, x, theta, n, m)
    prob = QpProblem(H=H, f=f, G=G, w=w)
    if not with_gradients:
        return prob, None

    # --- theta gradients (analytic) ---------------------------------------
    n_th = theta.dim
    df_dth = np.zeros((n_th, n))
    dG_dth = np.zeros((n_th, m, n))
    dw_dth = np.zeros((n_th, m))
    k = 0
    if theta.clf_rate is not None:
        dw_dth[0, m - 1] = V_val  # tracking row: w = grad_V'(f-x) + rate*V
        k = 1
    for i in range(model.n_barriers):
        dw_dth[k + i, i] = -h_vals[i]  # barrier row i: dw/drate_i = -h_i
    k += model.n_barriers
    if theta.nominal_input is not None:
        for j in range(n_u):
            df_dth[k + j, :n_u] = -2.0 * P[:, j]

    # --- state gradients (central differences of the rows) ----------------
    n_x = model.n_x
    df_dx = np.zeros((n_x, n))  # f never depends on x
    dG_dx = np.zeros((n_x, m, n))
    dw_dx = np.zeros((n_x, m))
    for kx in range(n_x):
        h = _FD_STEP * (1.0 + abs(x[kx]))
        xp = x.copy()
        xp[kx] += h
        xm = x.copy()
        xm[kx] -= h
        Gp, wp, _, _ = _assemble_rows(model, t, xp, theta, n, m)
        Gm, wm, _, _ = _assemble_rows(model, t, xm, theta, n, m)
        dG_dx[kx] = (Gp - Gm) / (2.0 * h)
        dw_dx[kx] = (wp - wm) / (2.0 * h)

    sg = StructuralGradients(
        n_u=n_u,
        x=DataGradients(df=df_dx, dG=dG_dx, dw=dw_dx),
        theta=DataGradients(df=df_dth, dG=dG_dth, dw=dw_dth),
    )
    return prob, sg


def _assemble_rows(model: PlantModel, t: float, x: np.ndarray,
                   theta: ParamVector, n: int, m: int):
    """Rows (G, w) of the step QP at (t, x); also the raw h and V values."""
    fd, gd = model.dynamics(t, x)
    drift = fd - x  # state advance at u = 0
    G = np.zeros((m, n))
    w = np.zeros(m)
    h_vals = np.zeros(model.n_barriers)
    n_u = model.n_u
    for i in range(model.n_barriers):
        h, dh_dx, dh_dt = model.barrier(i, t, x)
        h_vals[i] = h
        rate = theta.cbf_rates[i]
        G[i, :n_u] = dh_dx @ gd
        # margin: h + dh'(f + g u - x) + dt*dh_dt - (1-rate) h >= 0
        w[i] = -(rate * h + dh_dx @ drift + model.dt * dh_dt)
    V_val = 0.0
    if model.has_lyapunov:
        V, dV_dx = model.lyapunov(t, x)
        V_val = V
        G[m - 1, :n_u] = -(dV_dx @ gd)
        G[m - 1, n_u] = 1.0
        # margin: -(V + dV'(f + g u - x)) + (1-rate0) V + slack >= 0
        w[m - 1] = dV_dx @ drift + theta.clf_rate * V
    return G, w, h_vals, V_val


@dataclass
class StructuralGradients:
    """Gradients of the assembled QP data w.r.t. state and parameters.

    x.df/dG/dw index state components; theta.* index the flat ParamVector
    layout.  n_u tells downstream code which z components are controls.
    """

    n_u: int
    x: DataGradients
    theta: DataGradients


def car_model(c: float, dt: float = 0.01) -> CarModel:
    return CarModel(c=c, dt=dt)


def unicycle_model(**kwargs) -> UnicycleModel:
    return UnicycleModel(**kwargs)
