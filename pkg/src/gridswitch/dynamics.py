"""Closed-loop integration of the switched swing equations.

The plant state is (delta, omega, s): center-of-inertia angles, per-unit
frequency deviations, and the controller's integral state.  The integral
state belongs to the plant side of the loop, so swapping controllers
mid-trajectory never resets it.  Forward Euler with dt <= 0.01 s is the
reference integrator; RK4 is available for convergence studies only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .controllers import Controller
from .errors import IntegrationError, ModelError
from .grid import DisturbanceProfile, GridModel, InertiaSchedule

MAX_DT = 0.01


@dataclass
class GridState:
    """Angles (rad, zero-sum), frequency deviations (pu), integral states."""

    delta: np.ndarray
    omega: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=float)
        self.omega = np.asarray(self.omega, dtype=float)
        self.s = np.asarray(self.s, dtype=float)

    @classmethod
    def zeros(cls, n: int) -> "GridState":
        return cls(np.zeros(n), np.zeros(n), np.zeros(n))

    def copy(self) -> "GridState":
        return GridState(self.delta.copy(), self.omega.copy(), self.s.copy())

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.delta).all()
                    and np.isfinite(self.omega).all()
                    and np.isfinite(self.s).all())


def electrical_power(delta: np.ndarray, model: GridModel) -> np.ndarray:
    """Per-bus electrical power injected into the network at angles delta.

    Computed edge by edge so the total sums to zero exactly up to
    floating-point rounding.
    """
    delta = np.asarray(delta, dtype=float)
    if len(delta) != model.n:
        raise ModelError("electrical_power: angle vector length mismatch")
    ei, ej = model.edge_index
    return _kernels._electrical_np(delta, ei, ej, model.susceptance, model.n)


def step(state: GridState, u, dist, mode: int, dt: float, model: GridModel) -> GridState:
    """One forward-Euler step of angles and frequencies (integral state aside).

    delta <- delta + dt * (omega - mean(omega))
    omega <- omega + dt * Minv * (p - D*omega + u - p_e(delta) + dist)
    """
    if dt > MAX_DT + 1e-15 or dt <= 0:
        raise ModelError(f"step: dt must be in (0, {MAX_DT}]")
    u = np.asarray(u, dtype=float)
    dist = np.asarray(dist, dtype=float)
    if not (state.is_finite() and np.isfinite(u).all() and np.isfinite(dist).all()):
        raise IntegrationError("step: non-finite input", step=0)
    minv = 1.0 / model.inertia(mode)
    pe = electrical_power(state.delta, model)
    delta = state.delta + dt * (state.omega - state.omega.mean())
    omega = state.omega + dt * minv * (model.injection - model.damping * state.omega + u - pe + dist)
    return GridState(delta, omega, state.s.copy())


def integral_step(state: GridState, model: GridModel, k: float, dt: float) -> np.ndarray:
    """Consensus integral update: s <- s + dt * (-omega/c - k * L (c*s))."""
    if k <= 0:
        raise ModelError("integral_step: k must be positive")
    ei, ej = model.edge_index
    c = model.cost
    lap = _kernels._edge_laplacian_np(c * state.s, ei, ej, np.ones(len(ei)), model.n)
    return state.s + dt * (-state.omega / c - k * lap)


@dataclass
class Trajectory:
    """Struct-of-arrays record of one closed-loop run.

    Row t holds the state the controller saw at step t together with the
    action applied over [t*dt, (t+1)*dt); all arrays share the same
    leading length.  final_state is the state after the last step.
    """

    dt: float
    delta: np.ndarray
    omega: np.ndarray
    s: np.ndarray
    u: np.ndarray
    mode: np.ndarray
    dist: np.ndarray
    controller_id: np.ndarray
    final_state: GridState

    def __post_init__(self):
        T = len(self.u)
        for name in ("delta", "omega", "s", "mode", "dist", "controller_id"):
            if len(getattr(self, name)) != T:
                raise ModelError(f"trajectory: {name} length mismatch")
        if self.dt <= 0:
            raise ModelError("trajectory: dt must be positive")

    def __len__(self) -> int:
        return len(self.u)

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self)) * self.dt

    def state_at(self, t: int) -> GridState:
        return GridState(self.delta[t], self.omega[t], self.s[t])

    def slice(self, start: int, stop: int) -> "Trajectory":
        if stop <= start:
            raise ModelError("trajectory slice: empty range")
        return Trajectory(
            self.dt, self.delta[start:stop], self.omega[start:stop],
            self.s[start:stop], self.u[start:stop], self.mode[start:stop],
            self.dist[start:stop], self.controller_id[start:stop],
            self.state_at(stop) if stop < len(self) else self.final_state,
        )


class FixedPolicy:
    """Always apply the same controller."""

    def __init__(self, controller: Controller):
        self.controllers = [controller]
        self.log = None

    def select(self, omega, mode, t) -> int:
        return 0

    def record(self, omega, u):
        pass


def _check_finite_step(t, delta, omega, s, dt):
    if not (np.isfinite(delta).all() and np.isfinite(omega).all() and np.isfinite(s).all()):
        raise IntegrationError(f"non-finite state at t = {t * dt:.4f} s", step=t)


def simulate(
    model: GridModel,
    schedule: InertiaSchedule,
    disturbances: DisturbanceProfile,
    policy,
    horizon_s: float,
    dt: float = 0.01,
    x0: GridState | None = None,
    integrator: str = "euler",
) -> Trajectory:
    """Roll out the closed loop under an inertia schedule and disturbances.

    policy is either a Controller (wrapped in FixedPolicy) or any object
    with select(omega, mode, t) -> pool index and record(omega, u)
    callbacks plus a controllers list.  Fixed-controller Euler runs take
    the compiled kernel path; switching policies step in Python so the
    per-step selection logic can run in the loop.
    """
    if isinstance(policy, Controller):
        policy = FixedPolicy(policy)
    if dt > MAX_DT + 1e-15 or dt <= 0:
        raise ModelError(f"simulate: dt must be in (0, {MAX_DT}]")
    if integrator not in ("euler", "rk4"):
        raise ModelError("simulate: integrator must be 'euler' or 'rk4'")

    n = model.n
    T = int(round(horizon_s / dt))
    mode_steps = schedule.mode_steps(T, dt)
    minv_t = 1.0 / model.inertia_modes[mode_steps]
    dist_t = disturbances.step_array(T, dt, n)
    if x0 is None:
        from .stability import solve_equilibrium

        k = next((c.k for c in policy.controllers if c.has_integral), None)
        eq = solve_equilibrium(model, k if k is not None else 1.0)
        s0 = eq.s_star if k is not None else np.zeros(n)
        x0 = GridState(eq.delta_star.copy(), np.zeros(n), s0.copy())
    if not x0.is_finite():
        raise IntegrationError("simulate: non-finite initial state", step=0)

    fixed = isinstance(policy, FixedPolicy)
    if fixed and integrator == "euler":
        ctrl = policy.controllers[0]
        kind, wpos, bpos, wneg, bneg, lin, mw1, mb1, mw2, k, integral_on = ctrl.kernel_args()
        wpos, bpos, wneg, bneg = _broadcast_stack(ctrl, n, wpos, bpos, wneg, bneg)
        ei, ej = model.edge_index
        delta_h, omega_h, s_h, u_h, _ = _kernels.rollout_forward(
            kind, wpos, bpos, wneg, bneg, lin, mw1, mb1, mw2, k, integral_on,
            x0.delta, x0.omega, x0.s, model.injection, model.damping, model.cost,
            minv_t, dist_t, ei, ej, model.susceptance, model.u_min, model.u_max, dt)
        if not np.isfinite(omega_h).all():
            bad = int(np.argwhere(~np.isfinite(omega_h).all(axis=1))[0, 0])
            raise IntegrationError(f"non-finite state at t = {bad * dt:.4f} s", step=bad)
        return Trajectory(
            dt, delta_h[:-1], omega_h[:-1], s_h[:-1], u_h, mode_steps, dist_t,
            np.zeros(T, dtype=np.int64), GridState(delta_h[-1], omega_h[-1], s_h[-1]))

    return _simulate_python(model, policy, minv_t, mode_steps, dist_t, x0, T, dt, integrator)


def _broadcast_stack(ctrl, n, wpos, bpos, wneg, bneg):
    stack = getattr(ctrl, "stack", None)
    if stack is not None and stack.shared and wpos.shape[0] == 1:
        return tuple(np.repeat(a, n, axis=0) for a in (wpos, bpos, wneg, bneg))
    return wpos, bpos, wneg, bneg


def _simulate_python(model, policy, minv_t, mode_steps, dist_t, x0, T, dt, integrator):
    n = model.n
    ei, ej = model.edge_index
    ones_w = np.ones(len(ei))
    c = model.cost

    delta_h = np.empty((T, n))
    omega_h = np.empty((T, n))
    s_h = np.empty((T, n))
    u_h = np.empty((T, n))
    ids = np.empty(T, dtype=np.int64)

    delta, omega, s = x0.delta.copy(), x0.omega.copy(), x0.s.copy()
    for t in range(T):
        _check_finite_step(t, delta, omega, s, dt)
        idx = policy.select(omega, int(mode_steps[t]), t)
        ctrl = policy.controllers[idx]
        u = ctrl.act(omega, s, model)
        delta_h[t], omega_h[t], s_h[t], u_h[t], ids[t] = delta, omega, s, u, idx

        if integrator == "euler":
            pe = _kernels._electrical_np(delta, ei, ej, model.susceptance, n)
            ndelta = delta + dt * (omega - omega.mean())
            nomega = omega + dt * minv_t[t] * (
                model.injection - model.damping * omega + u - pe + dist_t[t])
            if ctrl.has_integral:
                lap = _kernels._edge_laplacian_np(c * s, ei, ej, ones_w, n)
                ns = s + dt * (-omega / c - ctrl.k * lap)
            else:
                ns = s
        else:
            ndelta, nomega, ns = _rk4_step(
                model, delta, omega, s, u, dist_t[t], minv_t[t], dt,
                ctrl.k if ctrl.has_integral else 0.0)
        delta, omega, s = ndelta, nomega, ns
        policy.record(omega_h[t], u)

    _check_finite_step(T, delta, omega, s, dt)
    return Trajectory(dt, delta_h, omega_h, s_h, u_h, mode_steps, dist_t, ids,
                      GridState(delta, omega, s))


def _rk4_step(model, delta, omega, s, u, dist, minv, dt, k):
    """Classic RK4 with the action held constant over the substeps."""
    ei, ej = model.edge_index
    ones_w = np.ones(len(ei))
    c = model.cost

    def rhs(d, o, si):
        pe = _kernels._electrical_np(d, ei, ej, model.susceptance, model.n)
        dd = o - o.mean()
        do = minv * (model.injection - model.damping * o + u - pe + dist)
        if k > 0:
            ds = -o / c - k * _kernels._edge_laplacian_np(c * si, ei, ej, ones_w, model.n)
        else:
            ds = np.zeros_like(si)
        return dd, do, ds

    k1 = rhs(delta, omega, s)
    k2 = rhs(delta + 0.5 * dt * k1[0], omega + 0.5 * dt * k1[1], s + 0.5 * dt * k1[2])
    k3 = rhs(delta + 0.5 * dt * k2[0], omega + 0.5 * dt * k2[1], s + 0.5 * dt * k2[2])
    k4 = rhs(delta + dt * k3[0], omega + dt * k3[1], s + dt * k3[2])
    return (delta + dt / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]),
            omega + dt / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]),
            s + dt / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2]))


def export_trajectory(traj: Trajectory, path):
    """Write one row per step: t, mode, controller, then per-bus blocks."""
    n = traj.delta.shape[1]
    cols = ["t", "mode", "controller_id"]
    for block in ("delta", "omega", "s", "u", "dist"):
        cols.extend(f"{block}_{i}" for i in range(n))
    with open(path, "w") as fh:
        fh.write("\t".join(cols) + "\n")
        for t in range(len(traj)):
            row = [repr(float(t * traj.dt)), str(int(traj.mode[t])), str(int(traj.controller_id[t]))]
            for block in (traj.delta, traj.omega, traj.s, traj.u, traj.dist):
                row.extend(repr(float(x)) for x in block[t])
            fh.write("\t".join(row) + "\n")


def read_trajectory(path) -> Trajectory:
    with open(path) as fh:
        header = fh.readline().split()
        rows = [line.split() for line in fh if line.strip()]
    n = sum(1 for c in header if c.startswith("delta_"))
    T = len(rows)
    data = np.array([[float(x) for x in row] for row in rows])
    dt = data[1, 0] - data[0, 0] if T > 1 else MAX_DT
    blocks = {}
    off = 3
    for name in ("delta", "omega", "s", "u", "dist"):
        blocks[name] = data[:, off:off + n]
        off += n
    final = GridState(blocks["delta"][-1], blocks["omega"][-1], blocks["s"][-1])
    return Trajectory(dt, blocks["delta"], blocks["omega"], blocks["s"], blocks["u"],
                      data[:, 1].astype(np.int64), blocks["dist"],
                      data[:, 2].astype(np.int64), final)
