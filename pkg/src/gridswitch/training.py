"""Gradient-based controller optimization through unrolled rollouts.

Every episode rolls a batch of disturbance scenarios through the closed
loop with forward Euler, measures the time-averaged quadratic-control
plus frequency-norm loss, and backpropagates it through every step of
the unrolled dynamics by the hand-written adjoint in _kernels.  The
derivative is taken with respect to the raw (unconstrained) controller
parameters, so optimizer steps can never leave the feasible set.
Gradients across a batch are reduced in trajectory order, which keeps
training bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .controllers import (Controller, MonotonePIController, branch_raw_grad,
                          sigmoid)
from .dynamics import GridState, Trajectory
from .errors import GridSwitchError, ModelError
from .grid import GridModel
from .stability import solve_equilibrium


@dataclass(frozen=True)
class TrainConfig:
    # desk-scale defaults: a tenth of the full 300-episode x 300-trajectory
    # protocol; scenario files override these per case
    episodes: int = 30
    trajectories: int = 30
    horizon_steps: int = 300
    dt: float = 0.01
    learning_rate: float = 0.05
    lr_decay: float = 0.7
    lr_decay_every: int = 50
    freq_weight: float = 10.0   # weight on the frequency-deviation norms
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    max_disturbance: float = 0.4
    hidden_units: int = 20

    def __post_init__(self):
        if min(self.episodes, self.trajectories, self.horizon_steps, self.lr_decay_every) < 1:
            raise ModelError("train config: counts must be >= 1")
        if self.dt <= 0 or self.learning_rate < 0 or self.freq_weight < 0:
            raise ModelError("train config: dt must be positive, rates non-negative")
        if not (0.0 < self.lr_decay <= 1.0):
            raise ModelError("train config: lr_decay must be in (0, 1]")

    def lr_at(self, episode: int) -> float:
        return self.learning_rate * self.lr_decay ** (episode // self.lr_decay_every)


@dataclass
class RolloutCase:
    """One training scenario: a fixed mode and a per-step disturbance table."""

    mode: int
    dist_steps: np.ndarray  # (T, n)


@dataclass
class TrainReport:
    episode_loss: np.ndarray
    controller: Controller
    grad_check: dict
    config: TrainConfig
    aborted: bool = False

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.episode_loss, dtype=float).tobytes())
        for name in sorted(self.controller.raw_parameters()):
            h.update(self.controller.raw_parameters()[name].tobytes())
        return h.hexdigest()


def rollout_loss(trajectory: Trajectory, model: GridModel, freq_weight: float) -> float:
    """Time-averaged sum of quadratic control cost and weighted frequency norms."""
    u = trajectory.u
    omega = trajectory.omega
    ucost = 0.5 * np.sum(model.cost * u * u, axis=1)
    wcost = freq_weight * (np.linalg.norm(omega, axis=1) + np.max(np.abs(omega), axis=1))
    return float(np.mean(ucost + wcost))


def _initial_state(model: GridModel, ctrl: Controller) -> tuple[GridState, float]:
    """Closed-loop equilibrium start: angles solve the flow, s absorbs gamma."""
    k = ctrl.k if ctrl.has_integral else 1.0
    eq = solve_equilibrium(model, k)
    s0 = eq.s_star if ctrl.has_integral else np.zeros(model.n)
    return GridState(eq.delta_star.copy(), np.zeros(model.n), s0.copy()), eq.gamma


def _rollout_grads(ctrl: Controller, model: GridModel, case: RolloutCase,
                   dt: float, freq_weight: float, x0: GridState, gamma: float,
                   learn_k: bool):
    kind, wpos, bpos, wneg, bneg, lin, mw1, mb1, mw2, k, integral_on = ctrl.kernel_args()
    n = model.n
    stack = getattr(ctrl, "stack", None)
    if stack is not None and stack.shared and wpos.shape[0] == 1:
        wpos, bpos, wneg, bneg = (np.repeat(a, n, axis=0) for a in (wpos, bpos, wneg, bneg))
    ei, ej = model.edge_index
    T = case.dist_steps.shape[0]
    minv_t = np.broadcast_to(1.0 / model.inertia(case.mode), (T, n)).copy()

    fwd = _kernels.rollout_forward(
        kind, wpos, bpos, wneg, bneg, lin, mw1, mb1, mw2, k, integral_on,
        x0.delta, x0.omega, x0.s, model.injection, model.damping, model.cost,
        minv_t, case.dist_steps, ei, ej, model.susceptance, model.u_min, model.u_max, dt)
    delta_h, omega_h, s_h, u_h, a_h = fwd
    if not np.isfinite(omega_h).all():
        bad = int(np.argwhere(~np.isfinite(omega_h).all(axis=1))[0, 0])
        raise GridSwitchError(f"training rollout diverged at step {bad}")

    out = _kernels.rollout_backward(
        kind, wpos, bpos, wneg, bneg, lin, mw1, mb1, mw2, k, integral_on,
        delta_h, omega_h, s_h, u_h, a_h,
        model.injection, model.damping, model.cost, minv_t,
        ei, ej, model.susceptance, model.u_min, model.u_max, dt, freq_weight)
    g_wpos, g_bpos, g_wneg, g_bneg, g_lin, g_mw1, g_mb1, g_mw2, g_k, gs0, loss = out
    if not np.isfinite(loss):
        raise GridSwitchError("training rollout produced a non-finite loss")

    # chain the initial integral state s0 = gamma / (k c) back to k
    if integral_on and learn_k and abs(gamma) > 0:
        g_k += float(np.sum(gs0 * (-gamma / (k * k * model.cost))))

    grads = _materialized_to_raw(ctrl, g_wpos, g_bpos, g_wneg, g_bneg,
                                 g_lin, g_mw1, g_mb1, g_mw2, g_k, learn_k)
    return loss, grads


def _materialized_to_raw(ctrl, g_wpos, g_bpos, g_wneg, g_bneg,
                         g_lin, g_mw1, g_mb1, g_mw2, g_k, learn_k):
    kind = ctrl.kind
    grads: dict[str, np.ndarray] = {}
    if kind in ("monotone_pi", "monotone_nn"):
        stack = ctrl.stack
        if stack.shared and stack.raw_wpos.shape[0] == 1:
            g_wpos = g_wpos.sum(axis=0, keepdims=True)
            g_bpos = g_bpos.sum(axis=0, keepdims=True)
            g_wneg = g_wneg.sum(axis=0, keepdims=True)
            g_bneg = g_bneg.sum(axis=0, keepdims=True)
        grads["wpos"], grads["gpos"] = branch_raw_grad(
            stack.raw_wpos, stack.raw_gpos, g_wpos, g_bpos, negative=False)
        # the negative branch materializes w = diff(-softplus(raw) - eps)
        grads["wneg"], grads["gneg"] = branch_raw_grad(
            stack.raw_wneg, stack.raw_gneg, g_wneg, g_bneg, negative=True)
    elif kind in ("linear_droop", "linear_pi"):
        grads["gain"] = g_lin * sigmoid(ctrl.raw_gain)
    else:
        grads["w1"], grads["b1"], grads["w2"] = g_mw1, g_mb1, g_mw2
    if ctrl.has_integral:
        gk_raw = g_k * float(sigmoid(ctrl.raw_k)) if learn_k else 0.0
        grads["k"] = np.array([gk_raw])
    return grads


def gradient(ctrl: Controller, model: GridModel, cases: list[RolloutCase],
             dt: float, freq_weight: float, learn_k: bool = True):
    """Mean loss and its exact reverse-mode gradient over a scenario batch.

    Returns (loss, grads) where grads maps raw parameter names to arrays
    matching ctrl.raw_parameters().  Reduction over the batch follows the
    list order.
    """
    if not cases:
        raise ModelError("gradient: empty scenario batch")
    x0, gamma = _initial_state(model, ctrl)
    total = None
    loss_sum = 0.0
    for case in cases:
        loss, grads = _rollout_grads(ctrl, model, case, dt, freq_weight, x0, gamma, learn_k)
        loss_sum += loss
        if total is None:
            total = grads
        else:
            for name in total:
                total[name] = total[name] + grads[name]
    scale = 1.0 / len(cases)
    for name in total:
        total[name] = total[name] * scale
    return loss_sum * scale, total


class Adam:
    """Standard first/second-moment adaptive updates over named arrays."""

    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        out = {}
        for name, p in params.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            mhat = self.m[name] / c1
            vhat = self.v[name] / c2
            out[name] = p - lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


def sample_cases(rng: np.random.Generator, model: GridModel, mode, config: TrainConfig,
                 count: int) -> list[RolloutCase]:
    """Disturbance scenarios: one step change at a random bus and time.

    mode is a fixed index, or "all" to explore every mode uniformly
    across the batch.
    """
    T, n = config.horizon_steps, model.n
    cases = []
    for _ in range(count):
        m = int(rng.integers(model.n_modes)) if mode == "all" else int(mode)
        dist = np.zeros((T, n))
        t0 = int(rng.integers(T))
        bus = int(rng.integers(n))
        dist[t0:, bus] = rng.uniform(-config.max_disturbance, config.max_disturbance)
        cases.append(RolloutCase(m, dist))
    return cases


def finite_difference_gradient(ctrl: Controller, model: GridModel, cases,
                               dt: float, freq_weight: float, h: float = 1e-5,
                               learn_k: bool = True) -> dict[str, np.ndarray]:
    """Central-difference oracle over the raw parameters (verification only)."""

    def batch_loss(c: Controller) -> float:
        x0, _ = _initial_state(model, c)
        total = 0.0
        for case in cases:
            kind, wpos, bpos, wneg, bneg, lin, mw1, mb1, mw2, k, integral_on = c.kernel_args()
            if getattr(c, "stack", None) is not None and c.stack.shared and wpos.shape[0] == 1:
                wpos, bpos, wneg, bneg = (np.repeat(a, model.n, axis=0)
                                          for a in (wpos, bpos, wneg, bneg))
            ei, ej = model.edge_index
            T = case.dist_steps.shape[0]
            minv_t = np.broadcast_to(1.0 / model.inertia(case.mode), (T, model.n)).copy()
            _, omega_h, _, u_h, _ = _kernels.rollout_forward(
                kind, wpos, bpos, wneg, bneg, lin, mw1, mb1, mw2, k, integral_on,
                x0.delta, x0.omega, x0.s, model.injection, model.damping, model.cost,
                minv_t, case.dist_steps, ei, ej, model.susceptance,
                model.u_min, model.u_max, dt)
            ucost = 0.5 * np.sum(model.cost * u_h * u_h, axis=1)
            wcost = freq_weight * (np.linalg.norm(omega_h[:-1], axis=1)
                                   + np.max(np.abs(omega_h[:-1]), axis=1))
            total += float(np.mean(ucost + wcost))
        return total / len(cases)

    out = {}
    base = {k: v.copy() for k, v in ctrl.raw_parameters().items()}
    for name, arr in base.items():
        if name == "k" and not learn_k:
            out[name] = np.zeros_like(arr)
            continue
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for idx in range(flat.size):
            probe = {k: v.copy() for k, v in base.items()}
            probe[name].reshape(-1)[idx] = flat[idx] + h
            c = ctrl.copy()
            c.set_raw_parameters(probe)
            lp = batch_loss(c)
            probe = {k: v.copy() for k, v in base.items()}
            probe[name].reshape(-1)[idx] = flat[idx] - h
            c = ctrl.copy()
            c.set_raw_parameters(probe)
            lm = batch_loss(c)
            gflat[idx] = (lp - lm) / (2 * h)
        out[name] = g
    return out


def train(ctrl: Controller, model: GridModel, mode, config: TrainConfig,
          freeze_k: float | None = None, grad_check: bool = True) -> TrainReport:
    """Optimize raw controller parameters over unrolled rollouts.

    mode is a fixed inertia mode index or "all".  freeze_k pins the
    integral gain to a shared value so pooled controllers keep a common
    equilibrium; the gain then receives no updates.  Training aborts if
    the loss exceeds 1000x the initial episode mean for five consecutive
    episodes.
    """
    ctrl = ctrl.copy()
    learn_k = ctrl.has_integral and freeze_k is None
    if freeze_k is not None and ctrl.has_integral:
        from .controllers import EPS_K, inv_softplus

        params = {k: v.copy() for k, v in ctrl.raw_parameters().items()}
        params["k"] = np.array([float(inv_softplus(freeze_k - EPS_K))])
        ctrl.set_raw_parameters(params)

    rng = np.random.default_rng(config.seed)
    opt = Adam(ctrl.raw_parameters(), config.adam_beta1, config.adam_beta2, config.adam_eps)
    losses = np.zeros(config.episodes)
    check: dict = {"ran": False}
    bad_streak = 0
    aborted = False

    for ep in range(config.episodes):
        cases = sample_cases(rng, model, mode, config, config.trajectories)
        loss, grads = gradient(ctrl, model, cases, config.dt, config.freq_weight, learn_k)
        losses[ep] = loss

        if ep == 0 and grad_check:
            check = _spot_check(ctrl, model, cases[:2], config, grads, learn_k)

        params = opt.step(ctrl.raw_parameters(), grads, config.lr_at(ep))
        if not learn_k and ctrl.has_integral:
            params["k"] = np.array([ctrl.raw_k])
        ctrl.set_raw_parameters(params)

        if loss > 1e3 * max(losses[0], 1e-12):
            bad_streak += 1
            if bad_streak >= 5:
                aborted = True
                losses = losses[: ep + 1]
                break
        else:
            bad_streak = 0

    if hasattr(ctrl, "stack"):
        ctrl.stack.check_invariants()
    return TrainReport(losses, ctrl, check, config, aborted)


def _spot_check(ctrl, model, cases, config, grads, learn_k) -> dict:
    """Compare the analytic gradient against central differences on a sub-batch."""
    fd = finite_difference_gradient(ctrl, model, cases, config.dt,
                                    config.freq_weight, learn_k=learn_k)
    loss, analytic = gradient(ctrl, model, cases, config.dt, config.freq_weight, learn_k)
    worst = 0.0
    for name, g in fd.items():
        denom = np.maximum(np.abs(g), 1e-6)
        worst = max(worst, float(np.max(np.abs(analytic[name] - g) / denom)))
    return {"ran": True, "max_rel_err": worst, "batch_loss": loss}
