"""Shared test helpers: tiny fixtures and the gradient-check kink filter."""

import numpy as np

import gridswitch as gs
from gridswitch import _kernels
from gridswitch.grid import GridModel
from gridswitch.training import _initial_state


def tiny_model():
    return GridModel(((0, 1),), [1.3], [0.5, 0.7], [0.15, -0.25], [1.0, 1.2],
                     [[0.8, 1.0], [2.0, 2.5]], (1.0, 2.0),
                     [-1.0, -1.0], [1.0, 1.0])


def kink_free(ctrl, model, case, dt):
    """Reject instances whose rollout grazes a ReLU kink or saturation edge.

    Exact zeros before the disturbance arrives are the closed-loop fixed
    point itself and perturb symmetrically under central differences, so
    only the near-but-not-at band counts as dangerous.
    """
    kind, wpos, bpos, wneg, bneg, lin, mw1, mb1, mw2, k, integral_on = ctrl.kernel_args()
    x0, _ = _initial_state(model, ctrl)
    ei, ej = model.edge_index
    T = case.dist_steps.shape[0]
    minv_t = np.broadcast_to(1.0 / model.inertia(case.mode), (T, model.n)).copy()
    delta_h, omega_h, s_h, u_h, a_h = _kernels.rollout_forward(
        kind, wpos, bpos, wneg, bneg, lin, mw1, mb1, mw2, k, integral_on,
        x0.delta, x0.omega, x0.s, model.injection, model.damping, model.cost,
        minv_t, case.dist_steps, ei, ej, model.susceptance,
        model.u_min, model.u_max, dt)
    lo, hi = 1e-9, 2e-5
    omega = omega_h[:-1]
    pre_p = np.abs(omega[:, :, None] + bpos[None])
    pre_n = np.abs(-omega[:, :, None] + bneg[None])
    for pre in (pre_p, pre_n):
        if np.any((pre > lo) & (pre < hi)):
            return False
    sat = np.minimum(np.abs(a_h - model.u_min), np.abs(a_h - model.u_max))
    if np.any((sat > lo) & (sat < hi)):
        return False
    mags = np.sort(np.abs(omega), axis=1)
    tie = (mags[:, -1] - mags[:, -2] < hi) & (mags[:, -1] > 1e-8)
    if np.any(tie):
        return False
    return True
