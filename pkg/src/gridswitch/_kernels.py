"""Hot rollout kernels: closed-loop forward integration and its adjoint.

Two interchangeable implementations live here.  The numba path compiles
scalar loops with @njit; the numpy path vectorizes the per-step work and
keeps the time loop in Python.  Selection happens once at import:

    GRIDSWITCH_NUMBA=0   force the numpy fallback
    (numba missing)      fall back automatically

Both paths implement the same forward-Euler update

    delta' = delta + dt * (omega - mean(omega))
    omega' = omega + dt * Minv * (p - D*omega + u - p_e(delta) + d)
    s'     = s + dt * (-omega/c - k * L (c*s))        (integral kinds only)
    u      = clamp(-g(omega) + k*s, u_min, u_max)

where L is the unweighted graph Laplacian acting through the edge list
and g is the controller's proportional part (kind codes 0..4).  The
adjoint pass backpropagates the time-averaged quadratic-control plus
frequency-norm cost through every step, with zero subgradient outside
the active saturation interval and lowest-index tie-breaking for the
max-norm term.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


USE_NUMBA = HAVE_NUMBA and os.environ.get("GRIDSWITCH_NUMBA", "1") != "0"

# controller kind codes (see controllers.KIND_CODES)
K_MONO_PI = 0
K_MONO_NN = 1
K_DROOP = 2
K_LIN_PI = 3
K_MLP_PI = 4


# ---------------------------------------------------------------------------
# numba path: scalar loops
# ---------------------------------------------------------------------------


@njit(cache=True)
def _prop_eval_nb(kind, i, x, wpos, bpos, wneg, bneg, lin_gain, mw1, mb1, mw2):
    g = 0.0
    if kind == K_MONO_PI or kind == K_MONO_NN:
        d = wpos.shape[1]
        for l in range(d):
            z = x + bpos[i, l]
            if z > 0.0:
                g += wpos[i, l] * z
            zn = -x + bneg[i, l]
            if zn > 0.0:
                g += wneg[i, l] * zn
    elif kind == K_DROOP or kind == K_LIN_PI:
        g = lin_gain[i] * x
    else:
        d = mw1.shape[1]
        for l in range(d):
            g += mw2[i, l] * (np.tanh(mw1[i, l] * x + mb1[i, l]) - np.tanh(mb1[i, l]))
    return g


@njit(cache=True)
def _rollout_forward_nb(kind, wpos, bpos, wneg, bneg, lin_gain, mw1, mb1, mw2,
                        k, integral_on,
                        delta0, omega0, s0, p, damp, ccost, minv_t, dist_t,
                        ei, ej, bsus, ulo, uhi, dt):
    T = minv_t.shape[0]
    n = delta0.shape[0]
    ne = ei.shape[0]
    delta_h = np.empty((T + 1, n))
    omega_h = np.empty((T + 1, n))
    s_h = np.empty((T + 1, n))
    u_h = np.empty((T, n))
    a_h = np.empty((T, n))
    delta_h[0] = delta0
    omega_h[0] = omega0
    s_h[0] = s0

    pe = np.empty(n)
    lap = np.empty(n)
    cs = np.empty(n)
    for t in range(T):
        delta = delta_h[t]
        omega = omega_h[t]
        s = s_h[t]
        # control
        for i in range(n):
            a = -_prop_eval_nb(kind, i, omega[i], wpos, bpos, wneg, bneg,
                               lin_gain, mw1, mb1, mw2)
            if integral_on:
                a += k * s[i]
            a_h[t, i] = a
            if a < ulo[i]:
                a = ulo[i]
            elif a > uhi[i]:
                a = uhi[i]
            u_h[t, i] = a
        # electrical power through the edge list (exact antisymmetry)
        for i in range(n):
            pe[i] = 0.0
        for e in range(ne):
            f = bsus[e] * np.sin(delta[ei[e]] - delta[ej[e]])
            pe[ei[e]] += f
            pe[ej[e]] -= f
        # plant update
        om_mean = 0.0
        for i in range(n):
            om_mean += omega[i]
        om_mean /= n
        for i in range(n):
            delta_h[t + 1, i] = delta[i] + dt * (omega[i] - om_mean)
            omega_h[t + 1, i] = omega[i] + dt * minv_t[t, i] * (
                p[i] - damp[i] * omega[i] + u_h[t, i] - pe[i] + dist_t[t, i])
        if integral_on:
            for i in range(n):
                cs[i] = ccost[i] * s[i]
                lap[i] = 0.0
            for e in range(ne):
                f = cs[ei[e]] - cs[ej[e]]
                lap[ei[e]] += f
                lap[ej[e]] -= f
            for i in range(n):
                s_h[t + 1, i] = s[i] + dt * (-omega[i] / ccost[i] - k * lap[i])
        else:
            for i in range(n):
                s_h[t + 1, i] = s[i]
    return delta_h, omega_h, s_h, u_h, a_h


@njit(cache=True)
def _rollout_backward_nb(kind, wpos, bpos, wneg, bneg, lin_gain, mw1, mb1, mw2,
                         k, integral_on,
                         delta_h, omega_h, s_h, u_h, a_h,
                         p, damp, ccost, minv_t,
                         ei, ej, bsus, ulo, uhi, dt, lam):
    T = u_h.shape[0]
    n = delta_h.shape[1]
    ne = ei.shape[0]
    invT = 1.0 / T

    g_wpos = np.zeros(wpos.shape)
    g_bpos = np.zeros(bpos.shape)
    g_wneg = np.zeros(wneg.shape)
    g_bneg = np.zeros(bneg.shape)
    g_lin = np.zeros(lin_gain.shape)
    g_mw1 = np.zeros(mw1.shape)
    g_mb1 = np.zeros(mb1.shape)
    g_mw2 = np.zeros(mw2.shape)
    g_k = 0.0
    loss = 0.0

    gd = np.zeros(n)
    go = np.zeros(n)
    gs = np.zeros(n)
    gd_new = np.empty(n)
    go_new = np.empty(n)
    gs_new = np.empty(n)
    ga = np.empty(n)
    slope = np.empty(n)
    tmp = np.empty(n)
    lap = np.empty(n)
    cs = np.empty(n)

    for t in range(T - 1, -1, -1):
        delta = delta_h[t]
        omega = omega_h[t]
        s = s_h[t]
        u = u_h[t]

        # instantaneous cost and the frequency-norm subgradients
        nrm2 = 0.0
        for i in range(n):
            nrm2 += omega[i] * omega[i]
        nrm2 = np.sqrt(nrm2)
        imax = 0
        amax = abs(omega[0])
        ucost = 0.0
        for i in range(n):
            if abs(omega[i]) > amax:
                amax = abs(omega[i])
                imax = i
            ucost += 0.5 * ccost[i] * u[i] * u[i]
        loss += invT * (ucost + lam * (nrm2 + amax))

        # gradient into the action, gated by the saturation interval
        for i in range(n):
            gu = invT * ccost[i] * u[i] + dt * minv_t[t, i] * go[i]
            if ulo[i] < a_h[t, i] < uhi[i]:
                ga[i] = gu
            else:
                ga[i] = 0.0

        # proportional-branch parameter grads and local slope
        for i in range(n):
            x = omega[i]
            gpi = -ga[i]
            sl = 0.0
            if kind == K_MONO_PI or kind == K_MONO_NN:
                for l in range(wpos.shape[1]):
                    z = x + bpos[i, l]
                    if z > 0.0:
                        g_wpos[i, l] += gpi * z
                        g_bpos[i, l] += gpi * wpos[i, l]
                        sl += wpos[i, l]
                    zn = -x + bneg[i, l]
                    if zn > 0.0:
                        g_wneg[i, l] += gpi * zn
                        g_bneg[i, l] += gpi * wneg[i, l]
                        sl -= wneg[i, l]
            elif kind == K_DROOP or kind == K_LIN_PI:
                g_lin[i] += gpi * x
                sl = lin_gain[i]
            else:
                for l in range(mw1.shape[1]):
                    pre = mw1[i, l] * x + mb1[i, l]
                    th = np.tanh(pre)
                    th0 = np.tanh(mb1[i, l])
                    sech2 = 1.0 - th * th
                    g_mw2[i, l] += gpi * (th - th0)
                    g_mw1[i, l] += gpi * mw2[i, l] * sech2 * x
                    g_mb1[i, l] += gpi * mw2[i, l] * (sech2 - (1.0 - th0 * th0))
                    sl += mw2[i, l] * mw1[i, l] * sech2
            slope[i] = sl

        if integral_on:
            for i in range(n):
                g_k += ga[i] * s[i]

        # adjoint of omega_t
        gd_mean = 0.0
        for i in range(n):
            gd_mean += gd[i]
        gd_mean /= n
        for i in range(n):
            gnorm = 0.0
            if nrm2 > 0.0:
                gnorm = omega[i] / nrm2
                if i == imax:
                    gnorm += 1.0 if omega[i] > 0.0 else -1.0
            go_new[i] = (invT * lam * gnorm
                         + dt * (gd[i] - gd_mean)
                         + go[i] * (1.0 - dt * minv_t[t, i] * damp[i])
                         - slope[i] * ga[i])
            if integral_on:
                go_new[i] -= dt * gs[i] / ccost[i]

        # adjoint of delta_t: gd - dt * H(delta) @ (Minv * go)
        for i in range(n):
            tmp[i] = minv_t[t, i] * go[i]
            gd_new[i] = gd[i]
        for e in range(ne):
            w = bsus[e] * np.cos(delta[ei[e]] - delta[ej[e]])
            f = w * (tmp[ei[e]] - tmp[ej[e]])
            gd_new[ei[e]] -= dt * f
            gd_new[ej[e]] += dt * f

        # adjoint of s_t
        if integral_on:
            for i in range(n):
                lap[i] = 0.0
            for e in range(ne):
                f = gs[ei[e]] - gs[ej[e]]
                lap[ei[e]] += f
                lap[ej[e]] -= f
            for i in range(n):
                gs_new[i] = k * ga[i] + gs[i] - dt * k * ccost[i] * lap[i]
            # dk contribution of the consensus term
            for i in range(n):
                cs[i] = ccost[i] * s[i]
                lap[i] = 0.0
            for e in range(ne):
                f = cs[ei[e]] - cs[ej[e]]
                lap[ei[e]] += f
                lap[ej[e]] -= f
            for i in range(n):
                g_k -= dt * lap[i] * gs[i]
        else:
            for i in range(n):
                gs_new[i] = gs[i]

        for i in range(n):
            gd[i] = gd_new[i]
            go[i] = go_new[i]
            gs[i] = gs_new[i]

    return g_wpos, g_bpos, g_wneg, g_bneg, g_lin, g_mw1, g_mb1, g_mw2, g_k, gs, loss


# ---------------------------------------------------------------------------
# numpy path: vectorized per step
# ---------------------------------------------------------------------------


def _prop_eval_np(kind, omega, wpos, bpos, wneg, bneg, lin_gain, mw1, mb1, mw2):
    if kind in (K_MONO_PI, K_MONO_NN):
        zp = np.maximum(omega[:, None] + bpos, 0.0)
        zn = np.maximum(-omega[:, None] + bneg, 0.0)
        return np.sum(wpos * zp, axis=1) + np.sum(wneg * zn, axis=1)
    if kind in (K_DROOP, K_LIN_PI):
        return lin_gain * omega
    th = np.tanh(mw1 * omega[:, None] + mb1)
    return np.sum(mw2 * (th - np.tanh(mb1)), axis=1)


def _electrical_np(delta, ei, ej, bsus, n):
    pe = np.zeros(n)
    if len(ei):
        f = bsus * np.sin(delta[ei] - delta[ej])
        np.add.at(pe, ei, f)
        np.add.at(pe, ej, -f)
    return pe


def _edge_laplacian_np(v, ei, ej, weights, n):
    out = np.zeros(n)
    if len(ei):
        f = weights * (v[ei] - v[ej])
        np.add.at(out, ei, f)
        np.add.at(out, ej, -f)
    return out


def _rollout_forward_np(kind, wpos, bpos, wneg, bneg, lin_gain, mw1, mb1, mw2,
                        k, integral_on,
                        delta0, omega0, s0, p, damp, ccost, minv_t, dist_t,
                        ei, ej, bsus, ulo, uhi, dt):
    T = minv_t.shape[0]
    n = delta0.shape[0]
    delta_h = np.empty((T + 1, n))
    omega_h = np.empty((T + 1, n))
    s_h = np.empty((T + 1, n))
    u_h = np.empty((T, n))
    a_h = np.empty((T, n))
    delta_h[0], omega_h[0], s_h[0] = delta0, omega0, s0
    ones_w = np.ones(len(ei))
    for t in range(T):
        delta, omega, s = delta_h[t], omega_h[t], s_h[t]
        a = -_prop_eval_np(kind, omega, wpos, bpos, wneg, bneg, lin_gain, mw1, mb1, mw2)
        if integral_on:
            a = a + k * s
        a_h[t] = a
        u_h[t] = np.clip(a, ulo, uhi)
        pe = _electrical_np(delta, ei, ej, bsus, n)
        delta_h[t + 1] = delta + dt * (omega - omega.mean())
        omega_h[t + 1] = omega + dt * minv_t[t] * (p - damp * omega + u_h[t] - pe + dist_t[t])
        if integral_on:
            lap = _edge_laplacian_np(ccost * s, ei, ej, ones_w, n)
            s_h[t + 1] = s + dt * (-omega / ccost - k * lap)
        else:
            s_h[t + 1] = s
    return delta_h, omega_h, s_h, u_h, a_h


def _rollout_backward_np(kind, wpos, bpos, wneg, bneg, lin_gain, mw1, mb1, mw2,
                         k, integral_on,
                         delta_h, omega_h, s_h, u_h, a_h,
                         p, damp, ccost, minv_t,
                         ei, ej, bsus, ulo, uhi, dt, lam):
    T = u_h.shape[0]
    n = delta_h.shape[1]
    invT = 1.0 / T
    ones_w = np.ones(len(ei))

    g_wpos = np.zeros(wpos.shape)
    g_bpos = np.zeros(bpos.shape)
    g_wneg = np.zeros(wneg.shape)
    g_bneg = np.zeros(bneg.shape)
    g_lin = np.zeros(lin_gain.shape)
    g_mw1 = np.zeros(mw1.shape)
    g_mb1 = np.zeros(mb1.shape)
    g_mw2 = np.zeros(mw2.shape)
    g_k = 0.0
    loss = 0.0

    gd = np.zeros(n)
    go = np.zeros(n)
    gs = np.zeros(n)

    for t in range(T - 1, -1, -1):
        delta, omega, s, u, a = delta_h[t], omega_h[t], s_h[t], u_h[t], a_h[t]
        minv = minv_t[t]

        nrm2 = float(np.linalg.norm(omega))
        imax = int(np.argmax(np.abs(omega)))
        loss += invT * (0.5 * np.sum(ccost * u * u) + lam * (nrm2 + abs(omega[imax])))

        gu = invT * ccost * u + dt * minv * go
        active = (a > ulo) & (a < uhi)
        ga = np.where(active, gu, 0.0)
        gpi = -ga

        if kind in (K_MONO_PI, K_MONO_NN):
            actp = (omega[:, None] + bpos) > 0
            actn = (-omega[:, None] + bneg) > 0
            g_wpos += gpi[:, None] * np.where(actp, omega[:, None] + bpos, 0.0)
            g_bpos += gpi[:, None] * np.where(actp, wpos, 0.0)
            g_wneg += gpi[:, None] * np.where(actn, -omega[:, None] + bneg, 0.0)
            g_bneg += gpi[:, None] * np.where(actn, wneg, 0.0)
            slope = np.sum(wpos * actp, axis=1) - np.sum(wneg * actn, axis=1)
        elif kind in (K_DROOP, K_LIN_PI):
            g_lin += gpi * omega
            slope = lin_gain.copy()
        else:
            pre = mw1 * omega[:, None] + mb1
            th = np.tanh(pre)
            th0 = np.tanh(mb1)
            sech2 = 1.0 - th * th
            g_mw2 += gpi[:, None] * (th - th0)
            g_mw1 += gpi[:, None] * sech2 * mw2 * omega[:, None]
            g_mb1 += gpi[:, None] * mw2 * (sech2 - (1.0 - th0 * th0))
            slope = np.sum(mw2 * mw1 * sech2, axis=1)

        if integral_on:
            g_k += float(np.sum(ga * s))

        gnorm = np.zeros(n)
        if nrm2 > 0.0:
            gnorm = omega / nrm2
            gnorm[imax] += 1.0 if omega[imax] > 0.0 else -1.0
        go_new = (invT * lam * gnorm
                  + dt * (gd - gd.mean())
                  + go * (1.0 - dt * minv * damp)
                  - slope * ga)
        if integral_on:
            go_new = go_new - dt * gs / ccost

        gd_new = gd - dt * _edge_laplacian_np(
            minv * go, ei, ej, bsus * np.cos(delta[ei] - delta[ej]) if len(ei) else bsus, n)

        if integral_on:
            gs_new = k * ga + gs - dt * k * ccost * _edge_laplacian_np(gs, ei, ej, ones_w, n)
            g_k -= dt * float(np.sum(_edge_laplacian_np(ccost * s, ei, ej, ones_w, n) * gs))
        else:
            gs_new = gs

        gd, go, gs = gd_new, go_new, gs_new

    return g_wpos, g_bpos, g_wneg, g_bneg, g_lin, g_mw1, g_mb1, g_mw2, g_k, gs, loss


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def rollout_forward(*args, use_numba: bool | None = None):
    use = USE_NUMBA if use_numba is None else (use_numba and HAVE_NUMBA)
    impl = _rollout_forward_nb if use else _rollout_forward_np
    return impl(*args)


def rollout_backward(*args, use_numba: bool | None = None):
    use = USE_NUMBA if use_numba is None else (use_numba and HAVE_NUMBA)
    impl = _rollout_backward_nb if use else _rollout_backward_np
    return impl(*args)
