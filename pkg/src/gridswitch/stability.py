"""Equilibria, the composite Lyapunov function, and sampled decay certificates.

The closed loop with any monotone proportional-integral controller has a
unique equilibrium whose location depends only on the network data and
the integral gain, never on the inertia mode or the proportional term.
Around it, a composite energy function (kinetic + potential + integral
Bregman distance + two small cross terms) decays exponentially; the
constants of that decay are estimated here by sampling the admissible
angle region and the controller's slope range.  Certificates produced
this way are explicitly labeled as sampled: they testify to what the
drawn samples showed, not to a formal proof.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .controllers import Controller
from .errors import CertificationError, EquilibriumError, ModelError
from .grid import GridModel, InertiaSchedule, incidence_matrix, weighted_laplacian

ANGLE_MARGIN = 0.05  # rad kept clear of the +-pi/2 edge-gap boundary


class DomainWarning(UserWarning):
    """State left the certified angle region; values are extrapolations."""


@dataclass(frozen=True)
class Equilibrium:
    delta_star: np.ndarray
    omega_star: np.ndarray
    s_star: np.ndarray
    gamma: float
    k: float

    @property
    def ks_star(self) -> np.ndarray:
        return self.k * self.s_star


def solve_equilibrium(model: GridModel, k: float, mode: int | None = None,
                      tol: float = 1e-12, max_iter: int = 60) -> Equilibrium:
    """Damped-Newton solve of the closed-loop equilibrium.

    gamma balances the net injection against the cost-weighted integral
    action; the angles then solve the sine flow equation on the zero-sum
    subspace.  The result is independent of the inertia mode (mode is
    accepted only so callers can record which mode they asked about).
    """
    if k <= 0:
        raise ModelError("solve_equilibrium: k must be positive")
    n = model.n
    cinv = 1.0 / model.cost
    gamma = -float(model.injection.sum()) / float(cinv.sum())
    ks_star = gamma * cinv
    target = model.injection + ks_star

    ei, ej = model.edge_index
    b = model.susceptance
    delta = np.zeros(n)

    def residual(d):
        pe = np.zeros(n)
        if len(ei):
            f = b * np.sin(d[ei] - d[ej])
            np.add.at(pe, ei, f)
            np.add.at(pe, ej, -f)
        return pe - target

    r = residual(delta)
    for _ in range(max_iter):
        if np.max(np.abs(r)) < tol:
            break
        w = b * np.cos(delta[ei] - delta[ej]) if len(ei) else b
        J = np.zeros((n, n))
        for e in range(len(ei)):
            i, j = ei[e], ej[e]
            J[i, i] += w[e]
            J[j, j] += w[e]
            J[i, j] -= w[e]
            J[j, i] -= w[e]
        # grounding the zero-sum direction keeps the solve nonsingular
        J += np.ones((n, n)) / n
        try:
            dstep = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError as exc:
            raise EquilibriumError(f"equilibrium solve: singular Jacobian ({exc})") from exc
        alpha = 1.0
        base = np.linalg.norm(r)
        while alpha > 1e-6:
            cand = delta + alpha * dstep
            rc = residual(cand)
            if np.linalg.norm(rc) < (1.0 - 0.25 * alpha) * base:
                delta, r = cand, rc
                break
            alpha *= 0.5
        else:
            raise EquilibriumError("equilibrium solve: line search stalled")
    else:
        raise EquilibriumError("equilibrium solve: Newton did not converge")

    if np.max(np.abs(r)) >= 1e-10:
        raise EquilibriumError("equilibrium solve: residual above tolerance")
    if len(ei) and np.max(np.abs(delta[ei] - delta[ej])) >= np.pi / 2:
        raise EquilibriumError("equilibrium solve: edge angle gap reached pi/2")
    delta = delta - delta.mean()
    return Equilibrium(delta, np.zeros(n), ks_star / k, gamma, float(k))


def potential_term(delta, eq: Equilibrium, model: GridModel) -> float:
    """Bregman distance of the network potential energy from the equilibrium."""
    ei, ej = model.edge_index
    if not len(ei):
        return 0.0
    d = np.asarray(delta)[ei] - np.asarray(delta)[ej]
    ds = eq.delta_star[ei] - eq.delta_star[ej]
    return float(np.sum(model.susceptance * (np.cos(ds) - np.cos(d) - np.sin(ds) * (d - ds))))


def in_domain(delta, model: GridModel, margin: float = 0.0) -> bool:
    ei, ej = model.edge_index
    if not len(ei):
        return True
    gaps = np.asarray(delta)[ei] - np.asarray(delta)[ej]
    return bool(np.max(np.abs(gaps)) < np.pi / 2 - margin)


def lyapunov_value(state, eq: Equilibrium, model: GridModel, mode: int,
                   eps1: float, eps2: float) -> float:
    """Composite energy: kinetic + potential + cross + integral terms.

    Depends on the inertia mode and on the shared integral gain (through
    the equilibrium), but not on which controller is acting; that is what
    makes it a common function for a whole pool.
    """
    M = model.inertia(mode)
    delta = np.asarray(state.delta, dtype=float)
    omega = np.asarray(state.omega, dtype=float)
    s = np.asarray(state.s, dtype=float)
    if not in_domain(delta, model):
        warnings.warn("state outside the certified angle region", DomainWarning)

    kinetic = 0.5 * float(np.sum(M * omega * omega))
    wp = potential_term(delta, eq, model)
    pe = _pe(delta, model)
    pes = _pe(eq.delta_star, model)
    wc = float(np.sum((pe - pes) * model.cost * M * omega))
    k = eq.k
    ks = k * s
    bregman = float(np.sum(model.cost * (ks - eq.ks_star) ** 2)) / (2.0 * k)
    cross = float(np.sum(s - eq.s_star) * np.sum(M * omega))
    return kinetic + wp + eps1 * wc + bregman - eps2 * cross


def _pe(delta, model):
    ei, ej = model.edge_index
    pe = np.zeros(model.n)
    if len(ei):
        f = model.susceptance * np.sin(delta[ei] - delta[ej])
        np.add.at(pe, ei, f)
        np.add.at(pe, ej, -f)
    return pe


def state_error(state, eq: Equilibrium) -> float:
    """2-norm of [delta - delta*, omega, k s - k s*]."""
    return float(np.sqrt(
        np.sum((state.delta - eq.delta_star) ** 2)
        + np.sum(state.omega ** 2)
        + np.sum((eq.k * state.s - eq.ks_star) ** 2)))


@dataclass(frozen=True)
class IssCertificate:
    """Sampled exponential input-to-state decay constants for one mode.

    a1/a2 sandwich the energy between norms of the state error, a3/a4
    bound its decay and disturbance coupling, and (kappa, rho, beta) are
    the resulting trajectory-envelope constants.  sampled_* fields record
    how the minimum eigenvalue estimate was produced; the certificate is
    only as strong as that sampling.
    """

    mode: int
    k: float
    eps1: float
    eps2: float
    eta1: float
    eta2: float
    a1: float
    a2: float
    a3: float
    a4: float
    alpha1: float
    alpha2: float
    kappa: float
    rho: float
    beta: float
    sampled_min_eig: float
    sample_count: int
    seed: int
    slope_max: float

    def __post_init__(self):
        for name in ("a1", "a2", "a3", "a4", "alpha1", "alpha2", "kappa", "beta"):
            if getattr(self, name) <= 0:
                raise CertificationError(f"certificate: {name} must be positive")
        if not (0 < self.rho < 1):
            raise CertificationError("certificate: rho must lie in (0, 1)")
        if self.a1 > self.a2:
            raise CertificationError("certificate: a1 must not exceed a2")


def _eta_bounds(model: GridModel) -> tuple[float, float]:
    """Curvature bounds of the potential over the margin-shrunk angle region.

    The per-edge potential has second derivative cos(gap), which stays in
    [sin(margin), 1] on the admissible region, so the potential term is
    sandwiched by the weighted Laplacian's extreme nonzero eigenvalues
    scaled by those curvatures.
    """
    L = weighted_laplacian(model)
    vals = np.linalg.eigvalsh(L)
    lam2 = vals[1] if model.n > 1 else 0.0
    lam_max = vals[-1]
    eta1 = float(np.sin(ANGLE_MARGIN) * lam2)
    eta2 = float(lam_max)
    return eta1, eta2


def _q_blocks(model, eps1, eps2, k, C, D, K, ones, H, M):
    """Decay-coupling matrix; its symmetric part must be positive definite."""
    n = model.n
    E = incidence_matrix(model)
    Cm = C @ (E @ E.T) @ C
    Q = np.zeros((3 * n, 3 * n))
    Q[:n, :n] = eps1 * C
    Q[:n, n:2 * n] = eps1 * C @ (D + K)
    Q[:n, 2 * n:] = -eps1 * C
    Q[n:2 * n, n:2 * n] = D - eps1 * M @ C @ H - eps2 * M @ ones @ np.linalg.inv(C)
    Q[n:2 * n, 2 * n:] = -(eps2 / k) * (D + K) @ ones
    Q[2 * n:, 2 * n:] = Cm + (eps2 / k) * ones
    return 0.5 * (Q + Q.T)


def _min_q_eig(model: GridModel, mode: int, eps1: float, eps2: float, k: float,
               slope_max: np.ndarray, eq: Equilibrium, samples: int,
               rng: np.random.Generator) -> float:
    """Smallest symmetric-part eigenvalue over sampled angles and slopes.

    The slope matrix enters affinely, so its box is probed at the all-low
    and all-high corners plus random vertices; angles are drawn inside
    the margin-shrunk region around the equilibrium.
    """
    n = model.n
    ei, ej = model.edge_index
    C = np.diag(model.cost)
    D = np.diag(model.damping)
    ones = np.ones((n, n))
    M = np.diag(model.inertia(mode))
    E = incidence_matrix(model)

    def q_eig(delta, slopes):
        cos_gaps = np.cos(delta[ei] - delta[ej]) if len(ei) else np.zeros(0)
        W = model.susceptance * cos_gaps
        H = E @ (W[:, None] * E.T) if len(ei) else np.zeros((n, n))
        Q = _q_blocks(model, eps1, eps2, k, C, D, np.diag(slopes), ones, H, M)
        return float(np.linalg.eigvalsh(Q)[0])

    best = np.inf
    corner_slopes = [np.zeros(n), slope_max.copy()]
    deltas = [eq.delta_star.copy()]
    for _ in range(samples):
        deltas.append(_sample_delta(model, eq, rng))
    for d in deltas[: max(2, samples // 4 + 1)]:
        for sl in corner_slopes:
            best = min(best, q_eig(d, sl))
    for d in deltas:
        vert = np.where(rng.random(n) < 0.5, 0.0, slope_max)
        best = min(best, q_eig(d, vert))
        best = min(best, q_eig(d, rng.uniform(0.0, 1.0, n) * slope_max))
    return best


def _sample_delta(model: GridModel, eq: Equilibrium, rng: np.random.Generator) -> np.ndarray:
    """Uniform ray draw inside the margin-shrunk angle region around delta*."""
    n = model.n
    ei, ej = model.edge_index
    if not len(ei):
        return eq.delta_star.copy()
    direction = rng.standard_normal(n)
    direction -= direction.mean()
    norm = np.linalg.norm(direction)
    if norm < 1e-12:
        return eq.delta_star.copy()
    direction /= norm
    gap_dir = direction[ei] - direction[ej]
    gap_star = eq.delta_star[ei] - eq.delta_star[ej]
    limit = np.pi / 2 - ANGLE_MARGIN
    t_max = np.inf
    for gd, gst in zip(gap_dir, gap_star):
        if gd > 1e-12:
            t_max = min(t_max, (limit - gst) / gd)
        elif gd < -1e-12:
            t_max = min(t_max, (-limit - gst) / gd)
    if not np.isfinite(t_max) or t_max <= 0:
        return eq.delta_star.copy()
    return eq.delta_star + rng.uniform(0.0, t_max) * direction


def compute_certificate(model: GridModel, mode: int, controller: Controller, k: float,
                        sample_count: int = 400, seed: int = 0,
                        eps1: float | None = None, eps2: float | None = None,
                        adapt: bool = True) -> IssCertificate:
    """Estimate exponential-decay constants for one mode and controller.

    The cross-term weights start at 1e-2 and are halved together until
    both the energy sandwich constant a1 and the sampled minimum
    eigenvalue of the decay matrix are positive (at most 30 halvings).
    Passing explicit eps values with adapt=False exercises the failure
    path instead.
    """
    if not hasattr(controller, "max_slope"):
        raise ModelError("compute_certificate: controller must expose max_slope()")
    eq = solve_equilibrium(model, k)
    eta1, eta2 = _eta_bounds(model)
    slope_max = np.asarray(controller.max_slope(), dtype=float)
    if slope_max.shape == (1,) and model.n > 1:
        slope_max = np.repeat(slope_max, model.n)
    rng = np.random.default_rng(seed)

    M = model.inertia(mode)
    lam_min_M, lam_max_M = float(M.min()), float(M.max())
    cmax, cmin = float(model.cost.max()), float(model.cost.min())
    n = model.n

    e1 = 1e-2 if eps1 is None else eps1
    e2 = 1e-2 if eps2 is None else eps2
    last_fail = ""
    for _ in range(31):
        a1 = 0.5 * min(lam_min_M - (e1 + e2) * lam_max_M ** 2,
                       eta1 - e1 * eta2 ** 2 * cmax ** 2,
                       (k * cmin - e2 * n ** 2) / k ** 2)
        min_eig = _min_q_eig(model, mode, e1, e2, k, slope_max, eq, sample_count,
                             np.random.default_rng(seed))
        if a1 > 0 and min_eig > 0:
            break
        last_fail = f"a1 = {a1:.3e}, min_eig = {min_eig:.3e} at eps = ({e1:.3e}, {e2:.3e})"
        if not adapt:
            raise CertificationError(f"certificate infeasible: {last_fail}")
        e1 *= 0.5
        e2 *= 0.5
    else:
        raise CertificationError(f"no feasible cross-term weights found: {last_fail}")

    a2 = 0.5 * max(lam_max_M + (e1 + e2) * lam_max_M ** 2,
                   eta2 + e1 * eta2 ** 2 * cmax ** 2,
                   (k * cmax + e2 * n ** 2) / k ** 2)
    a3 = min_eig * min(1.0, eta1 ** 2)
    a4 = float(np.sqrt(max(1.0, eta2 ** 2 * cmax ** 2, n ** 2)))
    alpha1 = a3 / a2
    alpha2 = a4 * np.sqrt(1.0 + e1 ** 2 + (e2 / k) ** 2) / np.sqrt(a1)
    kappa = float(np.sqrt(a2 / a1))
    rho = float(np.exp(-alpha1 / 2.0))
    beta = float(alpha2 / (alpha1 * np.sqrt(a1)))
    return IssCertificate(mode=mode, k=float(k), eps1=e1, eps2=e2, eta1=eta1, eta2=eta2,
                          a1=float(a1), a2=float(a2), a3=float(a3), a4=a4,
                          alpha1=float(alpha1), alpha2=float(alpha2),
                          kappa=kappa, rho=rho, beta=beta,
                          sampled_min_eig=float(min_eig), sample_count=sample_count,
                          seed=seed, slope_max=float(slope_max.max()))


class _PoolSlopes:
    """Shim exposing the elementwise-max slope bound over a controller pool."""

    def __init__(self, pool):
        self._pool = list(pool)

    def max_slope(self):
        bounds = [np.atleast_1d(np.asarray(c.max_slope(), dtype=float)) for c in self._pool]
        width = max(len(b) for b in bounds)
        return np.max([np.broadcast_to(b, (width,)) for b in bounds], axis=0)


def pool_certificates(model: GridModel, pool, k: float, sample_count: int = 400,
                      seed: int = 0) -> dict[int, IssCertificate]:
    """One certificate per mode, valid for every pool member at once.

    The slope box handed to the sampler is the elementwise max over the
    pool, so the certified decay holds under arbitrary switching among
    the members.
    """
    shim = _PoolSlopes(pool)
    return {mode: compute_certificate(model, mode, shim, k, sample_count, seed)
            for mode in range(model.n_modes)}


@dataclass
class EnvelopeReport:
    kappa_star: float
    rho_star: float
    beta_star: float
    alpha_eff: float
    x0_norm: float
    dist_sup: float
    max_ratio: float
    envelope_violations: list
    descent_violations: list
    max_switch_jump: float
    ok: bool


def verify_envelope(traj, eq: Equilibrium, certs: dict[int, IssCertificate],
                    dwell_s: float, model: GridModel, slack: float = 2.0,
                    descent_tol: float = 1e-6, controllers=None) -> EnvelopeReport:
    """Check a trajectory against the pooled decay envelope.

    The pooled constants take the largest kappa and beta over visited
    modes and slow the decay rate by ln(mu)/dwell, where mu is the worst
    energy-sandwich ratio across mode pairs; that accounts for the energy
    jump an inertia switch can cause.  Also checks per-step energy
    descent on disturbance-free, switch-free segments and that the energy
    value does not jump when only the controller changes (when a
    controllers list is supplied, the pre- and post-switch values are
    taken with each controller's own integral gain, so a pool with
    mismatched gains is caught here).
    """
    modes = sorted(set(int(m) for m in traj.mode))
    missing = [m for m in modes if m not in certs]
    if missing:
        raise ModelError(f"verify_envelope: missing certificates for modes {missing}")

    kappa_star = max(certs[m].kappa for m in modes)
    beta_star = max(certs[m].beta for m in modes)
    alpha_min = min(certs[m].alpha1 for m in modes)
    mu = max(certs[a].a2 for a in modes) / min(certs[a].a1 for a in modes)
    alpha_eff = alpha_min - (np.log(mu) / dwell_s if dwell_s > 0 and len(modes) > 1 else 0.0)
    rho_star = float(np.exp(-alpha_eff / 2.0)) if alpha_eff > 0 else 1.0

    x0 = state_error(traj.state_at(0), eq)
    dist_sup = float(np.max(np.linalg.norm(traj.dist, axis=1))) if len(traj) else 0.0

    envelope_violations = []
    max_ratio = 0.0
    times = traj.times
    for t in range(len(traj)):
        xt = state_error(traj.state_at(t), eq)
        bound = slack * (kappa_star * rho_star ** times[t] * x0 + beta_star * dist_sup)
        if bound > 0:
            max_ratio = max(max_ratio, xt / bound)
        if xt > bound + 1e-12:
            envelope_violations.append((float(times[t]), xt, bound))

    descent_violations = []
    for t in range(len(traj) - 1):
        if traj.mode[t] != traj.mode[t + 1]:
            continue
        if np.any(traj.dist[t] != 0.0) or np.any(traj.dist[t + 1] != 0.0):
            continue
        m = int(traj.mode[t])
        cert = certs[m]
        v0 = lyapunov_value(traj.state_at(t), eq, model, m, cert.eps1, cert.eps2)
        v1 = lyapunov_value(traj.state_at(t + 1), eq, model, m, cert.eps1, cert.eps2)
        vdot = (v1 - v0) / traj.dt
        if vdot > -cert.alpha1 * v0 + descent_tol:
            descent_violations.append((float(times[t]), vdot, -cert.alpha1 * v0))

    max_switch_jump = 0.0
    eq_cache: dict[float, Equilibrium] = {eq.k: eq}

    def eq_for(ctrl) -> Equilibrium:
        k = ctrl.k if ctrl.has_integral else eq.k
        if k not in eq_cache:
            eq_cache[k] = solve_equilibrium(model, k)
        return eq_cache[k]

    for t in range(len(traj) - 1):
        if traj.controller_id[t] == traj.controller_id[t + 1]:
            continue
        m = int(traj.mode[t + 1])
        cert = certs[m]
        state = traj.state_at(t + 1)
        if controllers is not None:
            eq_pre = eq_for(controllers[int(traj.controller_id[t])])
            eq_post = eq_for(controllers[int(traj.controller_id[t + 1])])
        else:
            eq_pre = eq_post = eq
        v_pre = lyapunov_value(state, eq_pre, model, m, cert.eps1, cert.eps2)
        v_post = lyapunov_value(state, eq_post, model, m, cert.eps1, cert.eps2)
        max_switch_jump = max(max_switch_jump, abs(v_post - v_pre))

    ok = not envelope_violations and not descent_violations and max_switch_jump < 1e-10
    return EnvelopeReport(kappa_star, rho_star, beta_star, float(alpha_eff), x0, dist_sup,
                          max_ratio, envelope_violations, descent_violations,
                          max_switch_jump, ok)


@dataclass(frozen=True)
class DwellStats:
    n_switches: int
    tau_a: float
    n_o: int = 1


def dwell_time_stats(schedule: InertiaSchedule) -> DwellStats:
    """Count actual mode changes and the largest dwell bound they satisfy.

    Returns the largest tau_a such that the switch count over every
    window [t, T) within the horizon stays below 1 + (T - t)/tau_a.
    """
    times = schedule.change_times()
    K = len(times)
    if K == 0:
        return DwellStats(0, float("inf"))
    tau = float("inf")
    for i in range(K):
        for j in range(i + 1, K):
            # a window just covering switches i..j has j - i + 1 events
            tau = min(tau, (times[j] - times[i]) / (j - i))
    if K >= 1:
        tau = min(tau, float(schedule.horizon_s))
    return DwellStats(int(K), float(tau))


def save_certificate(cert: IssCertificate, path):
    with open(path, "w") as fh:
        fh.write("# sampled exponential-decay certificate\n")
        for name in ("mode", "k", "eps1", "eps2", "eta1", "eta2", "a1", "a2", "a3", "a4",
                     "alpha1", "alpha2", "kappa", "rho", "beta", "sampled_min_eig",
                     "sample_count", "seed", "slope_max"):
            fh.write(f"{name} = {getattr(cert, name)!r}\n")


def load_certificate(path) -> IssCertificate:
    fields = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            fields[key.strip()] = val.strip()
    ints = {"mode", "sample_count", "seed"}
    kwargs = {k: (int(v) if k in ints else float(v)) for k, v in fields.items()}
    return IssCertificate(**kwargs)
