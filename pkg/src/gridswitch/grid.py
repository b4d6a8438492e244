"""Network data, the inertia switching process, and disturbance profiles.

All quantities are per-unit on a common system base.  A grid is an
undirected connected graph; every bus carries a swing equation with its
own damping, nominal injection, and a per-mode inertia constant.  The
inertia mode evolves as a Markov chain sampled at a fixed dwell interval.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ModelError

# Three-mode chain used by the bundled scenarios: mode labels are
# multipliers on the standard per-bus inertia, the initial mode is drawn
# once, and transitions fire every dwell interval.
DEFAULT_MODE_LABELS = (0.3, 1.0, 5.0)
DEFAULT_INIT_PROBS = (0.10, 0.45, 0.45)
DEFAULT_TRANSITIONS = (
    (0.5, 0.5, 0.0),
    (0.3, 0.4, 0.3),
    (0.0, 0.5, 0.5),
)


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.asarray(a, dtype=float).copy()
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class GridModel:
    """Immutable network description.

    edges          list of unordered bus pairs (0-based indices)
    susceptance    per-edge line susceptance, > 0
    damping        per-bus frequency response coefficient, > 0
    injection      per-bus nominal net power injection
    cost           per-bus control cost coefficient, > 0
    inertia_modes  (m, n) per-mode diagonal inertia, all entries > 0
    mode_labels    display label per mode (inertia scale factors)
    u_min, u_max   per-bus action bounds with u_min < 0 < u_max
    base_hz        nominal frequency used to convert per-unit deviations
    """

    edges: tuple[tuple[int, int], ...]
    susceptance: np.ndarray
    damping: np.ndarray
    injection: np.ndarray
    cost: np.ndarray
    inertia_modes: np.ndarray
    mode_labels: tuple[float, ...]
    u_min: np.ndarray
    u_max: np.ndarray
    base_hz: float = 60.0

    def __post_init__(self):
        n = len(self.damping)
        object.__setattr__(self, "edges", tuple((int(i), int(j)) for i, j in self.edges))
        for name in ("susceptance", "damping", "injection", "cost", "u_min", "u_max"):
            object.__setattr__(self, name, _readonly(getattr(self, name)))
        object.__setattr__(self, "inertia_modes", _readonly(np.atleast_2d(self.inertia_modes)))
        object.__setattr__(self, "mode_labels", tuple(float(x) for x in self.mode_labels))

        if n < 1:
            raise ModelError("grid needs at least one bus")
        for name in ("damping", "injection", "cost", "u_min", "u_max"):
            if len(getattr(self, name)) != n:
                raise ModelError(f"{name}: expected {n} per-bus values")
        if self.inertia_modes.shape[1] != n:
            raise ModelError("inertia_modes: per-bus width mismatch")
        if len(self.mode_labels) != self.inertia_modes.shape[0]:
            raise ModelError("mode_labels: one label per inertia mode required")
        if len(self.susceptance) != len(self.edges):
            raise ModelError("susceptance: one value per edge required")

        for i, j in self.edges:
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise ModelError(f"edges: invalid pair ({i}, {j})")
        if np.any(self.susceptance <= 0):
            raise ModelError("susceptance: non-positive line susceptance")
        if np.any(self.damping <= 0):
            raise ModelError("damping: non-positive damping")
        if np.any(self.cost <= 0):
            raise ModelError("cost: non-positive cost coefficient")
        if np.any(self.inertia_modes <= 0):
            raise ModelError("inertia_modes: non-positive inertia")
        if np.any(self.u_min >= 0) or np.any(self.u_max <= 0):
            raise ModelError("u_min/u_max: bounds must straddle zero")
        if self.base_hz <= 0:
            raise ModelError("base_hz: must be positive")
        if n > 1 and not self._connected():
            raise ModelError("edges: graph is disconnected")

    def _connected(self) -> bool:
        n = self.n
        adj = [[] for _ in range(n)]
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        seen = np.zeros(n, dtype=bool)
        stack = [0]
        seen[0] = True
        while stack:
            for nb in adj[stack.pop()]:
                if not seen[nb]:
                    seen[nb] = True
                    stack.append(nb)
        return bool(seen.all())

    @property
    def n(self) -> int:
        return len(self.damping)

    @property
    def n_modes(self) -> int:
        return self.inertia_modes.shape[0]

    @property
    def edge_index(self) -> tuple[np.ndarray, np.ndarray]:
        """Tail/head bus index arrays, one entry per edge."""
        if not self.edges:
            z = np.zeros(0, dtype=np.int64)
            return z, z
        ei = np.array([e[0] for e in self.edges], dtype=np.int64)
        ej = np.array([e[1] for e in self.edges], dtype=np.int64)
        return ei, ej

    def inertia(self, mode: int) -> np.ndarray:
        return self.inertia_modes[mode]

    def with_injection(self, p) -> "GridModel":
        return replace(self, injection=np.asarray(p, dtype=float))

    def with_bounds(self, u_min, u_max) -> "GridModel":
        return replace(
            self,
            u_min=np.broadcast_to(np.asarray(u_min, dtype=float), (self.n,)),
            u_max=np.broadcast_to(np.asarray(u_max, dtype=float), (self.n,)),
        )


def incidence_matrix(model: GridModel) -> np.ndarray:
    """Oriented incidence matrix E, one column per edge (+1 tail, -1 head).

    Columns sum to zero and E @ diag(b) @ E.T is the susceptance-weighted
    graph Laplacian.
    """
    E = np.zeros((model.n, len(model.edges)))
    for col, (i, j) in enumerate(model.edges):
        E[i, col] = 1.0
        E[j, col] = -1.0
    return E


def weighted_laplacian(model: GridModel) -> np.ndarray:
    """E @ diag(susceptance) @ E.T."""
    E = incidence_matrix(model)
    return E @ (model.susceptance[:, None] * E.T)


@dataclass(frozen=True)
class InertiaSchedule:
    """Right-continuous piecewise-constant mode signal.

    switch_times are the interior interval boundaries (strictly
    increasing); modes holds one 0-based mode index per interval, so
    len(modes) == len(switch_times) + 1.  q(t) = modes[k] on
    [switch_times[k-1], switch_times[k]).
    """

    switch_times: np.ndarray
    modes: np.ndarray
    horizon_s: float

    def __post_init__(self):
        st = np.asarray(self.switch_times, dtype=float)
        md = np.asarray(self.modes, dtype=np.int64)
        object.__setattr__(self, "switch_times", st)
        object.__setattr__(self, "modes", md)
        if len(md) != len(st) + 1:
            raise ModelError("schedule: need one mode per interval")
        if len(st) and (np.any(np.diff(st) <= 0) or st[0] <= 0):
            raise ModelError("schedule: switch times must be strictly increasing and positive")
        if np.any(md < 0):
            raise ModelError("schedule: negative mode index")

    def mode_at(self, t: float) -> int:
        return int(self.modes[np.searchsorted(self.switch_times, t, side="right")])

    def mode_steps(self, n_steps: int, dt: float) -> np.ndarray:
        """Mode index for each step k, sampled at t = k * dt."""
        t = np.arange(n_steps) * dt
        return self.modes[np.searchsorted(self.switch_times, t, side="right")]

    def change_times(self) -> np.ndarray:
        """Boundaries where the mode value actually changes."""
        if not len(self.switch_times):
            return np.zeros(0)
        changed = self.modes[1:] != self.modes[:-1]
        return self.switch_times[changed]


def sample_inertia_schedule(
    rng_seed,
    horizon_s: float,
    dwell_s: float,
    *,
    n_modes: int = 3,
    init_probs=None,
    transitions=None,
    dwell_jitter: float = 0.0,
) -> InertiaSchedule:
    """Draw a mode schedule from the Markov transition process.

    The default three-mode chain draws the initial mode from
    (0.10, 0.45, 0.45) and transitions every dwell_s seconds with the
    fixed stay/up/down probabilities.  Any other mode count requires an
    explicit row-stochastic transition matrix.  dwell_jitter > 0 widens
    each dwell interval by a uniform factor in [1-j, 1+j] (off by
    default; the reference process switches on a fixed interval).
    """
    if dwell_s <= 0:
        raise ModelError("dwell_s: must be positive")
    if init_probs is None or transitions is None:
        if n_modes != 3:
            raise ModelError(
                "sample_inertia_schedule: non-3-mode chain requires explicit "
                "init_probs and transitions"
            )
        init_probs = DEFAULT_INIT_PROBS if init_probs is None else init_probs
        transitions = DEFAULT_TRANSITIONS if transitions is None else transitions
    P0 = np.asarray(init_probs, dtype=float)
    T = np.asarray(transitions, dtype=float)
    if P0.shape != (n_modes,) or not np.isclose(P0.sum(), 1.0, atol=1e-12):
        raise ModelError("init_probs: must be a probability vector over the modes")
    if T.shape != (n_modes, n_modes) or np.any(T < 0):
        raise ModelError("transitions: must be a nonnegative (m, m) matrix")
    if not np.allclose(T.sum(axis=1), 1.0, atol=1e-12):
        raise ModelError("transitions: rows must sum to 1")

    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    modes = [int(rng.choice(n_modes, p=P0))]
    times: list[float] = []
    t = 0.0
    while True:
        step = dwell_s
        if dwell_jitter > 0.0:
            step = dwell_s * (1.0 + dwell_jitter * rng.uniform(-1.0, 1.0))
        t += step
        if t >= horizon_s - 1e-12:
            break
        times.append(t)
        modes.append(int(rng.choice(n_modes, p=T[modes[-1]])))
    return InertiaSchedule(np.array(times), np.array(modes), horizon_s)


def constant_schedule(mode: int, horizon_s: float) -> InertiaSchedule:
    return InertiaSchedule(np.zeros(0), np.array([mode]), horizon_s)


@dataclass(frozen=True)
class DisturbanceProfile:
    """Step changes in net load: a list of (time, per-bus step vector).

    Steps accumulate, so the active disturbance at time t is the sum of
    all step vectors with event time <= t.  Events do not depend on the
    state history.
    """

    events: tuple[tuple[float, np.ndarray], ...] = ()
    bound_inf: float | None = None

    def __post_init__(self):
        evs = []
        for t, vec in self.events:
            v = _readonly(vec)
            if not np.isfinite(v).all():
                raise ModelError("disturbance: non-finite step vector")
            if t < 0 or not np.isfinite(t):
                raise ModelError("disturbance: invalid event time")
            if self.bound_inf is not None and np.max(np.abs(v), initial=0.0) > self.bound_inf + 1e-12:
                raise ModelError("disturbance: step exceeds configured bound")
            evs.append((float(t), v))
        evs.sort(key=lambda e: e[0])
        object.__setattr__(self, "events", tuple(evs))

    def step_array(self, n_steps: int, dt: float, n: int) -> np.ndarray:
        """Per-step active disturbance (n_steps, n); events snap to the grid."""
        out = np.zeros((n_steps, n))
        for t, vec in self.events:
            if len(vec) != n:
                raise ModelError("disturbance: step vector length mismatch")
            k = int(np.ceil(t / dt - 1e-9))
            if k < n_steps:
                out[k:] += vec
        return out

    def sup_norm2(self, horizon_s: float) -> float:
        """sup over time of the 2-norm of the active disturbance."""
        best = 0.0
        acc = None
        for t, vec in self.events:
            if t > horizon_s:
                break
            acc = vec.copy() if acc is None else acc + vec
            best = max(best, float(np.linalg.norm(acc)))
        return best


def random_step_profile(rng: np.random.Generator, n: int, times, max_magnitude: float) -> DisturbanceProfile:
    """One uniform step at a single random bus per event time."""
    events = []
    for t in np.atleast_1d(times):
        vec = np.zeros(n)
        vec[int(rng.integers(n))] = rng.uniform(-max_magnitude, max_magnitude)
        events.append((float(t), vec))
    return DisturbanceProfile(tuple(events), bound_inf=max_magnitude)
