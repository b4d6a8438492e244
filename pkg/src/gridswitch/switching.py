"""Online event-triggered controller selection.

A three-phase state machine drives which pool member acts at each step:

  deployment  commit to argmax of the selection probabilities until the
              frequency deviation exceeds the trigger threshold
  selection   run batched adversarial-bandit exploration for n_s steps:
              each batch samples an arm from P, acts with it for up to
              tau steps, then charges the importance-weighted batch cost
              to that arm and refreshes P by exponential weights
  trial       commit to the current argmax for n_t steps, then clear the
              trigger flag (re-triggering immediately if the deviation
              is still above threshold)

Accumulated costs persist across triggered episodes unless the state is
explicitly configured to reset per event.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ModelError

PHASE_DEPLOYMENT = "deployment"
PHASE_SELECTION = "selection"
PHASE_TRIAL = "trial"


@dataclass(frozen=True)
class SwitchConfig:
    selection_steps: int = 50      # total steps of one selection phase
    trial_steps: int = 300         # steps committed after selection
    batch_steps: int = 5           # arm is held for this many steps
    rate: float = 5e-3             # exponential-weights learning rate
    trigger_hz: float = 0.01       # frequency-deviation trigger threshold
    reset_per_event: bool = False  # fresh accumulated costs per trigger

    def __post_init__(self):
        if self.selection_steps < 1 or self.trial_steps < 1 or self.batch_steps < 1:
            raise ModelError("switch config: phase lengths must be >= 1")
        if self.rate <= 0:
            raise ModelError("switch config: learning rate must be positive")
        if self.batch_steps > self.selection_steps:
            raise ModelError("switch config: batch length cannot exceed the selection phase")
        if self.trigger_hz <= 0:
            raise ModelError("switch config: trigger threshold must be positive")


def event_trigger(omega, trigger_hz: float, base_hz: float) -> bool:
    """True iff the largest per-unit deviation exceeds trigger_hz (strict)."""
    omega = np.asarray(omega, dtype=float)
    return bool(np.max(np.abs(omega), initial=0.0) * base_hz > trigger_hz)


def step_cost(u, omega, cost, freq_weight: float) -> float:
    """Quadratic control cost plus weighted 2- and max-norm of the deviation."""
    u = np.asarray(u, dtype=float)
    omega = np.asarray(omega, dtype=float)
    return float(0.5 * np.sum(cost * u * u)
                 + freq_weight * (np.linalg.norm(omega) + np.max(np.abs(omega), initial=0.0)))


def batch_cost(trajectory, model, freq_weight: float, start: int = 0, stop: int | None = None) -> float:
    """Mean step cost over the half-open window [start, stop) of a trajectory."""
    stop = len(trajectory) if stop is None else stop
    if stop <= start:
        raise ModelError("batch_cost: empty slice")
    total = 0.0
    for t in range(start, stop):
        total += step_cost(trajectory.u[t], trajectory.omega[t], model.cost, freq_weight)
    return total / (stop - start)


def bandit_update(g_tilde: np.ndarray, probs: np.ndarray, chosen: int, g: float, rate: float):
    """Charge the chosen arm its importance-weighted cost and refresh P.

    Returns new (g_tilde, probs).  The softmax subtracts the max exponent
    so large accumulated costs cannot overflow.
    """
    if probs[chosen] <= 0.0:
        raise ModelError("bandit_update: chosen arm has non-positive probability")
    g_tilde = g_tilde.copy()
    g_tilde[chosen] += g / probs[chosen]
    z = -rate * g_tilde
    z -= z.max()
    w = np.exp(z)
    return g_tilde, w / w.sum()


@dataclass
class SwitcherState:
    probs: np.ndarray
    g_tilde: np.ndarray
    phase: str = PHASE_DEPLOYMENT
    batch_index: int = 0
    steps_into_batch: int = 0
    batch_cost_sum: float = 0.0
    selection_steps_done: int = 0
    active: int = 0
    committed: int = 0
    trial_left: int = 0

    @classmethod
    def fresh(cls, m: int) -> "SwitcherState":
        return cls(np.full(m, 1.0 / m), np.zeros(m))


@dataclass
class SwitchLogRow:
    t: int
    phase: str
    batch: int
    arm: int
    batch_cost: float  # nan except on the step that closes a batch
    probs: np.ndarray


class OnlineSwitcher:
    """Per-simulation instance of the selection state machine.

    Call advance(omega) before computing the step's action to learn which
    pool member acts, then record_cost(c) with that step's instantaneous
    cost after stepping the plant.  Arm draws use a dedicated RNG stream.
    """

    def __init__(self, m: int, config: SwitchConfig, base_hz: float, rng):
        self.m = m
        self.config = config
        self.base_hz = base_hz
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.state = SwitcherState.fresh(m)
        self.log: list[SwitchLogRow] = []
        self._t = 0
        self._last_batch_cost = float("nan")

    def _sample_arm(self) -> int:
        # inverse-CDF draw over the selection probabilities
        r = self.rng.random()
        c = 0.0
        for i, p in enumerate(self.state.probs):
            c += p
            if r < c:
                return i
        return self.m - 1

    def _batch_length(self, batch_index: int) -> int:
        start = batch_index * self.config.batch_steps
        return min(self.config.batch_steps, self.config.selection_steps - start)

    def advance(self, omega) -> int:
        st = self.state
        if st.phase == PHASE_DEPLOYMENT:
            if event_trigger(omega, self.config.trigger_hz, self.base_hz):
                st.phase = PHASE_SELECTION
                st.batch_index = 0
                st.steps_into_batch = 0
                st.batch_cost_sum = 0.0
                st.selection_steps_done = 0
                if self.config.reset_per_event:
                    st.g_tilde = np.zeros(self.m)
                    st.probs = np.full(self.m, 1.0 / self.m)
                st.active = self._sample_arm()
            else:
                st.active = int(np.argmax(st.probs))
        self.log.append(SwitchLogRow(self._t, st.phase, st.batch_index, st.active,
                                     self._last_batch_cost, st.probs.copy()))
        self._last_batch_cost = float("nan")
        self._t += 1
        return st.active

    def record_cost(self, c: float):
        st = self.state
        if st.phase == PHASE_SELECTION:
            st.batch_cost_sum += c
            st.steps_into_batch += 1
            st.selection_steps_done += 1
            if st.steps_into_batch == self._batch_length(st.batch_index):
                g = st.batch_cost_sum / st.steps_into_batch
                st.g_tilde, st.probs = bandit_update(
                    st.g_tilde, st.probs, st.active, g, self.config.rate)
                self._last_batch_cost = g
                st.batch_index += 1
                st.steps_into_batch = 0
                st.batch_cost_sum = 0.0
                if st.selection_steps_done >= self.config.selection_steps:
                    st.phase = PHASE_TRIAL
                    st.committed = int(np.argmax(st.probs))
                    st.active = st.committed
                    st.trial_left = self.config.trial_steps
                else:
                    st.active = self._sample_arm()
        elif st.phase == PHASE_TRIAL:
            st.trial_left -= 1
            if st.trial_left <= 0:
                st.phase = PHASE_DEPLOYMENT


def advance(switcher: OnlineSwitcher, omega) -> tuple[int, SwitcherState]:
    """Functional wrapper over the per-step state machine."""
    return switcher.advance(omega), switcher.state


class OnlineSwitchingPolicy:
    """simulate() adapter: bandit-selected controller per step."""

    def __init__(self, pool, config: SwitchConfig, model, freq_weight: float, rng):
        self.controllers = list(pool)
        self.switcher = OnlineSwitcher(len(self.controllers), config, model.base_hz, rng)
        self._cost = model.cost
        self._freq_weight = freq_weight

    @property
    def log(self):
        return self.switcher.log

    def select(self, omega, mode, t) -> int:
        return self.switcher.advance(omega)

    def record(self, omega, u):
        self.switcher.record_cost(step_cost(u, omega, self._cost, self._freq_weight))


class KnownSwitchingPolicy:
    """Oracle adapter: swap to the mode-matched controller instantly."""

    def __init__(self, pool):
        self.controllers = list(pool)
        self._by_mode = {}
        for i, c in enumerate(self.controllers):
            if c.trained_mode is None:
                raise ModelError("known switching requires mode-labeled controllers")
            self._by_mode[int(c.trained_mode)] = i
        self.log = None

    def select(self, omega, mode, t) -> int:
        try:
            return self._by_mode[mode]
        except KeyError:
            raise ModelError(f"known switching: no controller for mode {mode}") from None

    def record(self, omega, u):
        pass


def write_switch_log(log: list[SwitchLogRow], path, dt: float):
    """Per-step selection log: time, phase, batch index, arm, batch cost, P."""
    if not log:
        raise ModelError("write_switch_log: empty log")
    m = len(log[0].probs)
    header = ["t", "phase", "batch", "arm", "batch_cost"] + [f"P_{i}" for i in range(m)]
    with open(path, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for row in log:
            cells = [repr(row.t * dt), row.phase, str(row.batch), str(row.arm),
                     repr(row.batch_cost)]
            cells.extend(repr(float(p)) for p in row.probs)
            fh.write("\t".join(cells) + "\n")
