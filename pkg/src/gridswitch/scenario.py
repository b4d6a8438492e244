"""Scenario files: plain-text configs bundling a grid, the switching
process, disturbance generation, and training hyperparameters.

The format is sectioned key-value text with space-separated decimal
numbers.  Floats are written with repr() so a save/load round trip is
bit-exact.  Parse failures raise ScenarioError naming the offending
section and key.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field

import numpy as np

from .errors import ScenarioError
from .grid import (DEFAULT_INIT_PROBS, DEFAULT_MODE_LABELS, DEFAULT_TRANSITIONS,
                   DisturbanceProfile, GridModel, InertiaSchedule,
                   random_step_profile, sample_inertia_schedule)
from .switching import SwitchConfig
from .training import TrainConfig

_SECTIONS = ("grid", "modes", "switching", "disturbances", "training")


@dataclass(frozen=True)
class Scenario:
    """Everything one experiment needs, as loaded from a config file."""

    model: GridModel
    dwell_s: float
    init_probs: np.ndarray
    transitions: np.ndarray
    switch: SwitchConfig
    train: TrainConfig
    events: DisturbanceProfile        # scripted step events (may be empty)
    disturbance_times: np.ndarray     # event times for randomized evaluation
    max_disturbance: float
    mode_sequence: np.ndarray | None = None  # optional scripted schedule

    def sample_schedule(self, rng, horizon_s: float) -> InertiaSchedule:
        if self.mode_sequence is not None:
            K = len(self.mode_sequence)
            times = np.arange(1, K) * self.dwell_s
            keep = times < horizon_s
            return InertiaSchedule(times[keep], self.mode_sequence[: keep.sum() + 1], horizon_s)
        return sample_inertia_schedule(
            rng, horizon_s, self.dwell_s, n_modes=self.model.n_modes,
            init_probs=self.init_probs, transitions=self.transitions)

    def sample_disturbances(self, rng) -> DisturbanceProfile:
        if self.events.events:
            return self.events
        return random_step_profile(rng, self.model.n, self.disturbance_times,
                                   self.max_disturbance)


def _parse_sections(text: str) -> dict[str, dict[str, str]]:
    sections: dict[str, dict[str, str]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in _SECTIONS:
                raise ScenarioError(f"line {lineno}: unknown section [{current}]")
            sections.setdefault(current, {})
        elif "=" in line:
            if current is None:
                raise ScenarioError(f"line {lineno}: key outside any section")
            key, _, val = line.partition("=")
            sections[current][key.strip()] = val.strip()
        else:
            raise ScenarioError(f"line {lineno}: expected 'key = value'")
    return sections


class _Section:
    def __init__(self, name: str, data: dict[str, str]):
        self.name = name
        self.data = dict(data)

    def _get(self, key: str) -> str:
        if key not in self.data:
            raise ScenarioError(f"[{self.name}] {key}: missing field")
        return self.data.pop(key)

    def floats(self, key: str, expect: int | None = None) -> np.ndarray:
        raw = self._get(key)
        try:
            vals = np.array([float(x) for x in raw.split()])
        except ValueError:
            raise ScenarioError(f"[{self.name}] {key}: malformed number") from None
        if expect is not None and len(vals) != expect:
            raise ScenarioError(f"[{self.name}] {key}: expected {expect} values, got {len(vals)}")
        return vals

    def scalar(self, key: str, default=None) -> float:
        if default is not None and key not in self.data:
            return float(default)
        try:
            return float(self._get(key))
        except ValueError:
            raise ScenarioError(f"[{self.name}] {key}: malformed number") from None

    def integer(self, key: str, default=None) -> int:
        if default is not None and key not in self.data:
            return int(default)
        try:
            return int(self._get(key))
        except ValueError:
            raise ScenarioError(f"[{self.name}] {key}: malformed integer") from None

    def optional(self, key: str):
        return self.data.pop(key, None)

    def finish(self):
        if self.data:
            extra = ", ".join(sorted(self.data))
            raise ScenarioError(f"[{self.name}]: unknown fields {extra}")


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        text = fh.read()
    return parse_scenario(text)


def parse_scenario(text: str) -> Scenario:
    sections = _parse_sections(text)
    for name in ("grid", "modes"):
        if name not in sections:
            raise ScenarioError(f"[{name}]: missing section")

    g = _Section("grid", sections["grid"])
    n = g.integer("n")
    edges_raw = g._get("edges")
    edges = []
    for tok in edges_raw.split():
        try:
            i, j = tok.split("-")
            edges.append((int(i), int(j)))
        except ValueError:
            raise ScenarioError(f"[grid] edges: malformed pair {tok!r}") from None
    susceptance = g.floats("susceptance", len(edges))
    damping = g.floats("damping", n)
    injection = g.floats("injection", n)
    cost = g.floats("cost", n)
    u_min = g.floats("u_min", n)
    u_max = g.floats("u_max", n)
    base_hz = g.scalar("base_hz", 60.0)
    g.finish()

    m = _Section("modes", sections["modes"])
    labels = m.floats("labels")
    n_modes = len(labels)
    std = m.optional("inertia_std")
    if std is not None:
        std_vals = np.array([float(x) for x in std.split()])
        if len(std_vals) != n:
            raise ScenarioError(f"[modes] inertia_std: expected {n} values")
        inertia = np.outer(labels, std_vals)
    else:
        rows = [m.floats(f"inertia_{q}", n) for q in range(n_modes)]
        inertia = np.vstack(rows)
    m.finish()

    try:
        model = GridModel(tuple(edges), susceptance, damping, injection, cost,
                          inertia, tuple(labels), u_min, u_max, base_hz)
    except Exception as exc:
        raise ScenarioError(f"[grid]: {exc}") from exc

    s = _Section("switching", sections.get("switching", {}))
    dwell = s.scalar("dwell_s", 5.0)
    if dwell <= 0:
        raise ScenarioError("[switching] dwell_s: must be positive")
    if "init_probs" in s.data:
        init_probs = s.floats("init_probs", n_modes)
    else:
        init_probs = np.array(DEFAULT_INIT_PROBS if n_modes == 3 else [1.0 / n_modes] * n_modes)
    if any(f"transition_{q}" in s.data for q in range(n_modes)):
        transitions = np.vstack([s.floats(f"transition_{q}", n_modes) for q in range(n_modes)])
    else:
        transitions = (np.array(DEFAULT_TRANSITIONS) if n_modes == 3
                       else np.full((n_modes, n_modes), 1.0 / n_modes))
    if not np.allclose(transitions.sum(axis=1), 1.0, atol=1e-12):
        raise ScenarioError("[switching] transition rows must sum to 1")
    seq = s.optional("mode_sequence")
    mode_sequence = None
    if seq is not None:
        mode_sequence = np.array([int(x) for x in seq.split()], dtype=np.int64)
        if np.any(mode_sequence < 0) or np.any(mode_sequence >= n_modes):
            raise ScenarioError("[switching] mode_sequence: index out of range")
    try:
        switch = SwitchConfig(
            selection_steps=s.integer("selection_steps", 50),
            trial_steps=s.integer("trial_steps", 300),
            batch_steps=s.integer("batch_steps", 5),
            rate=s.scalar("bandit_rate", 5e-3),
            trigger_hz=s.scalar("trigger_hz", 0.01),
        )
    except Exception as exc:
        raise ScenarioError(f"[switching]: {exc}") from exc
    s.finish()

    d = _Section("disturbances", sections.get("disturbances", {}))
    max_dist = d.scalar("max_step", 0.4)
    if "times" in d.data:
        times = d.floats("times")
    else:
        times = np.array([0.1, 7.0])
    events = []
    idx = 0
    while f"event_{idx}" in d.data:
        raw = d._get(f"event_{idx}")
        try:
            t_part, _, vec_part = raw.partition("|")
            vec = np.array([float(x) for x in vec_part.split()])
            if len(vec) != n:
                raise ValueError
            events.append((float(t_part), vec))
        except ValueError:
            raise ScenarioError(f"[disturbances] event_{idx}: malformed event") from None
        idx += 1
    d.finish()
    profile = DisturbanceProfile(tuple(events))

    t = _Section("training", sections.get("training", {}))
    try:
        train = TrainConfig(
            episodes=t.integer("episodes", 60),
            trajectories=t.integer("trajectories", 24),
            horizon_steps=t.integer("horizon_steps", 300),
            dt=t.scalar("dt", 0.01),
            learning_rate=t.scalar("learning_rate", 0.05),
            lr_decay=t.scalar("lr_decay", 0.7),
            lr_decay_every=t.integer("lr_decay_every", 50),
            freq_weight=t.scalar("freq_weight", 10.0),
            adam_beta1=t.scalar("adam_beta1", 0.9),
            adam_beta2=t.scalar("adam_beta2", 0.999),
            adam_eps=t.scalar("adam_eps", 1e-8),
            seed=t.integer("seed", 0),
            max_disturbance=max_dist,
            hidden_units=t.integer("hidden_units", 20),
        )
    except Exception as exc:
        raise ScenarioError(f"[training]: {exc}") from exc
    t.finish()

    return Scenario(model, dwell, init_probs, transitions, switch, train,
                    profile, times, max_dist, mode_sequence)


def save_scenario(sc: Scenario, path):
    model = sc.model
    r = lambda x: repr(float(x))
    vec = lambda a: " ".join(r(x) for x in a)
    lines = ["[grid]",
             f"n = {model.n}",
             "edges = " + " ".join(f"{i}-{j}" for i, j in model.edges),
             f"susceptance = {vec(model.susceptance)}",
             f"damping = {vec(model.damping)}",
             f"injection = {vec(model.injection)}",
             f"cost = {vec(model.cost)}",
             f"u_min = {vec(model.u_min)}",
             f"u_max = {vec(model.u_max)}",
             f"base_hz = {r(model.base_hz)}",
             "",
             "[modes]",
             f"labels = {vec(model.mode_labels)}"]
    for q in range(model.n_modes):
        lines.append(f"inertia_{q} = {vec(model.inertia_modes[q])}")
    lines += ["",
              "[switching]",
              f"dwell_s = {r(sc.dwell_s)}",
              f"init_probs = {vec(sc.init_probs)}"]
    for q in range(model.n_modes):
        lines.append(f"transition_{q} = {vec(sc.transitions[q])}")
    if sc.mode_sequence is not None:
        lines.append("mode_sequence = " + " ".join(str(int(x)) for x in sc.mode_sequence))
    lines += [f"trigger_hz = {r(sc.switch.trigger_hz)}",
              f"selection_steps = {sc.switch.selection_steps}",
              f"trial_steps = {sc.switch.trial_steps}",
              f"batch_steps = {sc.switch.batch_steps}",
              f"bandit_rate = {r(sc.switch.rate)}",
              "",
              "[disturbances]",
              f"max_step = {r(sc.max_disturbance)}",
              f"times = {vec(sc.disturbance_times)}"]
    for i, (t, v) in enumerate(sc.events.events):
        lines.append(f"event_{i} = {r(t)} | {vec(v)}")
    tr = sc.train
    lines += ["",
              "[training]",
              f"episodes = {tr.episodes}",
              f"trajectories = {tr.trajectories}",
              f"horizon_steps = {tr.horizon_steps}",
              f"dt = {r(tr.dt)}",
              f"learning_rate = {r(tr.learning_rate)}",
              f"lr_decay = {r(tr.lr_decay)}",
              f"lr_decay_every = {tr.lr_decay_every}",
              f"freq_weight = {r(tr.freq_weight)}",
              f"adam_beta1 = {r(tr.adam_beta1)}",
              f"adam_beta2 = {r(tr.adam_beta2)}",
              f"adam_eps = {r(tr.adam_eps)}",
              f"seed = {tr.seed}",
              f"hidden_units = {tr.hidden_units}",
              ""]
    with open(path, "w") as fh:
        fh.write("\n".join(lines))


def bundled_path(name: str):
    """Path to a scenario shipped with the package (triangle3, ne9, ne39)."""
    res = importlib.resources.files("gridswitch.data").joinpath(f"{name}.cfg")
    if not res.is_file():
        raise ScenarioError(f"no bundled scenario named {name!r}")
    return res


def load_case(name: str) -> Scenario:
    return parse_scenario(bundled_path(name).read_text())
