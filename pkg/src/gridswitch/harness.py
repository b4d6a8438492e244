"""Experiment driver: cross-mode cost matrices, switching comparisons,
hyperparameter sweeps, and deterministic output files.

Every experiment derives all of its randomness from one master seed via
SeedSequence spawning, and every method inside a comparison sees the
same sampled schedules and disturbances (common random numbers), so
repeated runs with the same spec reproduce output files byte-for-byte.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .controllers import Controller, ControllerPool, MonotonePIController
from .dynamics import FixedPolicy, GridState, Trajectory, export_trajectory, simulate
from .errors import ModelError
from .grid import DisturbanceProfile, GridModel, constant_schedule, random_step_profile
from .scenario import Scenario, save_scenario
from .stability import solve_equilibrium
from .switching import (KnownSwitchingPolicy, OnlineSwitchingPolicy, SwitchConfig,
                        write_switch_log)
from .training import train

TRANSIENT_WINDOW_S = 3.0
POOL_GAIN = 3.0  # shared integral gain for pooled controllers


def train_pool(scenario: Scenario, base_seed: int = 100, freeze_k: float = POOL_GAIN,
               grad_check: bool = False) -> list[Controller]:
    """One controller per inertia mode, trained with a shared integral gain.

    The gain is frozen rather than learned so every pool member keeps the
    same closed-loop equilibrium, which is what makes switching between
    them well-posed.  Controller i is initialized from base_seed + i and
    trained on mode i with the scenario's training config.
    """
    pool = []
    for mode in range(scenario.model.n_modes):
        ctrl = MonotonePIController.init(
            scenario.model.n, d=scenario.train.hidden_units,
            seed=base_seed + mode, k=freeze_k, trained_mode=mode)
        report = train(ctrl, scenario.model, mode, scenario.train,
                       freeze_k=freeze_k, grad_check=grad_check)
        pool.append(report.controller)
    return pool


@dataclass
class EvalMetrics:
    """Per-trajectory transient costs plus their summary statistics.

    freq_deviation and control_cost are means over the transient windows;
    total is their sum per trajectory.  median/p90 are extra diagnostics
    beyond the mean/std pair (costs can be heavy-tailed).
    """

    freq_deviation: np.ndarray
    control_cost: np.ndarray

    def __post_init__(self):
        self.freq_deviation = np.asarray(self.freq_deviation, dtype=float)
        self.control_cost = np.asarray(self.control_cost, dtype=float)

    @property
    def total(self) -> np.ndarray:
        return self.freq_deviation + self.control_cost

    def summary(self) -> dict[str, float]:
        out = {}
        for name, arr in (("total", self.total), ("freq", self.freq_deviation),
                          ("control", self.control_cost)):
            out[f"{name}_mean"] = float(arr.mean())
            out[f"{name}_std"] = float(arr.std())
            out[f"{name}_median"] = float(np.median(arr))
            out[f"{name}_p90"] = float(np.percentile(arr, 90))
        return out


@dataclass
class ExperimentSpec:
    scenario: Scenario
    pool: list[Controller]
    n_trajectories: int = 100
    seed: int = 0
    horizon_s: float = 20.0
    dt: float = 0.01
    methods: tuple[str, ...] = ("known_switching", "online_switching", "fixed")
    out_dir: str | None = None

    def __post_init__(self):
        if self.n_trajectories < 1:
            raise ModelError("experiment: need at least one trajectory")
        if "known_switching" in self.methods:
            modes = set(range(self.scenario.model.n_modes))
            labeled = {c.trained_mode for c in self.pool}
            if labeled != modes:
                raise ModelError(
                    "experiment: known switching needs one pool member per mode")


def window_costs(traj: Trajectory, model: GridModel, freq_weight: float,
                 windows: list[tuple[int, int]]) -> tuple[float, float]:
    """Mean frequency and control cost over the union of step windows."""
    f_parts, c_parts = [], []
    for a, b in windows:
        omega = traj.omega[a:b]
        u = traj.u[a:b]
        f_parts.append(freq_weight * (np.linalg.norm(omega, axis=1)
                                      + np.max(np.abs(omega), axis=1)))
        c_parts.append(0.5 * np.sum(model.cost * u * u, axis=1))
    f = float(np.mean([p.mean() for p in f_parts]))
    c = float(np.mean([p.mean() for p in c_parts]))
    return f, c


def transient_windows(disturbance_times, dt: float, horizon_s: float) -> list[tuple[int, int]]:
    """One window of TRANSIENT_WINDOW_S after each disturbance, on the step grid."""
    T = int(round(horizon_s / dt))
    wlen = int(round(TRANSIENT_WINDOW_S / dt))
    windows = []
    for t in np.atleast_1d(disturbance_times):
        a = int(np.ceil(t / dt - 1e-9))
        windows.append((min(a, T - 1), min(a + wlen, T)))
    return windows


def eval_cross_mode(pool, model: GridModel, modes, n_traj: int, seed: int,
                    freq_weight: float, max_disturbance: float,
                    horizon_s: float = 3.0, dt: float = 0.01):
    """Mean transient cost of each controller under each constant mode.

    Entry (i, q) averages n_traj trajectories of horizon_s seconds with a
    random net-load step at t = 0; the same disturbances are reused for
    every (controller, mode) cell so cells are directly comparable.
    """
    modes = list(modes)
    seeds = np.random.SeedSequence(seed).spawn(n_traj)
    profiles = []
    for ss in seeds:
        rng = np.random.default_rng(ss)
        profiles.append(random_step_profile(rng, model.n, [0.0], max_disturbance))

    matrix = np.zeros((len(pool), len(modes)))
    details = {}
    for ci, ctrl in enumerate(pool):
        eq = solve_equilibrium(model, ctrl.k if ctrl.has_integral else 1.0)
        x0 = GridState(eq.delta_star.copy(), np.zeros(model.n),
                       eq.s_star.copy() if ctrl.has_integral else np.zeros(model.n))
        for qi, q in enumerate(modes):
            sched = constant_schedule(q, horizon_s)
            totals = np.zeros(n_traj)
            freqs = np.zeros(n_traj)
            ctrls = np.zeros(n_traj)
            for r, prof in enumerate(profiles):
                traj = simulate(model, sched, prof, ctrl, horizon_s, dt, x0=x0.copy())
                f, c = window_costs(traj, model, freq_weight, [(0, len(traj))])
                freqs[r], ctrls[r], totals[r] = f, c, f + c
            matrix[ci, qi] = totals.mean()
            details[(ci, q)] = EvalMetrics(freqs, ctrls)
    return matrix, details


def _policy_for(method: str, spec: ExperimentSpec, rng) -> object:
    sc = spec.scenario
    if method == "known_switching":
        return KnownSwitchingPolicy(spec.pool)
    if method == "online_switching":
        return OnlineSwitchingPolicy(spec.pool, sc.switch, sc.model,
                                     sc.train.freq_weight, rng)
    if method.startswith("fixed:"):
        return FixedPolicy(spec.pool[int(method.split(":", 1)[1])])
    raise ModelError(f"unknown evaluation method {method!r}")


def method_list(spec: ExperimentSpec) -> list[str]:
    out = []
    for m in spec.methods:
        if m == "fixed":
            out.extend(f"fixed:{i}" for i in range(len(spec.pool)))
        else:
            out.append(m)
    return out


def eval_switching(spec: ExperimentSpec):
    """Compare switching policies and fixed controllers on one scenario set.

    Pre-samples n_trajectories (schedule, disturbance) pairs from the
    master seed, then runs every method on the same pairs.  Costs are
    averaged over the transient windows after each disturbance.  Returns
    (metrics by method, switch log of the first online trajectory).
    """
    sc = spec.scenario
    ControllerPool(spec.pool)  # validates the common integral gain
    model = sc.model
    root = np.random.SeedSequence(spec.seed)
    case_seeds = root.spawn(spec.n_trajectories)
    policy_seeds = root.spawn(spec.n_trajectories)

    cases = []
    for ss in case_seeds:
        rng = np.random.default_rng(ss)
        sched = sc.sample_schedule(rng, spec.horizon_s)
        dist = sc.sample_disturbances(rng)
        cases.append((sched, dist))

    windows = transient_windows(sc.disturbance_times, spec.dt, spec.horizon_s)
    k = next(c.k for c in spec.pool if c.has_integral)
    eq = solve_equilibrium(model, k)
    x0 = GridState(eq.delta_star.copy(), np.zeros(model.n), eq.s_star.copy())

    results: dict[str, EvalMetrics] = {}
    first_online_log = None
    for method in method_list(spec):
        freqs = np.zeros(spec.n_trajectories)
        ctrls = np.zeros(spec.n_trajectories)
        for r, (sched, dist) in enumerate(cases):
            policy = _policy_for(method, spec, np.random.default_rng(policy_seeds[r]))
            traj = simulate(model, sched, dist, policy, spec.horizon_s, spec.dt,
                            x0=x0.copy())
            freqs[r], ctrls[r] = window_costs(traj, model, sc.train.freq_weight, windows)
            if method == "online_switching" and r == 0:
                first_online_log = policy.log
        results[method] = EvalMetrics(freqs, ctrls)
    return results, first_online_log


def sweep_hyperparams(spec: ExperimentSpec, rates, batch_lengths):
    """eval_switching over a (rate, batch length) grid, deduplicated and sorted."""
    grid = sorted({(float(x), int(t)) for x in np.atleast_1d(rates)
                   for t in np.atleast_1d(batch_lengths)})
    rows = []
    for rate, tau in grid:
        switch = SwitchConfig(
            selection_steps=spec.scenario.switch.selection_steps,
            trial_steps=spec.scenario.switch.trial_steps,
            batch_steps=tau, rate=rate,
            trigger_hz=spec.scenario.switch.trigger_hz)
        sub = replace(spec, scenario=replace(spec.scenario, switch=switch),
                      methods=("online_switching",))
        results, _ = eval_switching(sub)
        rows.append((rate, tau, results["online_switching"]))
    return rows


def write_metrics_table(results: dict[str, EvalMetrics], path):
    cols = ["method", "total_mean", "total_std", "freq_mean", "freq_std",
            "control_mean", "control_std", "total_median", "total_p90"]
    with open(path, "w") as fh:
        fh.write("\t".join(cols) + "\n")
        for method, metrics in results.items():
            s = metrics.summary()
            row = [method] + [repr(s[c]) for c in cols[1:]]
            fh.write("\t".join(row) + "\n")


def write_cross_mode_table(matrix: np.ndarray, pool, modes, path):
    with open(path, "w") as fh:
        fh.write("controller\t" + "\t".join(f"mode_{q}" for q in modes) + "\n")
        for ci, ctrl in enumerate(pool):
            name = f"{ctrl.kind}@{ctrl.trained_mode}"
            fh.write(name + "\t" + "\t".join(repr(x) for x in matrix[ci]) + "\n")


def write_per_trajectory_log(results: dict[str, EvalMetrics], path):
    with open(path, "w") as fh:
        fh.write("method\trep\tfreq_deviation\tcontrol_cost\ttotal\n")
        for method, metrics in results.items():
            for r in range(len(metrics.total)):
                fh.write("\t".join([method, str(r), repr(float(metrics.freq_deviation[r])),
                                    repr(float(metrics.control_cost[r])),
                                    repr(float(metrics.total[r]))]) + "\n")


def write_sweep_table(rows, path):
    with open(path, "w") as fh:
        fh.write("rate\tbatch_steps\ttotal_mean\ttotal_std\tfreq_mean\tfreq_std"
                 "\tcontrol_mean\tcontrol_std\n")
        for rate, tau, metrics in rows:
            s = metrics.summary()
            fh.write("\t".join([repr(rate), str(tau), repr(s["total_mean"]),
                                repr(s["total_std"]), repr(s["freq_mean"]),
                                repr(s["freq_std"]), repr(s["control_mean"]),
                                repr(s["control_std"])]) + "\n")


def run_switching_experiment(spec: ExperimentSpec):
    """eval_switching plus the standard output directory layout."""
    results, online_log = eval_switching(spec)
    if spec.out_dir:
        os.makedirs(spec.out_dir, exist_ok=True)
        save_scenario(spec.scenario, os.path.join(spec.out_dir, "scenario.cfg"))
        write_metrics_table(results, os.path.join(spec.out_dir, "metrics.tsv"))
        write_per_trajectory_log(results, os.path.join(spec.out_dir, "trajectories.tsv"))
        if online_log:
            write_switch_log(online_log, os.path.join(spec.out_dir, "switchlog.tsv"), spec.dt)
    return results
