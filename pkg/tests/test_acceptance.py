"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
report.  All tolerances are fixed here; nothing is calibrated at runtime.
"""

import time
from dataclasses import replace

import numpy as np
import pytest

import gridswitch as gs
from gridswitch.controllers import materialize_branch
from gridswitch.dynamics import GridState, simulate
from gridswitch.grid import DisturbanceProfile, InertiaSchedule, constant_schedule
from gridswitch.harness import (ExperimentSpec, eval_cross_mode, eval_switching,
                                train_pool, write_cross_mode_table, write_metrics_table)
from gridswitch.stability import (_sample_delta, compute_certificate, lyapunov_value,
                                  pool_certificates, solve_equilibrium, state_error,
                                  verify_envelope)
from gridswitch.switching import (OnlineSwitcher, OnlineSwitchingPolicy, SwitchConfig,
                                  bandit_update)
from gridswitch.training import RolloutCase, finite_difference_gradient, gradient, train

POOL_SEED = 100
CROSS_SEED = 7
SWITCH_SEED = 11


def _report(num: int, ok: bool, detail: str):
    print(f"\nACCEPTANCE {num}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {num}: {detail}"


@pytest.fixture(scope="module")
def scenario():
    return gs.load_case("triangle3")


@pytest.fixture(scope="module")
def pool(scenario):
    t0 = time.time()
    controllers = train_pool(scenario, base_seed=POOL_SEED)
    return controllers, time.time() - t0


@pytest.fixture(scope="module")
def verification_controller(scenario):
    # moderate monotone-PI controller used for the certificate checks:
    # well inside every mode's discrete stability margin
    cfg = replace(scenario.train, episodes=20)
    ctrl = gs.MonotonePIController.init(3, d=20, seed=POOL_SEED, k=3.0, trained_mode=1)
    return train(ctrl, scenario.model, 1, cfg, freeze_k=3.0, grad_check=False).controller


def test_criterion_1_equilibrium(scenario, pool):
    controllers, _ = pool
    model = scenario.model
    t0 = time.time()
    rng = np.random.default_rng(3)
    worst_omega = 0.0
    worst_ks = 0.0
    for trial in range(2):
        p = rng.uniform(-0.3, 0.3, 3)
        m2 = model.with_injection(p)
        for ctrl in controllers:
            eq = solve_equilibrium(m2, ctrl.k)
            sched = constant_schedule(ctrl.trained_mode, 30.0)
            x0 = GridState(np.zeros(3), np.zeros(3), np.zeros(3))
            traj = simulate(m2, sched, DisturbanceProfile(), ctrl, 30.0, 0.01, x0=x0)
            worst_omega = max(worst_omega, float(np.max(np.abs(traj.final_state.omega))))
            ks_err = np.max(np.abs(ctrl.k * traj.final_state.s - eq.gamma / m2.cost))
            worst_ks = max(worst_ks, float(ks_err))
        eqs = [solve_equilibrium(m2, controllers[0].k, mode=q) for q in range(3)]
        for eq in eqs[1:]:
            assert np.max(np.abs(eq.delta_star - eqs[0].delta_star)) < 1e-12
            assert np.max(np.abs(eq.s_star - eqs[0].s_star)) < 1e-12
    elapsed = time.time() - t0
    ok = worst_omega < 1e-6 and worst_ks < 1e-4 and elapsed < 5.0
    _report(1, ok, f"max|omega(30s)| = {worst_omega:.2e} (< 1e-6), "
                   f"max|ks - gamma/c| = {worst_ks:.2e} (< 1e-4), "
                   f"equilibria mode-independent to 1e-12, runtime {elapsed:.2f}s (< 5s)")


def test_criterion_2_monotone_network():
    count, d = 10_000, 20
    rng = np.random.default_rng(12345)
    wpos, bpos, _ = materialize_branch(rng.normal(0, 2, (count, d)),
                                       rng.normal(-3, 2, (count, d - 1)))
    wneg_mag, bneg, _ = materialize_branch(rng.normal(0, 2, (count, d)),
                                           rng.normal(-3, 2, (count, d - 1)))
    wneg = -wneg_mag

    def f(x):
        zp = np.maximum(x[:, None] + bpos, 0.0)
        zn = np.maximum(-x[:, None] + bneg, 0.0)
        return np.sum(wpos * zp, axis=1) + np.sum(wneg * zn, axis=1)

    violations = 0
    for _ in range(10):
        x1 = rng.uniform(-2.0, 2.0, count)
        x2 = x1 + rng.uniform(0.0, 2.0, count)
        violations += int(np.sum(f(x2) < f(x1)))
    zero_exact = bool(np.all(f(np.zeros(count)) == 0.0))
    ok = violations == 0 and zero_exact
    _report(2, ok, f"{count} networks x 10 ordered pairs: {violations} monotonicity "
                   f"violations, pi(0) == 0 exact: {zero_exact}")


def test_criterion_3_gradient_oracle():
    from helpers import kink_free as _kink_free, tiny_model

    model = tiny_model()
    t0 = time.time()
    rng = np.random.default_rng(42)
    checked = 0
    attempts = 0
    worst = 0.0
    while checked < 20 and attempts < 400:
        attempts += 1
        ctrl = gs.MonotonePIController.init(2, d=2, seed=attempts, k=0.8)
        dist = np.zeros((5, 2))
        dist[int(rng.integers(1, 4)):, int(rng.integers(2))] = rng.uniform(-0.5, 0.5)
        case = RolloutCase(int(rng.integers(2)), dist)
        if not _kink_free(ctrl, model, case, 0.01):
            continue
        _, grads = gradient(ctrl, model, [case], 0.01, 3.0)
        fd = finite_difference_gradient(ctrl, model, [case], 0.01, 3.0)
        for name in grads:
            denom = np.maximum(np.abs(fd[name]), 1e-8)
            worst = max(worst, float(np.max(np.abs(grads[name] - fd[name]) / denom)))
        checked += 1
    elapsed = time.time() - t0
    ok = checked == 20 and worst < 1e-4 and elapsed < 60.0
    _report(3, ok, f"{checked}/20 tiny instances, worst relative error {worst:.2e} "
                   f"(< 1e-4), runtime {elapsed:.1f}s (< 60s)")


def test_criterion_4_lyapunov_descent(scenario, verification_controller):
    model = scenario.model
    ctrl = verification_controller
    eq = solve_equilibrium(model, ctrl.k)
    certs = {m: compute_certificate(model, m, ctrl, ctrl.k, sample_count=300, seed=42)
             for m in range(3)}
    wide = model.with_bounds(-1e6, 1e6)  # descent theory excludes saturation
    t0 = time.time()
    rng = np.random.default_rng(77)
    violations = 0
    rollouts = 0
    for mode in range(3):
        cert = certs[mode]
        for _ in range(50):
            x0 = GridState(_sample_delta(model, eq, rng),
                           rng.uniform(-0.1, 0.1, 3),
                           eq.s_star + rng.uniform(-0.2, 0.2, 3))
            traj = simulate(wide, constant_schedule(mode, 3.0), DisturbanceProfile(),
                            ctrl, 3.0, 0.01, x0=x0, integrator="rk4")
            V = np.array([lyapunov_value(traj.state_at(t), eq, model, mode,
                                         cert.eps1, cert.eps2)
                          for t in range(len(traj))])
            vdot = np.diff(V) / traj.dt
            violations += int(np.sum(vdot > -cert.alpha1 * V[:-1] + 1e-6))
            rollouts += 1
    elapsed = time.time() - t0
    ok = violations == 0 and elapsed < 120.0
    _report(4, ok, f"{rollouts} disturbance-free rollouts (50 per mode): "
                   f"{violations} per-step descent violations, runtime {elapsed:.1f}s (< 120s)")


def test_criterion_5_exp_iss_envelope(scenario, pool):
    controllers, _ = pool
    model = scenario.model
    k = controllers[0].k
    eq = solve_equilibrium(model, k)
    certs = pool_certificates(model, controllers, k, sample_count=300, seed=42)
    sched = InertiaSchedule(np.array([5.0, 10.0, 15.0]), np.array([2, 1, 1, 0]), 20.0)
    dist = DisturbanceProfile(((0.1, np.array([0.0, -0.25, 0.0])),))
    rng = np.random.default_rng(4)
    x0 = GridState(_sample_delta(model, eq, rng), rng.uniform(-0.05, 0.05, 3),
                   eq.s_star + rng.uniform(-0.1, 0.1, 3))
    policy = OnlineSwitchingPolicy(controllers, scenario.switch, model,
                                   scenario.train.freq_weight, np.random.default_rng(5))
    traj = simulate(model, sched, dist, policy, 20.0, 0.01, x0=x0)
    report = verify_envelope(traj, eq, certs, 5.0, model, slack=2.0,
                             controllers=controllers)
    n_switches = int(np.sum(np.diff(traj.controller_id) != 0))
    ok = (not report.envelope_violations) and report.max_switch_jump < 1e-10
    _report(5, ok, f"envelope violations: {len(report.envelope_violations)} "
                   f"(max ratio {report.max_ratio:.2e}), |dV| at {n_switches} "
                   f"controller switches: {report.max_switch_jump:.2e} (< 1e-10)")


def _bandit_mc(seeds=100, rate=5e-3, tau=1, ns=50, costs=(1.0, 2.0, 3.0)):
    wins = 0
    for seed in range(seeds):
        sw = OnlineSwitcher(3, SwitchConfig(selection_steps=ns, trial_steps=5,
                                            batch_steps=tau, rate=rate), 60.0,
                            np.random.default_rng(seed))
        hot = np.array([0.02, 0.0, 0.0])
        while sw.state.phase != "trial":
            idx = sw.advance(hot)
            sw.record_cost(costs[idx])
        wins += int(np.argmax(sw.state.probs) == 0)
    return wins


def test_criterion_6_bandit_correctness():
    g_tilde, probs = bandit_update(np.zeros(3), np.full(3, 1.0 / 3.0), 0, 10.0, 5e-3)
    expect = np.array([np.exp(-0.15), 1.0, 1.0])
    expect /= expect.sum()
    hand_err = float(np.max(np.abs(probs - expect)))
    hand_close = np.max(np.abs(probs - [0.3009, 0.3496, 0.3496])) < 1e-4
    wins = _bandit_mc()
    ok = hand_err < 1e-6 and hand_close and wins >= 90
    _report(6, ok, f"hand-computed update error {hand_err:.1e} (< 1e-6), "
                   f"P = ({probs[0]:.4f}, {probs[1]:.4f}, {probs[2]:.4f}); "
                   f"cheapest arm committed in {wins}/100 seeds (>= 90)")


def test_criterion_7_cross_mode_structure(scenario, pool):
    controllers, train_time = pool
    t0 = time.time()
    matrix, _ = eval_cross_mode(controllers, scenario.model, [0, 1, 2], 50,
                                CROSS_SEED, scenario.train.freq_weight,
                                scenario.max_disturbance)
    elapsed = train_time + (time.time() - t0)
    diag_min = [bool(matrix[q, q] == matrix[:, q].min()) for q in range(3)]
    ok = all(diag_min) and elapsed < 900.0
    rows = "; ".join(" ".join(f"{x:.4f}" for x in row) for row in matrix)
    _report(7, ok, f"diagonal is column minimum in {sum(diag_min)}/3 columns "
                   f"[{rows}], runtime incl. training {elapsed:.0f}s (< 900s)")


def test_criterion_8_switching_structure(scenario, pool):
    controllers, _ = pool
    spec = ExperimentSpec(scenario, controllers, n_trajectories=100,
                          seed=SWITCH_SEED, horizon_s=20.0)
    results, _ = eval_switching(spec)
    means = {m: res.summary()["total_mean"] for m, res in results.items()}
    fixed = {m: v for m, v in means.items() if m.startswith("fixed:")}
    best_fixed = min(fixed.values())
    worst_fixed = max(fixed.values())
    known = means["known_switching"]
    online = means["online_switching"]
    ok = (known <= online
          and online <= 1.1 * best_fixed
          and online < 0.8 * worst_fixed)
    _report(8, ok, f"known {known:.4f} <= online {online:.4f} <= "
                   f"1.1 x best fixed {1.1 * best_fixed:.4f}; online/worst = "
                   f"{online / worst_fixed:.2f} (< 0.8)")


def test_criterion_9_determinism(scenario, pool, tmp_path):
    controllers, _ = pool
    outputs = {}
    for tag in ("a", "b"):
        out = tmp_path / tag
        out.mkdir()
        # criterion 6 artifacts
        wins = _bandit_mc()
        (out / "bandit.txt").write_text(f"wins = {wins}\n")
        # criterion 7 artifacts
        matrix, _ = eval_cross_mode(controllers, scenario.model, [0, 1, 2], 50,
                                    CROSS_SEED, scenario.train.freq_weight,
                                    scenario.max_disturbance)
        write_cross_mode_table(matrix, controllers, [0, 1, 2], out / "cross_mode.tsv")
        # criterion 8 artifacts
        spec = ExperimentSpec(scenario, controllers, n_trajectories=100,
                              seed=SWITCH_SEED, horizon_s=20.0)
        results, _ = eval_switching(spec)
        write_metrics_table(results, out / "metrics.tsv")
        outputs[tag] = {p.name: p.read_bytes() for p in sorted(out.iterdir())}
    same = outputs["a"] == outputs["b"]
    # training itself is also bit-reproducible
    ctrl_a = train_pool(scenario, base_seed=POOL_SEED)[0]
    ra = {k: v.copy() for k, v in ctrl_a.raw_parameters().items()}
    rb = controllers[0].raw_parameters()
    train_same = all(np.array_equal(ra[k], rb[k]) for k in ra)
    ok = same and train_same
    _report(9, ok, f"criteria 6-8 output files byte-identical on rerun: {same}; "
                   f"retrained controller bit-identical: {train_same}")
