import numpy as np
import pytest

import gridswitch as gs
from gridswitch.errors import ModelError
from gridswitch.switching import (PHASE_DEPLOYMENT, PHASE_SELECTION, PHASE_TRIAL,
                                  OnlineSwitcher, SwitchConfig, bandit_update,
                                  batch_cost, event_trigger, step_cost)


def test_event_trigger_threshold():
    assert not event_trigger(np.zeros(3), 0.01, 60.0)
    omega = np.zeros(3)
    omega[1] = 0.02 / 60.0  # one bus at 0.02 Hz
    assert event_trigger(omega, 0.01, 60.0)
    omega[1] = 0.01 / 60.0  # exactly at threshold: strict comparison
    assert not event_trigger(omega, 0.01, 60.0)


def test_switch_config_validation():
    with pytest.raises(ModelError):
        SwitchConfig(batch_steps=60, selection_steps=50)
    with pytest.raises(ModelError):
        SwitchConfig(rate=0.0)
    with pytest.raises(ModelError):
        SwitchConfig(trial_steps=0)


def test_batch_cost_hand_values():
    sc = gs.load_case("triangle3")
    model = sc.model
    assert step_cost(np.zeros(3), np.zeros(3), model.cost, 10.0) == 0.0
    # single bus, unit cost, u = 1, omega = 0 -> 0.5
    one = gs.GridModel((), [], [1.0], [0.0], [1.0], [[1.0]], (1.0,), [-2.0], [2.0])
    assert np.isclose(step_cost(np.array([1.0]), np.array([0.0]), one.cost, 7.0), 0.5)


def test_batch_cost_empty_slice_rejected():
    sc = gs.load_case("triangle3")
    ctrl = gs.MonotonePIController.init(3, seed=0)
    traj = gs.simulate(sc.model, gs.constant_schedule(0, 0.2), gs.DisturbanceProfile(),
                       ctrl, 0.2, 0.01)
    with pytest.raises(ModelError, match="empty"):
        batch_cost(traj, sc.model, 10.0, 5, 5)


def test_bandit_update_hand_example():
    # three arms, fresh state, arm 0 charged cost 10 at rate 5e-3
    g_tilde = np.zeros(3)
    probs = np.full(3, 1.0 / 3.0)
    g_tilde, probs = bandit_update(g_tilde, probs, 0, 10.0, 5e-3)
    assert np.allclose(g_tilde, [30.0, 0.0, 0.0])
    expect0 = np.exp(-0.15) / (np.exp(-0.15) + 2.0)
    expect12 = 1.0 / (np.exp(-0.15) + 2.0)
    assert abs(probs[0] - expect0) < 1e-12
    assert abs(probs[0] - 0.3009) < 1e-4
    assert abs(probs[1] - expect12) < 1e-12
    assert abs(probs[1] - 0.3496) < 1e-4
    assert abs(probs.sum() - 1.0) < 1e-12


def test_bandit_update_zero_cost_keeps_probs():
    g_tilde = np.array([5.0, 1.0, 2.0])
    z = -0.1 * g_tilde
    z -= z.max()
    probs = np.exp(z) / np.exp(z).sum()
    g2, p2 = bandit_update(g_tilde, probs, 1, 0.0, 0.1)
    assert np.allclose(p2, probs, atol=1e-15)


def test_bandit_update_rejects_zero_probability():
    with pytest.raises(ModelError):
        bandit_update(np.zeros(2), np.array([1.0, 0.0]), 1, 1.0, 0.1)


def test_bandit_update_overflow_safe():
    g_tilde = np.array([0.0, 1e6])
    probs = np.array([0.5, 0.5])
    g2, p2 = bandit_update(g_tilde, probs, 0, 1e7, 1.0)
    assert np.all(np.isfinite(p2))
    assert abs(p2.sum() - 1.0) < 1e-12


def test_lower_cost_arm_dominates():
    g_tilde = np.zeros(2)
    probs = np.full(2, 0.5)
    for _ in range(3):
        g_tilde, probs = bandit_update(g_tilde, probs, 0, 1.0, 0.02)
        g_tilde, probs = bandit_update(g_tilde, probs, 1, 3.0, 0.02)
    assert g_tilde[0] < g_tilde[1]
    assert probs[0] > probs[1]


def test_equal_costs_stay_near_uniform():
    devs = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        sw = OnlineSwitcher(3, SwitchConfig(selection_steps=100, batch_steps=1,
                                            rate=5e-3), 60.0, rng)
        st = sw.state
        for _ in range(100):
            arm = sw._sample_arm()
            st.g_tilde, st.probs = bandit_update(st.g_tilde, st.probs, arm, 1.0, 5e-3)
        devs.append(np.max(np.abs(st.probs - 1.0 / 3.0)))
    assert np.mean(devs) < 0.05
    assert max(devs) < 0.1


def _run_phase(seed, rate, tau, ns=50, costs=(1.0, 2.0, 3.0)):
    sw = OnlineSwitcher(3, SwitchConfig(selection_steps=ns, trial_steps=10,
                                        batch_steps=tau, rate=rate), 60.0,
                        np.random.default_rng(seed))
    omega_hot = np.array([0.02, 0.0, 0.0])  # above any trigger
    while sw.state.phase != PHASE_TRIAL:
        idx = sw.advance(omega_hot)
        sw.record_cost(costs[idx])
    return sw


def test_selection_phase_commits_to_cheapest_arm():
    # fine batching: the phase reliably finds the cheap arm
    wins = sum(int(np.argmax(_run_phase(s, 5e-3, 1).state.probs) == 0)
               for s in range(100))
    assert wins >= 90
    # reference batching is noisier with only ten batches; document the floor
    wins5 = sum(int(np.argmax(_run_phase(s, 5e-3, 5).state.probs) == 0)
                for s in range(100))
    assert wins5 >= 55


def test_phase_lengths_exact():
    cfg = SwitchConfig(selection_steps=50, trial_steps=30, batch_steps=5, rate=0.1)
    sw = OnlineSwitcher(3, cfg, 60.0, np.random.default_rng(1))
    hot = np.array([0.02, 0.0, 0.0])
    cold = np.zeros(3)
    phases = []
    for _ in range(120):
        sw.advance(hot if len(phases) < 1 else cold)
        phases.append(sw.state.phase)
        sw.record_cost(1.0)
    assert phases.count(PHASE_SELECTION) == 50
    assert phases.count(PHASE_TRIAL) == 30
    assert phases[80] == PHASE_DEPLOYMENT


def test_truncated_last_batch():
    # 50 steps with batch length 7: batches of 7 ... 7, 1
    cfg = SwitchConfig(selection_steps=50, trial_steps=5, batch_steps=7, rate=0.1)
    sw = OnlineSwitcher(2, cfg, 60.0, np.random.default_rng(2))
    hot = np.array([0.02, 0.0])
    lengths = []
    last_batch = 0
    count = 0
    for _ in range(50):
        sw.advance(hot if not lengths and count == 0 else np.zeros(2))
        batch_before = sw.state.batch_index
        sw.record_cost(1.0)
        count += 1
        if sw.state.batch_index != batch_before:
            lengths.append(count)
            count = 0
    assert lengths == [7, 7, 7, 7, 7, 7, 7, 1]


def test_never_triggered_run_is_inert():
    cfg = SwitchConfig()
    sw = OnlineSwitcher(3, cfg, 60.0, np.random.default_rng(3))
    for _ in range(200):
        idx = sw.advance(np.zeros(3))
        assert idx == 0  # uniform probabilities: lowest index wins ties
        sw.record_cost(0.0)
    assert np.allclose(sw.state.probs, 1.0 / 3.0)
    assert np.all(sw.state.g_tilde == 0.0)


def test_accumulated_cost_carries_across_events():
    cfg = SwitchConfig(selection_steps=10, trial_steps=5, batch_steps=5, rate=0.1)
    sw = OnlineSwitcher(2, cfg, 60.0, np.random.default_rng(4))
    hot = np.array([0.02, 0.0])
    cold = np.zeros(2)
    for t in range(15):
        sw.advance(hot if t == 0 else cold)
        sw.record_cost(2.0)
    g_after_first = sw.state.g_tilde.copy()
    assert g_after_first.sum() > 0.0
    # second event: accumulation continues from the carried values
    for t in range(15):
        sw.advance(hot if t == 0 else cold)
        sw.record_cost(2.0)
    assert np.all(sw.state.g_tilde >= g_after_first)


def test_reset_per_event_flag():
    cfg = SwitchConfig(selection_steps=10, trial_steps=5, batch_steps=5,
                       rate=0.1, reset_per_event=True)
    sw = OnlineSwitcher(2, cfg, 60.0, np.random.default_rng(5))
    hot = np.array([0.02, 0.0])
    cold = np.zeros(2)
    for t in range(15):
        sw.advance(hot if t == 0 else cold)
        sw.record_cost(2.0)
    assert sw.state.g_tilde.sum() > 0.0
    sw.advance(hot)  # retrigger resets the accumulator
    assert np.all(sw.state.g_tilde == 0.0)


def test_switch_log_round_trip(tmp_path):
    from gridswitch.switching import write_switch_log

    cfg = SwitchConfig(selection_steps=10, trial_steps=5, batch_steps=5, rate=0.1)
    sw = OnlineSwitcher(3, cfg, 60.0, np.random.default_rng(6))
    hot = np.array([0.02, 0.0, 0.0])
    for t in range(20):
        sw.advance(hot if t == 0 else np.zeros(3))
        sw.record_cost(1.0)
    path = tmp_path / "switch.tsv"
    write_switch_log(sw.log, path, 0.01)
    lines = path.read_text().splitlines()
    assert lines[0].split("\t") == ["t", "phase", "batch", "arm", "batch_cost",
                                    "P_0", "P_1", "P_2"]
    assert len(lines) == 21


def test_known_switching_policy_maps_modes():
    pool = [gs.MonotonePIController.init(2, seed=i, k=1.0, trained_mode=i)
            for i in range(3)]
    policy = gs.KnownSwitchingPolicy(pool)
    assert policy.select(np.zeros(2), 2, 0) == 2
    assert policy.select(np.zeros(2), 0, 1) == 0
    with pytest.raises(ModelError):
        policy.select(np.zeros(2), 9, 0)
