#!/usr/bin/env python3
"""Side-by-side benchmark of the rollout kernels: numba JIT vs numpy fallback.

Times the closed-loop forward pass and the adjoint (backward) pass on the
bundled cases and prints a speedup table.  The first JIT call compiles and
is excluded from the timings.

    python benchmarks/bench_rollout.py
"""

import time

import numpy as np

import gridswitch as gs
from gridswitch import _kernels


def build_args(case: str, T: int, seed: int = 0):
    sc = gs.load_case(case)
    model = sc.model
    ctrl = gs.MonotonePIController.init(model.n, d=20, seed=seed, k=3.0)
    kind, wpos, bpos, wneg, bneg, lin, mw1, mb1, mw2, k, integral_on = ctrl.kernel_args()
    eq = gs.solve_equilibrium(model, ctrl.k)
    rng = np.random.default_rng(seed)
    dist = np.zeros((T, model.n))
    dist[10:, int(rng.integers(model.n))] = 0.2
    minv_t = np.broadcast_to(1.0 / model.inertia(1), (T, model.n)).copy()
    ei, ej = model.edge_index
    fwd = (kind, wpos, bpos, wneg, bneg, lin, mw1, mb1, mw2, k, integral_on,
           eq.delta_star, np.zeros(model.n), eq.s_star, model.injection,
           model.damping, model.cost, minv_t, dist, ei, ej, model.susceptance,
           model.u_min, model.u_max, 0.01)
    tail = (model.injection, model.damping, model.cost, minv_t, ei, ej,
            model.susceptance, model.u_min, model.u_max, 0.01, 10.0)
    return fwd, tail


def timed(fn, reps):
    t0 = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - t0) / reps


def main():
    if not _kernels.HAVE_NUMBA:
        print("numba not importable: only the numpy path is available")
    print(f"{'case':>10} {'pass':>9} {'numpy (ms)':>11} {'numba (ms)':>11} {'speedup':>8}")
    print("-" * 55)
    for case, T, reps in (("triangle3", 300, 50), ("ne9", 300, 50), ("ne39", 300, 20)):
        fwd, tail = build_args(case, T)
        hist = _kernels.rollout_forward(*fwd, use_numba=False)
        bwd = (*fwd[:11], *hist, *tail)

        if _kernels.HAVE_NUMBA:
            _kernels.rollout_forward(*fwd, use_numba=True)   # compile
            _kernels.rollout_backward(*bwd, use_numba=True)  # compile

        t_np_f = timed(lambda: _kernels.rollout_forward(*fwd, use_numba=False), reps)
        t_np_b = timed(lambda: _kernels.rollout_backward(*bwd, use_numba=False), reps)
        if _kernels.HAVE_NUMBA:
            t_nb_f = timed(lambda: _kernels.rollout_forward(*fwd, use_numba=True), reps)
            t_nb_b = timed(lambda: _kernels.rollout_backward(*bwd, use_numba=True), reps)
        else:
            t_nb_f = t_nb_b = float("nan")

        # agreement check between the two implementations
        out_np = _kernels.rollout_forward(*fwd, use_numba=False)
        if _kernels.HAVE_NUMBA:
            out_nb = _kernels.rollout_forward(*fwd, use_numba=True)
            worst = max(np.max(np.abs(a - b)) for a, b in zip(out_np, out_nb))
            assert worst < 1e-12, f"paths disagree by {worst}"

        for name, tn, tb in (("forward", t_np_f, t_nb_f), ("backward", t_np_b, t_nb_b)):
            speed = tn / tb if tb == tb else float("nan")
            print(f"{case:>10} {name:>9} {1e3 * tn:>11.3f} {1e3 * tb:>11.3f} {speed:>7.1f}x")


if __name__ == "__main__":
    main()
