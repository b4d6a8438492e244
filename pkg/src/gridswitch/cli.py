"""Command-line entry points.

Subcommands: train, simulate, switch-eval, cross-mode, certify, verify,
sweep.  Every subcommand takes --seed and --out-dir; any invariant
violation exits nonzero with the error on stderr.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .controllers import MonotonePIController, load_controller, save_controller
from .dynamics import export_trajectory, read_trajectory, simulate
from .errors import GridSwitchError
from .grid import constant_schedule
from .harness import (ExperimentSpec, eval_cross_mode, run_switching_experiment,
                      sweep_hyperparams, write_cross_mode_table, write_sweep_table)
from .scenario import load_case, load_scenario
from .stability import (compute_certificate, load_certificate, save_certificate,
                        solve_equilibrium, verify_envelope)
from .switching import OnlineSwitchingPolicy
from .training import TrainConfig, train


def _load_scenario_arg(arg: str):
    if os.path.exists(arg):
        return load_scenario(arg)
    return load_case(arg)


def _out_path(args, name: str) -> str:
    os.makedirs(args.out_dir, exist_ok=True)
    return os.path.join(args.out_dir, name)


def _cmd_train(args):
    sc = _load_scenario_arg(args.scenario)
    cfg = sc.train
    if args.episodes:
        from dataclasses import replace

        cfg = replace(cfg, episodes=args.episodes)
    cfg = TrainConfig(**{**cfg.__dict__, "seed": args.seed})
    mode = "all" if args.mode == "all" else int(args.mode)
    trained_label = None if mode == "all" else mode
    ctrl = MonotonePIController.init(sc.model.n, d=cfg.hidden_units, seed=args.seed,
                                     trained_mode=trained_label)
    report = train(ctrl, sc.model, mode, cfg, freeze_k=args.freeze_k)
    save_controller(report.controller, args.out)
    loss_path = _out_path(args, "train_loss.tsv")
    with open(loss_path, "w") as fh:
        fh.write("episode\tmean_loss\n")
        for ep, loss in enumerate(report.episode_loss):
            fh.write(f"{ep}\t{loss!r}\n")
    print(f"trained {args.mode}: final loss {report.episode_loss[-1]:.6g} "
          f"(initial {report.episode_loss[0]:.6g}); wrote {args.out}")
    if report.aborted:
        raise GridSwitchError("training aborted on diverging loss")


def _cmd_simulate(args):
    sc = _load_scenario_arg(args.scenario)
    rng = np.random.default_rng(args.seed)
    controllers = [load_controller(p) for p in args.controller]
    if args.policy == "fixed":
        policy = controllers[0]
    elif args.policy == "online":
        policy = OnlineSwitchingPolicy(controllers, sc.switch, sc.model,
                                       sc.train.freq_weight, rng)
    else:
        from .switching import KnownSwitchingPolicy

        policy = KnownSwitchingPolicy(controllers)
    if args.mode is not None:
        schedule = constant_schedule(args.mode, args.horizon)
    else:
        schedule = sc.sample_schedule(rng, args.horizon)
    dist = sc.sample_disturbances(rng)
    traj = simulate(sc.model, schedule, dist, policy, args.horizon, sc.train.dt)
    path = _out_path(args, "trajectory.tsv")
    export_trajectory(traj, path)
    print(f"wrote {path} ({len(traj)} steps, final max |omega| = "
          f"{np.max(np.abs(traj.final_state.omega)):.3e} pu)")


def _cmd_switch_eval(args):
    sc = _load_scenario_arg(args.scenario)
    pool = [load_controller(p) for p in args.pool]
    spec = ExperimentSpec(sc, pool, n_trajectories=args.n_traj, seed=args.seed,
                          horizon_s=args.horizon, dt=sc.train.dt, out_dir=args.out_dir)
    results = run_switching_experiment(spec)
    for method, metrics in results.items():
        s = metrics.summary()
        print(f"{method}: total {s['total_mean']:.4g} +- {s['total_std']:.4g}")


def _cmd_cross_mode(args):
    sc = _load_scenario_arg(args.scenario)
    pool = [load_controller(p) for p in args.pool]
    modes = list(range(sc.model.n_modes))
    matrix, _ = eval_cross_mode(pool, sc.model, modes, args.n_traj, args.seed,
                                sc.train.freq_weight, sc.max_disturbance)
    path = _out_path(args, "cross_mode.tsv")
    write_cross_mode_table(matrix, pool, modes, path)
    print(f"wrote {path}")
    for row, ctrl in zip(matrix, pool):
        print(f"  {ctrl.kind}@{ctrl.trained_mode}: " + " ".join(f"{x:.4g}" for x in row))


def _cmd_certify(args):
    sc = _load_scenario_arg(args.scenario)
    ctrl = load_controller(args.controller)
    cert = compute_certificate(sc.model, args.mode, ctrl, ctrl.k,
                               sample_count=args.samples, seed=args.seed)
    path = args.out or _out_path(args, f"certificate_mode{args.mode}.txt")
    save_certificate(cert, path)
    print(f"mode {args.mode}: kappa = {cert.kappa:.4g}, rho = {cert.rho:.6f}, "
          f"beta = {cert.beta:.4g}; wrote {path}")


def _cmd_verify(args):
    sc = _load_scenario_arg(args.scenario)
    traj = read_trajectory(args.trajectory)
    certs = {}
    for path in args.certificate:
        cert = load_certificate(path)
        certs[cert.mode] = cert
    k = next(iter(certs.values())).k
    eq = solve_equilibrium(sc.model, k)
    report = verify_envelope(traj, eq, certs, sc.dwell_s, sc.model)
    path = _out_path(args, "envelope_report.txt")
    with open(path, "w") as fh:
        fh.write(f"ok = {report.ok}\n")
        fh.write(f"kappa_star = {report.kappa_star!r}\n")
        fh.write(f"rho_star = {report.rho_star!r}\n")
        fh.write(f"beta_star = {report.beta_star!r}\n")
        fh.write(f"max_ratio = {report.max_ratio!r}\n")
        fh.write(f"max_switch_jump = {report.max_switch_jump!r}\n")
        for t, x, bound in report.envelope_violations:
            fh.write(f"envelope_violation\t{t!r}\t{x!r}\t{bound!r}\n")
        for t, vdot, bound in report.descent_violations:
            fh.write(f"descent_violation\t{t!r}\t{vdot!r}\t{bound!r}\n")
    print(f"wrote {path}; ok = {report.ok}")
    if not report.ok:
        raise GridSwitchError("envelope verification failed")


def _cmd_sweep(args):
    sc = _load_scenario_arg(args.scenario)
    pool = [load_controller(p) for p in args.pool]
    spec = ExperimentSpec(sc, pool, n_trajectories=args.n_traj, seed=args.seed,
                          horizon_s=args.horizon, dt=sc.train.dt,
                          methods=("online_switching",))
    rows = sweep_hyperparams(spec, args.rate, args.tau)
    path = _out_path(args, "sweep.tsv")
    write_sweep_table(rows, path)
    print(f"wrote {path}")
    for rate, tau, metrics in rows:
        print(f"  rate={rate:g} tau={tau}: total {metrics.summary()['total_mean']:.4g}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridswitch",
                                description="frequency-control experiments under switching inertia")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out-dir", default=".")

    sp = sub.add_parser("train", help="optimize a controller on one inertia mode")
    sp.add_argument("--scenario", required=True)
    sp.add_argument("--mode", required=True, help="mode index or 'all'")
    sp.add_argument("--out", required=True)
    sp.add_argument("--episodes", type=int, default=0)
    sp.add_argument("--freeze-k", type=float, default=None)
    common(sp)
    sp.set_defaults(func=_cmd_train)

    sp = sub.add_parser("simulate", help="roll out one trajectory")
    sp.add_argument("--scenario", required=True)
    sp.add_argument("--controller", action="append", required=True)
    sp.add_argument("--policy", choices=("fixed", "online", "known"), default="fixed")
    sp.add_argument("--horizon", type=float, default=20.0)
    sp.add_argument("--mode", type=int, default=None)
    common(sp)
    sp.set_defaults(func=_cmd_simulate)

    sp = sub.add_parser("switch-eval", help="compare switching and fixed controllers")
    sp.add_argument("--scenario", required=True)
    sp.add_argument("--pool", nargs="+", required=True)
    sp.add_argument("--n-traj", type=int, default=100)
    sp.add_argument("--horizon", type=float, default=20.0)
    common(sp)
    sp.set_defaults(func=_cmd_switch_eval)

    sp = sub.add_parser("cross-mode", help="controller-by-mode cost matrix")
    sp.add_argument("--scenario", required=True)
    sp.add_argument("--pool", nargs="+", required=True)
    sp.add_argument("--n-traj", type=int, default=50)
    common(sp)
    sp.set_defaults(func=_cmd_cross_mode)

    sp = sub.add_parser("certify", help="sampled decay certificate for one mode")
    sp.add_argument("--scenario", required=True)
    sp.add_argument("--controller", required=True)
    sp.add_argument("--mode", type=int, required=True)
    sp.add_argument("--samples", type=int, default=400)
    sp.add_argument("--out", default=None)
    common(sp)
    sp.set_defaults(func=_cmd_certify)

    sp = sub.add_parser("verify", help="check a trajectory against certificates")
    sp.add_argument("--scenario", required=True)
    sp.add_argument("--trajectory", required=True)
    sp.add_argument("--certificate", action="append", required=True)
    common(sp)
    sp.set_defaults(func=_cmd_verify)

    sp = sub.add_parser("sweep", help="hyperparameter grid for online switching")
    sp.add_argument("--scenario", required=True)
    sp.add_argument("--pool", nargs="+", required=True)
    sp.add_argument("--rate", type=float, nargs="+", required=True)
    sp.add_argument("--tau", type=int, nargs="+", required=True)
    sp.add_argument("--n-traj", type=int, default=20)
    sp.add_argument("--horizon", type=float, default=20.0)
    common(sp)
    sp.set_defaults(func=_cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except GridSwitchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
