import os

import numpy as np
import pytest

import gridswitch as gs
from gridswitch.cli import main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def trained(workdir):
    paths = []
    for mode in range(3):
        out = workdir / f"ctrl{mode}.txt"
        rc = main(["train", "--scenario", "triangle3", "--mode", str(mode),
                   "--out", str(out), "--episodes", "4", "--freeze-k", "3.0",
                   "--seed", str(100 + mode), "--out-dir", str(workdir)])
        assert rc == 0
        paths.append(str(out))
    return paths


def test_train_writes_controller_and_loss(workdir, trained):
    ctrl = gs.load_controller(trained[0])
    assert ctrl.kind == "monotone_pi"
    assert ctrl.trained_mode == 0
    assert (workdir / "train_loss.tsv").exists()


def test_simulate_fixed(workdir, trained):
    rc = main(["simulate", "--scenario", "triangle3", "--controller", trained[1],
               "--horizon", "2.0", "--mode", "1", "--seed", "3",
               "--out-dir", str(workdir)])
    assert rc == 0
    traj = gs.read_trajectory(workdir / "trajectory.tsv")
    assert len(traj) == 200


def test_simulate_online(workdir, trained):
    rc = main(["simulate", "--scenario", "triangle3",
               "--controller", trained[0], "--controller", trained[1],
               "--controller", trained[2], "--policy", "online",
               "--horizon", "2.0", "--seed", "3", "--out-dir", str(workdir)])
    assert rc == 0


def test_cross_mode(workdir, trained):
    rc = main(["cross-mode", "--scenario", "triangle3", "--pool", *trained,
               "--n-traj", "3", "--seed", "1", "--out-dir", str(workdir)])
    assert rc == 0
    table = (workdir / "cross_mode.tsv").read_text().splitlines()
    assert table[0].startswith("controller\tmode_0")
    assert len(table) == 4


def test_switch_eval(workdir, trained):
    rc = main(["switch-eval", "--scenario", "triangle3", "--pool", *trained,
               "--n-traj", "3", "--horizon", "8.0", "--seed", "2",
               "--out-dir", str(workdir / "sw")])
    assert rc == 0
    assert (workdir / "sw" / "metrics.tsv").exists()
    assert (workdir / "sw" / "switchlog.tsv").exists()


def test_certify_and_verify(workdir, trained):
    for mode in range(3):
        rc = main(["certify", "--scenario", "triangle3", "--controller", trained[0],
                   "--mode", str(mode), "--samples", "80", "--seed", "4",
                   "--out-dir", str(workdir)])
        assert rc == 0
    rc = main(["simulate", "--scenario", "triangle3", "--controller", trained[0],
               "--horizon", "2.0", "--seed", "5", "--out-dir", str(workdir)])
    assert rc == 0
    rc = main(["verify", "--scenario", "triangle3",
               "--trajectory", str(workdir / "trajectory.tsv"),
               "--certificate", str(workdir / "certificate_mode0.txt"),
               "--certificate", str(workdir / "certificate_mode1.txt"),
               "--certificate", str(workdir / "certificate_mode2.txt"),
               "--seed", "0", "--out-dir", str(workdir)])
    assert rc == 0
    report = (workdir / "envelope_report.txt").read_text()
    assert report.startswith("ok = True")


def test_sweep(workdir, trained):
    rc = main(["sweep", "--scenario", "triangle3", "--pool", *trained,
               "--rate", "0.005", "0.35", "--tau", "5", "--n-traj", "2",
               "--horizon", "6.0", "--seed", "6", "--out-dir", str(workdir)])
    assert rc == 0
    lines = (workdir / "sweep.tsv").read_text().splitlines()
    assert len(lines) == 3


def test_invariant_violation_exits_nonzero(workdir, trained, tmp_path):
    from gridswitch.scenario import bundled_path

    bad = tmp_path / "bad.cfg"
    text = bundled_path("triangle3").read_text()
    bad.write_text(text.replace("damping = 1.8 2.0 1.6", "damping = -1.8 2.0 1.6"))
    rc = main(["simulate", "--scenario", str(bad), "--controller", trained[0],
               "--horizon", "1.0", "--seed", "0", "--out-dir", str(workdir)])
    assert rc != 0
