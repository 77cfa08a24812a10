import hashlib
import os
from pathlib import Path

import numpy as np
import pytest

from handfit import cli
from handfit.config import RunConfig

TINY = [
    "--set", "synth.articulations=1", "--set", "synth.viewpoints=2",
    "--set", "synth.test_keyposes=3", "--set", "synth.frames_between=3",
    "--set", "synth.subsample=2",
    "--set", "forest.num_trees=2", "--set", "forest.max_depth=8",
    "--set", "forest.min_samples=15", "--set", "forest.node_subsample=200",
    "--set", "forest.candidates=30", "--set", "forest.train_stride=3",
    "--set", "forest.infer_stride=3", "--set", "forest.top_n=60",
    "--set", "pso.palm_particles=10", "--set", "pso.palm_generations=8",
    "--set", "pso.finger_particles=8", "--set", "pso.finger_generations=6",
    "--set", "pso.joint_particles=12", "--set", "pso.generations=8",
    "--set", "eval.seeds=2",
]


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipe") / "run"
    rc = cli.main(["pipeline", "--out", str(out), "--seed", "7"] + TINY)
    assert rc == 0
    return out


def test_pipeline_outputs(pipeline_dir):
    assert (pipeline_dir / "dataset" / "train" / "poses.csv").exists()
    assert (pipeline_dir / "dataset" / "train" / "frame_00000.pgm").exists()
    assert (pipeline_dir / "dataset" / "test" / "poses.csv").exists()
    assert (pipeline_dir / "dataset" / "config.txt").exists()
    assert (pipeline_dir / "forest.bin").exists()
    assert (pipeline_dir / "forest.stats.txt").exists()
    assert (pipeline_dir / "proposals.csv").exists()
    assert (pipeline_dir / "fit" / "estimates.csv").exists()
    assert (pipeline_dir / "fit" / "poses.csv").exists()
    assert (pipeline_dir / "eval" / "summary.txt").exists()
    assert (pipeline_dir / "eval" / "success_curve.svg").exists()
    summary = (pipeline_dir / "eval" / "summary.txt").read_text()
    assert "mean_joint_error_mm" in summary
    # train split: 1 articulation x 2 viewpoints
    lines = (pipeline_dir / "dataset" / "train" / "poses.csv").read_text().splitlines()
    assert len(lines) - 1 == 2
    # success curve fractions are monotone
    rows = (pipeline_dir / "eval" / "success_curve.csv").read_text().splitlines()[1:]
    fracs = [float(r.split(",")[1]) for r in rows]
    assert all(a <= b + 1e-12 for a, b in zip(fracs, fracs[1:]))


def test_synth_refuses_nonempty_without_force(pipeline_dir):
    rc = cli.main(["synth", "--out", str(pipeline_dir / "dataset")] + TINY)
    assert rc == 2


def test_regression_only_mode(pipeline_dir, tmp_path):
    rc = cli.main(["fit", "--proposals", str(pipeline_dir / "proposals.csv"),
                   "--out", str(tmp_path / "reg"), "--mode", "regression-only"]
                  + TINY)
    assert rc == 0
    assert (tmp_path / "reg" / "estimates.csv").exists()
    assert not (tmp_path / "reg" / "poses.csv").exists()
    rc = cli.main(["eval", "--estimates", str(tmp_path / "reg" / "estimates.csv"),
                   "--dataset", str(pipeline_dir / "dataset"),
                   "--out", str(tmp_path / "regeval")] + TINY)
    assert rc == 0


def test_joint_mode(pipeline_dir, tmp_path):
    rc = cli.main(["fit", "--proposals", str(pipeline_dir / "proposals.csv"),
                   "--out", str(tmp_path / "joint"), "--mode", "joint"] + TINY)
    assert rc == 0


def test_sweep_command(pipeline_dir, tmp_path):
    rc = cli.main(["sweep", "--experiment", "k",
                   "--dataset", str(pipeline_dir / "dataset"),
                   "--forest", str(pipeline_dir / "forest.bin"),
                   "--out", str(tmp_path / "sw"),
                   "--set", "sweep.k_grid=1,2", "--set", "eval.seeds=2"] + TINY)
    assert rc == 0
    table = (tmp_path / "sw" / "sweep_k" / "table.csv").read_text().splitlines()
    assert len(table) - 1 == 4  # 2 sweep points x 2 seeds
    assert (tmp_path / "sw" / "sweep_k" / "plot.svg").exists()


def test_exit_codes(tmp_path, pipeline_dir):
    # unknown config key
    assert cli.main(["synth", "--out", str(tmp_path / "x"),
                     "--set", "nope=1"]) == 2
    # missing dataset
    assert cli.main(["train", "--dataset", str(tmp_path / "absent"),
                     "--out", str(tmp_path / "f.bin")]) == 3
    # schema-mismatched CSV
    bad = tmp_path / "bad.csv"
    bad.write_text("frame,joint,x\n0,0,1\n")
    assert cli.main(["fit", "--proposals", str(bad),
                     "--out", str(tmp_path / "fit")]) == 4


def test_scale_flag_sets_articulations(tmp_path):
    parser = cli.build_parser()
    args = parser.parse_args(["synth", "--out", str(tmp_path), "--scale", "0.25"])
    cfg = cli._load_config(args)
    assert cfg["synth.articulations"] == 2  # 2**5 x 7 = 224 poses
    args = parser.parse_args(["synth", "--out", str(tmp_path), "--scale", "1.0"])
    assert cli._load_config(args)["synth.articulations"] == 4


def test_env_seed_override(tmp_path, monkeypatch):
    parser = cli.build_parser()
    args = parser.parse_args(["synth", "--out", str(tmp_path), "--seed", "5"])
    monkeypatch.setenv("HANDFIT_SEED", "123")
    assert cli._load_config(args)["seed"] == 123
    monkeypatch.setenv("HANDFIT_SEED", "not-a-number")
    from handfit.config import ConfigError

    with pytest.raises(ConfigError):
        cli._load_config(args)


def test_train_thread_invariance(pipeline_dir, tmp_path):
    rc = cli.main(["train", "--dataset", str(pipeline_dir / "dataset"),
                   "--out", str(tmp_path / "f2.bin"), "--seed", "7",
                   "--threads", "2"] + TINY)
    assert rc == 0
    h1 = hashlib.sha256((pipeline_dir / "forest.bin").read_bytes()).hexdigest()
    h2 = hashlib.sha256((tmp_path / "f2.bin").read_bytes()).hexdigest()
    assert h1 == h2


def test_joints_csv_round_trip(tmp_path, rng):
    frames = [rng.uniform(-100, 100, (21, 3)) for _ in range(3)]
    frames[1][4] = np.nan
    cli.write_joints_csv(tmp_path / "j.csv", frames)
    again = cli.read_joints_csv(tmp_path / "j.csv")
    assert len(again) == 3
    np.testing.assert_allclose(again[0], frames[0], rtol=1e-8)
    assert np.isnan(again[1][4]).all()
