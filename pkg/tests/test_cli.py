"""Command-line driver: subcommands, outputs, exit codes."""

import json

import numpy as np
import pytest

from lba.cli import main
from lba.io import read_cloud, read_trajectory


def write_synth_spec(path, **overrides):
    base = {"n_frames": 5, "points_per_frame": 500, "noise_sigma": 0.0,
            "perturb_rot_sigma": 0.01, "perturb_trans_sigma": 0.02,
            "rng_seed": 0}
    base.update(overrides)
    path.write_text("".join(f"{k} = {v}\n" for k, v in base.items()))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    """A small synthetic dataset generated through the CLI itself."""
    root = tmp_path_factory.mktemp("dataset")
    spec = root / "scene.cfg"
    write_synth_spec(spec)
    assert main(["synth", "--spec", str(spec), "--out", str(root)]) == 0
    return root


class TestSynth:
    def test_outputs_exist(self, dataset):
        for name in ("cloud.ply", "groundtruth.txt", "initial.txt", "run.cfg"):
            assert (dataset / name).exists()

    def test_frames_match_trajectory(self, dataset):
        frames = read_cloud(dataset / "cloud.ply")
        traj = read_trajectory(dataset / "initial.txt")
        assert len(frames) == len(traj) == 5

    def test_seed_reproducible(self, tmp_path):
        spec = tmp_path / "scene.cfg"
        write_synth_spec(spec)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert main(["synth", "--spec", str(spec), "--out", str(out_a)]) == 0
        assert main(["synth", "--spec", str(spec), "--out", str(out_b)]) == 0
        assert (out_a / "cloud.ply").read_bytes() == (out_b / "cloud.ply").read_bytes()
        assert (out_a / "initial.txt").read_text() == (out_b / "initial.txt").read_text()

    def test_bad_spec_key(self, tmp_path):
        spec = tmp_path / "scene.cfg"
        spec.write_text("frames = 5\n")
        assert main(["synth", "--spec", str(spec), "--out",
                     str(tmp_path / "o")]) == 2


class TestApe:
    def test_same_file_zero(self, dataset, capsys):
        gt = str(dataset / "groundtruth.txt")
        assert main(["ape", "--est", gt, "--gt", gt]) == 0
        assert capsys.readouterr().out.strip() == "0.000000"

    def test_initial_error_positive(self, dataset, capsys):
        assert main(["ape", "--est", str(dataset / "initial.txt"),
                     "--gt", str(dataset / "groundtruth.txt")]) == 0
        assert float(capsys.readouterr().out) > 0.0

    def test_missing_file_data_error(self, dataset):
        assert main(["ape", "--est", str(dataset / "nope.txt"),
                     "--gt", str(dataset / "groundtruth.txt")]) == 2


class TestRun:
    def test_end_to_end_improves_ape(self, dataset, capsys):
        cfg = dataset / "run.cfg"
        # bound the runtime for the small test dataset
        cfg.write_text(cfg.read_text() + "max_outer = 2\n")
        assert main(["run", "--config", str(cfg)]) == 0
        for name in ("trajectory.txt", "map.ply", "graph.txt", "report.json"):
            assert (dataset / "out" / name).exists()
        report = json.loads((dataset / "out" / "report.json").read_text())
        assert report["iterations"]

        def rmse(est):
            main(["ape", "--est", est, "--gt", str(dataset / "groundtruth.txt")])
            return float(capsys.readouterr().out)

        before = rmse(str(dataset / "initial.txt"))
        after = rmse(str(dataset / "out" / "trajectory.txt"))
        assert after < before

    def test_missing_config_usage_of_data(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "none.cfg")]) == 2

    def test_config_without_dataset_paths(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("gamma0 = 3.0\n")
        assert main(["run", "--config", str(cfg)]) == 2

    def test_mismatched_counts(self, tmp_path, dataset):
        cfg = tmp_path / "run.cfg"
        (tmp_path / "short.txt").write_text("0.0 0 0 0 0 0 0 1\n")
        cfg.write_text(f"cloud = {dataset / 'cloud.ply'}\n"
                       f"trajectory = short.txt\n")
        assert main(["run", "--config", str(cfg)]) == 2


class TestGraphDump:
    def test_writes_edge_list(self, dataset, tmp_path):
        out = tmp_path / "graph.txt"
        assert main(["graph-dump", "--config", str(dataset / "run.cfg"),
                     "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[0].startswith("# anchor ")
        assert len(lines) > 1
        for line in lines[1:]:
            i, j, lam, ratio = line.split()
            assert int(i) < int(j)
            assert float(lam) >= 0.0
            assert 0.0 < float(ratio) <= 1.0


class TestUsage:
    def test_no_subcommand(self):
        assert main([]) == 1

    def test_unknown_subcommand(self):
        assert main(["optimize"]) == 1

    def test_missing_required_flag(self):
        assert main(["run"]) == 1

    def test_help_exits_zero(self):
        assert main(["--help"]) == 0
