import filecmp
import subprocess
import sys
import time

import numpy as np
import pytest

from spdshrink.cli import EXIT_FLAGGED, EXIT_INPUT, EXIT_OK, main
from spdshrink.formats import read_csv, read_tensor_field, write_tensor_field
from spdshrink.simulation import GroupExperimentConfig, RiskExperimentConfig, gen_group_images, gen_hier_dataset


def summary(path):
    _, rows = read_csv(path)
    return {k: v for k, v in rows}


def same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    files = sorted(p.name for p in a.iterdir())
    match, mismatch, errors = filecmp.cmpfiles(a, b, files, shallow=False)
    return not cmp.left_only and not cmp.right_only and not mismatch and not errors and match


@pytest.fixture(scope="module")
def hier_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "sites.spdf"
    data, _ = gen_hier_dataset(RiskExperimentConfig(p_grid=(80,), reps=1), 80)
    write_tensor_field(path, data)
    return path


@pytest.fixture(scope="module")
def group_files(tmp_path_factory):
    root = tmp_path_factory.mktemp("groups")
    cfg = GroupExperimentConfig(grid=(10, 10), n1=12, n2=12)
    g, _ = gen_group_images(cfg)
    write_tensor_field(root / "g1.spdf", g.group1)
    write_tensor_field(root / "g2.spdf", g.group2)
    (root / "truth.txt").write_text(" ".join(str(int(v)) for v in cfg.changed_region.ravel()))
    return root


class TestEstimate:
    def test_full(self, hier_file, tmp_path):
        code = main(["estimate", "--input", str(hier_file), "--output", str(tmp_path)])
        assert code in (EXIT_OK, EXIT_FLAGGED)
        s = summary(tmp_path / "summary.csv")
        assert s["estimator"] == "SURE.Full"
        assert float(s["sure"]) <= float(s["sure_init"])
        assert s["converged"] == ("1" if code == EXIT_OK else "0")
        means = read_tensor_field(tmp_path / "means.spdf")
        covs = read_tensor_field(tmp_path / "covs.spdf")
        assert means.shape == (80, 1, 3, 3) and covs.shape == (80, 1, 6, 6)

    def test_known_variance(self, hier_file, tmp_path):
        code = main(["estimate", "--input", str(hier_file), "--output", str(tmp_path), "--known-variance"])
        assert code == EXIT_OK
        s = summary(tmp_path / "summary.csv")
        assert s["estimator"] == "SURE-FM"
        assert float(s["sure"]) <= float(s["sure_init"])

    def test_missing_input(self, tmp_path, capsys):
        code = main(["estimate", "--input", str(tmp_path / "nope.spdf"), "--output", str(tmp_path)])
        assert code == EXIT_INPUT
        assert "error" in capsys.readouterr().err

    def test_unknown_config_key(self, hier_file, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("max_iter = 5\n")
        code = main(["estimate", "--input", str(hier_file), "--output", str(tmp_path), "--config", str(cfg)])
        assert code == EXIT_INPUT
        assert "max_iter" in capsys.readouterr().err

    def test_iteration_cap_flags(self, hier_file, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("max_iters = 1\n")
        code = main(["estimate", "--input", str(hier_file), "--output", str(tmp_path / "o"), "--config", str(cfg)])
        assert code == EXIT_FLAGGED
        assert (tmp_path / "o" / "means.spdf").exists()

    def test_bad_usage(self, capsys):
        assert main(["estimate"]) == EXIT_INPUT
        assert main([]) == EXIT_INPUT


class TestGroupdiff:
    def run(self, group_files, out, *extra):
        return main([
            "groupdiff", "--group1", str(group_files / "g1.spdf"), "--group2", str(group_files / "g2.spdf"),
            "--output", str(out), *extra,
        ])

    def test_outputs(self, group_files, tmp_path):
        code = self.run(group_files, tmp_path, "--top-fraction", "0.25", "--grid", "10x10",
                        "--truth", str(group_files / "truth.txt"))
        assert code in (EXIT_OK, EXIT_FLAGGED)
        header, rows = read_csv(tmp_path / "sites.csv")
        assert header == ["site", "t2", "z", "lambda_mom", "lambda_tweedie", "selected"]
        assert len(rows) == 100 and sum(r[5] == "1" for r in rows) == 25
        s = summary(tmp_path / "summary.csv")
        assert s["dof2"] == str(12 + 12 - 2 - 3 - 1)
        assert 0.0 <= float(s["f1_tweedie"]) <= 1.0 and 0.0 <= float(s["f1_mom"]) <= 1.0
        assert len(read_csv(tmp_path / "map.csv")[1]) == 100

    def test_smooth_one_is_raw(self, group_files, tmp_path):
        self.run(group_files, tmp_path, "--grid", "10x10", "--smooth", "1")
        _, sites = read_csv(tmp_path / "sites.csv")
        _, cells = read_csv(tmp_path / "map.csv")
        assert [r[3:5] for r in sites] == [r[2:4] for r in cells]

    def test_identical_groups(self, group_files, tmp_path):
        g = str(group_files / "g1.spdf")
        code = main(["groupdiff", "--group1", g, "--group2", g, "--output", str(tmp_path), "--top-fraction", "0.1"])
        assert code == EXIT_OK
        _, rows = read_csv(tmp_path / "sites.csv")
        assert all(float(r[4]) == 0.0 for r in rows)
        assert sum(r[5] == "1" for r in rows) == 10

    def test_too_few_observations(self, tmp_path):
        a = np.broadcast_to(np.eye(3), (4, 4, 3, 3)) * np.arange(1, 5)[None, :, None, None]
        write_tensor_field(tmp_path / "a.spdf", a)
        code = main(["groupdiff", "--group1", str(tmp_path / "a.spdf"), "--group2", str(tmp_path / "a.spdf"),
                     "--output", str(tmp_path / "o")])
        assert code == EXIT_INPUT

    def test_grid_mismatch(self, group_files, tmp_path):
        assert self.run(group_files, tmp_path, "--grid", "5x5") == EXIT_INPUT


RISK_CFG = "p_grid = 50\nreps = 2\nn = 10\nseed = 4\n"
GROUP_CFG = "grid = 8x8\nn1 = 10\nn2 = 10\nreps = 3\nmax_iters = 5\nsmooth = 3\n"


class TestSimulate:
    def test_risk_outputs(self, tmp_path):
        (tmp_path / "r.cfg").write_text(RISK_CFG)
        code = main(["simulate-risk", "--config", str(tmp_path / "r.cfg"), "--output", str(tmp_path / "o")])
        assert code == EXIT_OK
        header, rows = read_csv(tmp_path / "o" / "risk.csv")
        assert header[:3] == ["estimator", "p", "mean_loss"] and len(rows) == 5
        header, rows = read_csv(tmp_path / "o" / "plot.csv")
        assert header[0] == "p" and rows[0][0] == "50"

    def test_seed_override(self, tmp_path):
        (tmp_path / "r.cfg").write_text(RISK_CFG)
        for name, seed in (("a", "1"), ("b", "1"), ("c", "2")):
            main(["simulate-risk", "--config", str(tmp_path / "r.cfg"), "--output", str(tmp_path / name),
                  "--seed", seed])
        assert same_tree(tmp_path / "a", tmp_path / "b")
        assert not same_tree(tmp_path / "a", tmp_path / "c")

    @pytest.mark.parametrize("command, text", [("simulate-risk", RISK_CFG), ("simulate-groups", GROUP_CFG)])
    def test_thread_invariance(self, tmp_path, monkeypatch, command, text):
        (tmp_path / "c.cfg").write_text(text)
        for threads in ("1", "3"):
            monkeypatch.setenv("SPDSHRINK_THREADS", threads)
            main([command, "--config", str(tmp_path / "c.cfg"), "--output", str(tmp_path / threads)])
        assert same_tree(tmp_path / "1", tmp_path / "3")

    def test_group_outputs(self, tmp_path):
        (tmp_path / "g.cfg").write_text(GROUP_CFG)
        code = main(["simulate-groups", "--config", str(tmp_path / "g.cfg"), "--output", str(tmp_path / "o")])
        assert code in (EXIT_OK, EXIT_FLAGGED)
        assert len(read_csv(tmp_path / "o" / "metrics.csv")[1]) == 3
        s = summary(tmp_path / "o" / "summary.csv")
        assert s["reps"] == "3"
        header, rows = read_csv(tmp_path / "o" / "plot.csv")
        assert header == ["row", "col", "changed", "lambda_mom", "lambda_tweedie"] and len(rows) == 64

    def test_config_errors(self, tmp_path):
        (tmp_path / "bad.cfg").write_text("p_grid = 50\nreplicates = 2\n")
        assert main(["simulate-risk", "--config", str(tmp_path / "bad.cfg"), "--output", str(tmp_path)]) == EXIT_INPUT
        (tmp_path / "bad2.cfg").write_text("reps = 0\n")
        assert main(["simulate-risk", "--config", str(tmp_path / "bad2.cfg"), "--output", str(tmp_path)]) == EXIT_INPUT
        assert main(["simulate-groups", "--config", str(tmp_path / "none.cfg")]) == EXIT_INPUT

    def test_smoke_runtime(self, tmp_path):
        (tmp_path / "r.cfg").write_text("p_grid = 50\nreps = 1\n")
        t0 = time.perf_counter()
        code = main(["simulate-risk", "--config", str(tmp_path / "r.cfg"), "--output", str(tmp_path / "o")])
        assert code == EXIT_OK
        assert time.perf_counter() - t0 < 10.0

    def test_console_script(self, tmp_path):
        (tmp_path / "r.cfg").write_text("p_grid = 20\nreps = 1\nestimators = FM.LE\n")
        proc = subprocess.run(
            [sys.executable, "-m", "spdshrink.cli", "simulate-risk", "--config", str(tmp_path / "r.cfg"),
             "--output", str(tmp_path / "o")],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0, proc.stderr
        assert (tmp_path / "o" / "risk.csv").exists()
