import os
import pathlib
import re

import numpy as np
import pytest

from lqmfpg import config as cfgmod
from lqmfpg.cli import main
from lqmfpg.errors import ConfigError

CONFIGS = pathlib.Path(__file__).resolve().parents[1] / "configs"


def small_config(tmp_path, **edits):
    text = (CONFIGS / "table1_desk.ini").read_text()
    edits = {"M": "20", "T": "10", "k_max": "6", "runs": "2", "eval_stride": "2",
             "compare_N": "1, 2, 5", "h_grid": "0, 0.05", "sweep_seeds": "0, 1", "N": "1, 2",
             "directory": str(tmp_path / "out"), **edits}
    for key, val in edits.items():
        text, n = re.subn(rf"^{key} = .*$", f"{key} = {val}", text, flags=re.M)
        assert n == 1, key
    path = tmp_path / "exp.ini"
    path.write_text(text)
    return path


class TestConfig:
    @pytest.mark.parametrize("name", sorted(p.name for p in CONFIGS.glob("*.ini")))
    def test_round_trip(self, name):
        cfg = cfgmod.load(CONFIGS / name)
        again = cfgmod.parse(cfgmod.serialize(cfg))
        assert cfgmod.serialize(again) == cfgmod.serialize(cfg)
        assert again.sha256() == cfg.sha256()

    def test_table1_model(self):
        m = cfgmod.load(CONFIGS / "table1.ini").build_model()
        assert m.gamma == 0.9 and m.A[0, 0] == 0.5
        assert np.allclose(m.noise.sigma1, [[0.01]])
        assert np.allclose(m.noise.sigma_y0, [[1 / 3]])

    def test_unknown_key_named(self):
        text = (CONFIGS / "table1.ini").read_text().replace("[learn]", "[learn]\nmomentum = 0.5")
        with pytest.raises(ConfigError, match="unknown key 'momentum' in section \\[learn\\]"):
            cfgmod.parse(text)

    def test_unknown_noise_attribute(self):
        text = (CONFIGS / "table1.ini").read_text().replace("eps0_step.mean = 0", "eps0_step.mean = 0\neps0_step.skew = 1")
        with pytest.raises(ConfigError, match="eps0_step.skew"):
            cfgmod.parse(text)

    def test_std_scale_squares_factor(self):
        text = (CONFIGS / "table1.ini").read_text().replace("gaussian_scale = variance", "gaussian_scale = std")
        m = cfgmod.parse(text).build_model()
        assert np.allclose(m.noise.sigma1, [[1e-4]])

    def test_bad_matrix(self):
        text = (CONFIGS / "table1.ini").read_text().replace("A = 0.5", "A = 0.5, x")
        with pytest.raises(ConfigError, match="model.A"):
            cfgmod.parse(text)

    def test_run_seeds(self):
        cfg = cfgmod.load(CONFIGS / "table1.ini").with_seed(40)
        assert cfg.run_seeds() == list(range(40, 50))
        assert cfg.sha256() != cfgmod.load(CONFIGS / "table1.ini").sha256()


class TestCli:
    def test_solve(self, tmp_path, capsys):
        assert main(["solve", "--config", str(small_config(tmp_path))]) == 0
        text = (tmp_path / "out" / "solve.txt").read_text()
        assert "K* = 0.21463468882" in text and "C* = 0.92952176021" in text
        assert "N = 2" in text

    def test_negative_cost_rejected(self, tmp_path, capsys):
        path = small_config(tmp_path)
        path.write_text(path.read_text().replace("\nQ = 0.5", "\nQ = -1"))
        assert main(["solve", "--config", str(path)]) == 2
        err = capsys.readouterr().err
        assert "model rejected" in err and "[FAIL]" in err

    def test_uncontrolled_model(self, tmp_path, capsys):
        path = small_config(tmp_path)
        text = path.read_text().replace("\nB = 0.5", "\nB = 0").replace("B_bar = 0.5", "B_bar = 0")
        text = text.replace("\nA = 0.5", "\nA = 0.3").replace("A_bar = 0.5", "A_bar = 0.3")
        path.write_text(text)
        assert main(["solve", "--config", str(path)]) == 0
        out = capsys.readouterr().out
        assert "K* = 0\n" in out and "L* = 0\n" in out

    def test_missing_file(self, tmp_path, capsys):
        assert main(["solve", "--config", str(tmp_path / "none.ini")]) == 2

    def test_pg_outputs_are_reproducible(self, tmp_path, capsys):
        path = small_config(tmp_path)
        for out in ("a", "b"):
            assert main(["pg", "--config", str(path), "--out", str(tmp_path / out)]) == 0
        names = sorted(os.listdir(tmp_path / "a"))
        assert "pg_mkv_run0.csv" in names and "pg_mkv_summary.csv" in names and "pg_mkv_cost.svg" in names
        for n in names:
            assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes(), n

    def test_csv_and_svg_carry_config_hash(self, tmp_path, capsys):
        path = small_config(tmp_path)
        assert main(["pg", "--config", str(path)]) == 0
        digest = cfgmod.load(path).sha256()
        out = tmp_path / "out"
        first = (out / "pg_mkv_run1.csv").read_text().splitlines()
        assert first[0].startswith("# lqmfpg-trace v1") and digest in first[0] and "seed=1" in first[0]
        ks = [int(line.split(",")[0]) for line in first[2:]]
        assert ks == list(range(7))
        assert f"config_sha256={digest}" in (out / "pg_mkv_cost.svg").read_text()

    def test_seed_override(self, tmp_path, capsys):
        path = small_config(tmp_path, runs="1")
        main(["pg", "--config", str(path), "--out", str(tmp_path / "a")])
        main(["pg", "--config", str(path), "--out", str(tmp_path / "b"), "--seed", "9"])
        a = (tmp_path / "a" / "pg_mkv_run0.csv").read_text().splitlines()[2:]
        b = (tmp_path / "b" / "pg_mkv_run0.csv").read_text().splitlines()[2:]
        assert a[0] == b[0] and a[-1] != b[-1]

    def test_jobs_env_does_not_change_results(self, tmp_path, capsys, monkeypatch):
        path = small_config(tmp_path)
        main(["pg", "--config", str(path), "--out", str(tmp_path / "a")])
        monkeypatch.setenv("LQMFPG_JOBS", "3")
        main(["pg", "--config", str(path), "--out", str(tmp_path / "b"), "--jobs", "1"])
        for n in os.listdir(tmp_path / "a"):
            assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()

    def test_bad_jobs_env(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("LQMFPG_JOBS", "many")
        assert main(["solve", "--config", str(small_config(tmp_path))]) == 2

    def test_pop_method(self, tmp_path, capsys):
        path = small_config(tmp_path, method="pop", runs="1")
        assert main(["pg", "--config", str(path)]) == 0
        names = os.listdir(tmp_path / "out")
        assert "pg_pop_N1_summary.csv" in names and "pg_pop_N2_summary.csv" in names

    def test_step_failure_flushes_partial_trace(self, tmp_path, capsys):
        path = small_config(tmp_path, method="exact", eta="1e12", runs="1")
        assert main(["pg", "--config", str(path)]) == 1
        rows = (tmp_path / "out" / "pg_exact_run0.csv").read_text().splitlines()
        assert len(rows) == 3

    def test_compare_n(self, tmp_path, capsys):
        assert main(["compare-n", "--config", str(small_config(tmp_path))]) == 0
        rows = (tmp_path / "out" / "compare_n.csv").read_text().splitlines()[2:]
        assert [r.split(",")[0] for r in rows] == ["1", "2", "5"]
        sweep = (tmp_path / "out" / "hetero_sweep.csv").read_text().splitlines()[2:]
        assert float(sweep[0].split(",")[1]) < 1e-12
