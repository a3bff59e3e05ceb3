import csv
import json
import subprocess
import sys

import pytest

from liderlab.cli import DEFAULT_OUT, OUT_ENV, load_config, main, out_root, parse_config
from liderlab.errors import ConfigurationError

TINY = {
    "stream": {"n_tasks": 2, "dim": 4, "train_per_class": 12, "test_per_class": 6},
    "methods": ["er", "er+lider"],
    "train": {"epochs": 1, "hidden": [8], "lr": 0.05, "batch_size": 4, "probe_per_task": 5,
              "probe_power_iters": 10},
    "buffer": {"capacity": 6},
    "analysis": {"n_perturb": 4, "grid_size": 3, "trials": 2, "sigmas": [0.0, 0.1]},
    "seeds": [0],
}


def write_config(tmp_path, doc=TINY, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def files_under(path):
    return sorted(str(p.relative_to(path)) for p in path.rglob("*") if p.is_file())


class TestConfig:
    def test_defaults_parse(self):
        cfg = parse_config({})
        assert cfg.methods == ("er",) and cfg.seeds == (0,)

    def test_unknown_key_named(self):
        with pytest.raises(ConfigurationError, match=r"train\.epoch"):
            parse_config({"train": {"epoch": 3}})
        with pytest.raises(ConfigurationError, match="bogus"):
            parse_config({"bogus": 1})

    def test_bad_values(self):
        with pytest.raises(ConfigurationError):
            parse_config({"methods": ["icarl"]})
        with pytest.raises(ConfigurationError):
            parse_config({"methods": ["joint+lider"]})
        with pytest.raises(ConfigurationError):
            parse_config({"seeds": ["a"]})
        with pytest.raises(ConfigurationError):
            parse_config({"lider": {"alpha": -1}})

    def test_malformed_json_reports_position(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{"seeds": [0,]}')
        with pytest.raises(ConfigurationError, match=r"bad\.json:1:"):
            load_config(p)

    def test_missing_csv(self, tmp_path):
        with pytest.raises(ConfigurationError):
            parse_config({"stream": {"kind": "csv", "path": str(tmp_path / "none.csv")}})

    def test_out_precedence(self, tmp_path, monkeypatch):
        cfg = parse_config({"out": str(tmp_path / "from_cfg")})
        monkeypatch.setenv(OUT_ENV, str(tmp_path / "from_env"))
        assert out_root(str(tmp_path / "cli"), cfg) == tmp_path / "cli"
        assert out_root(None, cfg) == tmp_path / "from_cfg"
        assert out_root(None, parse_config({})) == tmp_path / "from_env"
        monkeypatch.delenv(OUT_ENV)
        assert out_root(None, parse_config({})).name == DEFAULT_OUT


class TestExitCodes:
    def test_config_error_is_2(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {"train": {"epoch": 1}})
        assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
        assert "train.epoch" in capsys.readouterr().err

    def test_missing_config_is_2(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "nope.json")]) == 2

    def test_numeric_failure_is_3(self, tmp_path):
        doc = json.loads(json.dumps(TINY))
        doc["methods"] = ["er"]
        doc["train"]["lr"] = 1e300
        assert main(["run", "--config", write_config(tmp_path, doc),
                     "--out", str(tmp_path / "o")]) == 3

    def test_console_script(self, tmp_path):
        cfg = write_config(tmp_path, {"bogus": 1})
        proc = subprocess.run([sys.executable, "-m", "liderlab.cli", "run", "--config", cfg],
                              capture_output=True, text=True, cwd=tmp_path)
        assert proc.returncode == 2 and "bogus" in proc.stderr


class TestRun:
    def test_layout_and_summary(self, tmp_path):
        out = tmp_path / "o"
        assert main(["run", "--config", write_config(tmp_path), "--out", str(out)]) == 0
        for m in ("er", "er+lider"):
            d = out / m / "seed_0"
            for f in ("cil.csv", "til.csv", "summary.json", "checkpoints/model_task0.json",
                      "checkpoints/model_task1.json", "checkpoints/buffer_task1.json"):
                assert (d / f).is_file(), f
            summary = json.loads((d / "summary.json").read_text())
            assert summary["method"] == m and summary["seed"] == 0
            assert 0.0 <= summary["faa_cil"] <= 1.0
            assert summary["config"]["train"]["epochs"] == 1
            assert (summary["config"]["lider"] is None) == (m == "er")
        with open(out / "er" / "seed_0" / "cil.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["task", "after_0", "after_1"] and rows[2][1] == ""
        assert json.loads((out / "results.json").read_text())["methods"].keys() == {"er", "er+lider"}

    def test_deterministic(self, tmp_path):
        cfg = write_config(tmp_path)
        for name in ("a", "b"):
            assert main(["run", "--config", cfg, "--out", str(tmp_path / name)]) == 0
        for f in files_under(tmp_path / "a"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f

    def test_jobs_match_serial(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["run", "--config", cfg, "--out", str(tmp_path / "s"), "--seeds", "0,1"]) == 0
        assert main(["run", "--config", cfg, "--out", str(tmp_path / "p"), "--seeds", "0,1",
                     "--jobs", "2"]) == 0
        assert (tmp_path / "s" / "results.json").read_text() == \
            (tmp_path / "p" / "results.json").read_text()

    def test_outputs_stay_under_out(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        cfg = write_config(tmp_path)
        before = set(files_under(tmp_path))
        assert main(["run", "--config", cfg, "--out", "o"]) == 0
        new = set(files_under(tmp_path)) - before
        assert new and all(f.startswith("o/") for f in new)


class TestSweepPoison:
    def test_sweep_1x1(self, tmp_path):
        out = tmp_path / "o"
        assert main(["sweep", "--config", write_config(tmp_path), "--out", str(out),
                     "--alphas", "0.1", "--betas", "0.2"]) == 0
        assert (out / "alpha_0.1_beta_0.2" / "er+lider" / "seed_0" / "summary.json").is_file()
        with open(out / "sweep_er_delta.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows == [["alpha\\beta", "0.2"], ["0.1", "0.0"]]

    def test_sweep_2x2(self, tmp_path):
        out = tmp_path / "o"
        assert main(["sweep", "--config", write_config(tmp_path), "--out", str(out),
                     "--alphas", "0,0.5", "--betas", "0,0.5"]) == 0
        sweep = json.loads((out / "sweep.json").read_text())
        grid = sweep["methods"]["er"]["faa"]
        assert len(grid) == 2 and len(grid[0]) == 2
        # the alpha = beta = 0 cell is a plain ER run
        assert main(["run", "--config", write_config(tmp_path), "--out", str(tmp_path / "r")]) == 0
        plain = json.loads((tmp_path / "r" / "er" / "seed_0" / "summary.json").read_text())
        assert grid[0][0] == plain["faa_cil"]

    def test_poison_csv(self, tmp_path):
        out = tmp_path / "o"
        assert main(["poison", "--config", write_config(tmp_path), "--out", str(out),
                     "--p", "0,1"]) == 0
        with open(out / "poison.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [(r["method"], r["p"]) for r in rows] == [
            ("er", "0.0"), ("er+lider", "0.0"), ("er", "1.0"), ("er+lider", "1.0")]
        assert all(r["n_seeds"] == "1" for r in rows)

    def test_poison_rate_validated(self, tmp_path):
        assert main(["poison", "--config", write_config(tmp_path), "--out", str(tmp_path / "o"),
                     "--p", "1.5"]) == 2


class TestAnalyze:
    @pytest.fixture
    def trained(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["run", "--config", cfg, "--out", str(tmp_path / "run")]) == 0
        return cfg, tmp_path / "run" / "er" / "seed_0" / "checkpoints"

    @pytest.mark.parametrize("kind,artifact", [("surface", "surface.csv"), ("guess", "roc.csv"),
                                               ("perturb", "robustness.csv"),
                                               ("lipschitz", "lipschitz.csv")])
    def test_kinds(self, tmp_path, trained, kind, artifact):
        cfg, ckpt = trained
        out = tmp_path / kind
        assert main(["analyze", kind, "--config", cfg, "--checkpoint",
                     str(ckpt / "model_task1.json"), "--out", str(out)]) == 0
        assert (out / artifact).is_file() and (out / f"{kind}.json").is_file()

    def test_guess_without_buffer_dump(self, tmp_path, trained):
        cfg, ckpt = trained
        lone = tmp_path / "lone" / "model_task1.json"
        lone.parent.mkdir()
        lone.write_bytes((ckpt / "model_task1.json").read_bytes())
        assert main(["analyze", "guess", "--config", cfg, "--checkpoint", str(lone),
                     "--out", str(tmp_path / "g")]) == 2

    def test_unknown_kind(self, tmp_path, trained):
        cfg, ckpt = trained
        assert main(["analyze", "nope", "--config", cfg, "--checkpoint",
                     str(ckpt / "model_task1.json"), "--out", str(tmp_path / "x")]) == 2
