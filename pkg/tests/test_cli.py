import json
import shutil
import subprocess
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import pytest

from difftest import cli
from difftest.cli import SEED_ENV, main
from difftest.errors import AllStartsFailed, OptimizerInconsistency
from difftest.simulate import load_path

TINY = {"name": "tiny", "model": "ou", "truth": {"alpha": [1.0], "beta": [2.0]},
        "hyp1": [[0, 1.0]], "hyp2": [[0, 2.0]], "n_list": [200], "replications": 20,
        "mode": "case_table", "master_seed": 5}


def simulate(tmp_path, *extra, name="p.csv", seed="7", n="1000", theta="1.0,2.0"):
    out = tmp_path / name
    code = main(["simulate", "--model", "ou", "--theta", theta, "--n", n, "--h-rule", "n^-2/3",
                 "--seed", seed, "--out", str(out), *extra])
    return code, out


def data_rows(path: Path) -> list[str]:
    return [l for l in path.read_text().splitlines() if l and not l.startswith("#")]


class TestSimulate:
    def test_row_count(self, tmp_path, capsys):
        code, out = simulate(tmp_path)
        assert code == 0
        assert len(data_rows(out)) == 1 + 1001  # header + states
        assert "n=1000" in capsys.readouterr().out

    def test_deterministic(self, tmp_path):
        _, a = simulate(tmp_path, name="a.csv")
        _, b = simulate(tmp_path, name="b.csv")
        assert a.read_bytes() == b.read_bytes()

    def test_degenerate_theta(self, tmp_path, capsys):
        code, _ = simulate(tmp_path, theta="0.0,2.0")
        assert code == 3
        assert "NotPositiveDefinite" in capsys.readouterr().err

    def test_euler_sampler(self, tmp_path):
        code, out = simulate(tmp_path, "--sampler", "euler", "--substeps", "2", n="50")
        assert code == 0
        assert load_path(out).n == 50

    def test_bad_theta_length(self, tmp_path):
        code, _ = simulate(tmp_path, theta="1.0")
        assert code == 2

    def test_model2(self, tmp_path):
        out = tmp_path / "m2.csv"
        assert main(["simulate", "--model", "model2", "--theta", "1,1,0.5,2,2", "--n", "100",
                     "--h", "0.01", "--seed", "1", "--out", str(out)]) == 0
        assert load_path(out).model_name == "model2"


class TestTest:
    def test_text_report(self, tmp_path, capsys):
        _, data = simulate(tmp_path)
        capsys.readouterr()
        assert main(["test", "--data", str(data), "--fix-alpha", "0=1.0", "--fix-beta", "0=2.0"]) == 0
        out = capsys.readouterr().out
        for word in ("LR", "Wald", "Rao", "p-value", "case (level 0.05)"):
            assert word in out

    def test_json_schema(self, tmp_path, capsys):
        schema = json.loads(resources.files("difftest").joinpath("schemas/test_report.schema.json").read_text())
        _, data = simulate(tmp_path)
        capsys.readouterr()
        assert main(["test", "--data", str(data), "--model", "ou", "--fix-alpha", "0=1.0",
                     "--fix-beta", "0=2.0", "--json"]) == 0
        report = json.loads(capsys.readouterr().out)
        jsonschema.validate(report, schema)

    def test_hook_own_estimate(self, tmp_path, capsys):
        _, data = simulate(tmp_path)
        capsys.readouterr()
        main(["test", "--data", str(data), "--fix-alpha", "0=1.0", "--fix-beta", "0=2.0", "--json"])
        first = json.loads(capsys.readouterr().out)
        a_hat = first["estimates"]["alpha_hat"][0]
        b_hat = first["estimates"]["beta_hat"][0]
        main(["test", "--data", str(data), "--fix-alpha", f"0={a_hat!r}",
              "--fix-beta", f"0={b_hat!r}", "--json"])
        hooked = json.loads(capsys.readouterr().out)
        for stage in ("stage1", "stage2"):
            assert hooked[stage]["lambda"] == 0.0 and hooked[stage]["wald"] == 0.0
            assert hooked[stage]["rao"] <= 1e-12
        assert set(hooked["case_by_statistic"].values()) == {1}

    def test_case_one_is_typical(self, tmp_path, capsys):
        cases = []
        for seed in range(60):
            _, data = simulate(tmp_path, seed=str(seed), n="1000")
            capsys.readouterr()
            main(["test", "--data", str(data), "--fix-alpha", "0=1.0", "--fix-beta", "0=2.0", "--json"])
            cases.append(json.loads(capsys.readouterr().out)["case_by_statistic"]["lambda"])
        assert 0.78 <= cases.count(1) / len(cases) <= 0.98

    def test_missing_data_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["test", "--fix-alpha", "0=1.0", "--fix-beta", "0=2.0"])
        assert exc.value.code == 2
        assert "usage" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["test", "--data", str(tmp_path / "none.csv"), "--fix-alpha", "0=1.0",
                     "--fix-beta", "0=2.0"]) == 3

    def test_malformed_file(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("t,x1\n0,1\n0.1,oops\n0.2,1\n")
        assert main(["test", "--data", str(bad), "--model", "ou", "--fix-alpha", "0=1.0",
                     "--fix-beta", "0=2.0"]) == 3

    def test_bad_pair(self, tmp_path):
        _, data = simulate(tmp_path, n="50")
        assert main(["test", "--data", str(data), "--fix-alpha", "alpha=1", "--fix-beta", "0=2.0"]) == 2

    def test_bad_level(self, tmp_path):
        _, data = simulate(tmp_path, n="50")
        assert main(["test", "--data", str(data), "--fix-alpha", "0=1", "--fix-beta", "0=2",
                     "--level", "1.5"]) == 2

    @pytest.mark.parametrize("error", [AllStartsFailed, OptimizerInconsistency])
    def test_estimation_failure(self, tmp_path, monkeypatch, error):
        def failing(*args, **kwargs):
            raise error("forced")

        _, data = simulate(tmp_path, n="50")
        monkeypatch.setattr(cli, "two_step_decision", failing)
        assert main(["test", "--data", str(data), "--fix-alpha", "0=1", "--fix-beta", "0=2"]) == 4


class TestExperiment:
    def _config(self, tmp_path, **overrides) -> Path:
        cfg = dict(TINY, output_dir=str(tmp_path / "out"))
        cfg.update(overrides)
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg))
        return path

    def test_outputs(self, tmp_path, capsys):
        assert main(["experiment", str(self._config(tmp_path)), "--threads", "1"]) == 0
        out_dir = tmp_path / "out"
        names = sorted(p.name for p in out_dir.iterdir())
        assert names == ["tiny_cases.csv", "tiny_ecdf.csv", "tiny_hist.csv", "tiny_rates.csv",
                         "tiny_replications.csv", "tiny_summary.json"]
        err = capsys.readouterr().err
        assert "100%" in err

    def test_experiment_abort_exit_code(self, tmp_path, monkeypatch):
        from difftest import mc

        def failing(*args, **kwargs):
            raise OptimizerInconsistency("forced")

        monkeypatch.setattr(mc, "two_step_decision", failing)
        assert main(["experiment", str(self._config(tmp_path))]) == 5

    def test_zero_replications(self, tmp_path):
        assert main(["experiment", str(self._config(tmp_path, replications=0))]) == 2

    def test_unknown_key(self, tmp_path):
        assert main(["experiment", str(self._config(tmp_path, replicates=10))]) == 2

    def test_missing_config(self, tmp_path):
        assert main(["experiment", str(tmp_path / "nope.json")]) == 2

    def test_large_n_needs_flag(self, tmp_path):
        assert main(["experiment", str(self._config(tmp_path, n_list=[200_000]))]) == 2

    def test_seed_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv(SEED_ENV, "99")
        assert main(["experiment", str(self._config(tmp_path))]) == 0
        summary = json.loads((tmp_path / "out" / "tiny_summary.json").read_text())
        assert summary["master_seed"] == 99
        assert "# master_seed: 99" in (tmp_path / "out" / "tiny_cases.csv").read_text()

    def test_threads_and_echo_reproduce(self, tmp_path):
        cfg = self._config(tmp_path)
        assert main(["experiment", str(cfg), "--threads", "1", "--output-dir", str(tmp_path / "a")]) == 0
        assert main(["experiment", str(cfg), "--threads", "3", "--output-dir", str(tmp_path / "b")]) == 0
        # rerun from the config echoed in an output header
        header = (tmp_path / "a" / "tiny_cases.csv").read_text().splitlines()[0]
        echoed = tmp_path / "echo.json"
        echoed.write_text(header.removeprefix("# config: "))
        assert main(["experiment", str(echoed), "--output-dir", str(tmp_path / "c")]) == 0
        for kind in ("cases", "rates", "replications", "hist", "ecdf"):
            a = (tmp_path / "a" / f"tiny_{kind}.csv").read_bytes()
            assert a == (tmp_path / "b" / f"tiny_{kind}.csv").read_bytes()
            assert a == (tmp_path / "c" / f"tiny_{kind}.csv").read_bytes()

    def test_bundled_configs_validate(self):
        from difftest.cli import _resolve_config_path, load_cli_config

        root = resources.files("difftest").joinpath("configs")
        names = sorted(p.name for p in root.iterdir() if p.name.endswith(".json"))
        assert "model1_case1.json" in names and "model1_local.json" in names
        for name in names:
            load_cli_config(_resolve_config_path(name)).experiment().validate_against_model()


@pytest.mark.skipif(shutil.which("difftest") is None, reason="console script not installed")
def test_console_script(tmp_path):
    out = tmp_path / "p.csv"
    proc = subprocess.run(["difftest", "simulate", "--model", "ou", "--theta", "1,2", "--n", "20",
                           "--seed", "1", "--out", str(out)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "difftest", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0
