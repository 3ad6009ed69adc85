import os
import subprocess
import sys

import pytest

from mfgrowth import cli
from mfgrowth.cli import (ConfigError, config_hash, default_config_path,
                          parse_config, serialize_config)


def run_cli(*args, timeout=300):
    return subprocess.run([sys.executable, "-m", "mfgrowth.cli", *args],
                          capture_output=True, text=True, timeout=timeout)


TINY = """\
[run]
seed = 3

[model]
T = 10.0
sigma = 0.0
gamma = 0.0

[solver]
max_outer_iterations = 2
policy_steps = 4
regression_steps = 10
scenarios = 3
paths_per_scenario = 2
n_steps = 8
hidden_layers = [5]
validation_interval = 2
"""


@pytest.fixture(scope="module")
def tiny_toml(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.toml"
    path.write_text(TINY)
    return str(path)


@pytest.fixture(scope="module")
def run_dir(tiny_toml, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("run") / "out")
    res = run_cli("--deterministic", "solve", "--config", tiny_toml,
                  "--out", out)
    assert res.returncode == 0, res.stderr
    return out


def read_csv_lines(path):
    with open(path) as fh:
        return fh.read().splitlines()


class TestConfigParsing:
    def test_default_config_parses(self):
        config = parse_config(default_config_path())
        assert config.model.n == 2
        assert config.model.T == 45.0
        assert config.solver.hidden_layers == (20, 20, 20)
        assert config.solver.n_steps == 90
        assert config.contraction is not None
        assert config.monotonicity is not None
        assert config.out_dir is None

    def test_round_trip_identity(self, tmp_path):
        first = parse_config(default_config_path())
        echo = tmp_path / "echo.toml"
        echo.write_text(serialize_config(first))
        second = parse_config(str(echo))
        assert first.as_dict() == second.as_dict()

    def test_round_trip_of_sparse_config(self, tiny_toml, tmp_path):
        first = parse_config(tiny_toml)
        echo = tmp_path / "echo.toml"
        echo.write_text(serialize_config(first))
        second = parse_config(str(echo))
        assert first.as_dict() == second.as_dict()

    @pytest.mark.parametrize("body,where", [
        ("[model]\nbogus = 1\n", "[model]"),
        ("[solver]\nbogus = 1\n", "[solver]"),
        ("[run]\nbogus = 1\n", "[run]"),
        ("[analysis.contraction]\nbogus = 1.0\n", "[analysis.contraction]"),
        ("[weird]\nx = 1\n", "top level"),
    ])
    def test_unknown_keys_rejected_with_location(self, tmp_path, body,
                                                 where):
        path = tmp_path / "bad.toml"
        path.write_text("[run]\nseed = 0\n" if where != "[run]" else "")
        path.write_text(path.read_text() + body)
        with pytest.raises(ConfigError, match="bogus|weird") as err:
            parse_config(str(path))
        assert where in str(err.value)

    def test_invalid_model_value_is_config_error(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[model]\ntheta = -1.0\n")
        with pytest.raises(ConfigError):
            parse_config(str(path))

    def test_seed_and_out_overrides(self, tiny_toml):
        config = parse_config(tiny_toml, seed_override=11,
                              out_override="/somewhere")
        assert config.seed == 11
        assert config.solver.seed == 11
        assert config.out_dir == "/somewhere"

    def test_stop_tol_survives_round_trip(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("[solver]\nstop_tol = 0.5\n")
        config = parse_config(str(path))
        assert config.solver.stop_tol == 0.5
        again = parse_config_text(serialize_config(config), tmp_path)
        assert again.solver.stop_tol == 0.5

    def test_hash_ignores_output_directory(self, tiny_toml):
        a = parse_config(tiny_toml, out_override="/a")
        b = parse_config(tiny_toml, out_override="/b")
        assert config_hash(a) == config_hash(b)

    def test_hash_tracks_seed(self, tiny_toml):
        a = parse_config(tiny_toml, seed_override=1)
        b = parse_config(tiny_toml, seed_override=2)
        assert config_hash(a) != config_hash(b)


def parse_config_text(text, tmp_path):
    path = tmp_path / "again.toml"
    path.write_text(text)
    return parse_config(str(path))


def contraction_section(**overrides):
    """Every constant must be stated, so start from an all-zero table."""
    fields = dict.fromkeys(
        ("drift_in_emission", "drift_in_pollution", "emission_map",
         "pollution_vol", "capital_vol", "terminal_slope_in_capital",
         "terminal_slope_in_pollution", "adjoint_drift_in_capital",
         "adjoint_drift_in_pollution", "adjoint_drift_in_costate",
         "control_in_capital", "control_in_pollution",
         "control_in_costate", "depreciation", "discount"), 0.0)
    fields["horizon"] = 1.0
    fields.update(overrides)
    lines = ["[analysis.contraction]"]
    lines += [f"{k} = {v!r}" for k, v in fields.items()]
    return "\n".join(lines) + "\n"


class TestSolveCommand:
    def test_missing_config_exit_2(self):
        res = run_cli("solve", "--config", "/does/not/exist.toml")
        assert res.returncode == 2
        assert "not found" in res.stderr

    def test_unknown_key_exit_2(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[model]\nbogus = 1\n")
        res = run_cli("solve", "--config", str(path))
        assert res.returncode == 2
        assert "[model]" in res.stderr and "bogus" in res.stderr

    def test_no_output_directory_exit_2(self, tiny_toml):
        res = run_cli("solve", "--config", tiny_toml)
        assert res.returncode == 2
        assert "output directory" in res.stderr

    def test_artifacts_written(self, run_dir):
        for name in ("manifest.toml", "iterations.csv",
                     "policy_final.txt"):
            assert os.path.isfile(os.path.join(run_dir, name))
        assert os.path.isfile(os.path.join(run_dir, "checkpoints",
                                           "policy_001.txt"))
        assert os.path.isfile(os.path.join(run_dir, "checkpoints",
                                           "field_001.txt"))

    def test_trace_has_comment_and_header(self, run_dir):
        lines = read_csv_lines(os.path.join(run_dir, "iterations.csv"))
        assert lines[0].startswith("# seed=3 config_sha256=")
        assert lines[1] == "j,stop_metric,validation_objective,wall_time"
        assert len(lines) >= 3

    def test_manifest_echoes_config(self, run_dir):
        config = cli._parse_manifest(os.path.join(run_dir,
                                                  "manifest.toml"))
        assert config.seed == 3
        assert config.model.T == 10.0
        assert config.solver.scenarios == 3

    def test_deterministic_rerun_bit_identical(self, tiny_toml, run_dir,
                                               tmp_path):
        out = str(tmp_path / "again")
        res = run_cli("--deterministic", "solve", "--config", tiny_toml,
                      "--out", out)
        assert res.returncode == 0
        with open(os.path.join(run_dir, "iterations.csv"), "rb") as fh:
            first = fh.read()
        with open(os.path.join(out, "iterations.csv"), "rb") as fh:
            second = fh.read()
        assert first == second

    def test_numeric_abort_exit_3(self, tmp_path):
        path = tmp_path / "blow.toml"
        path.write_text(
            "[run]\nseed = 0\nout_dir = '" + str(tmp_path / "b") + "'\n"
            "[model]\nT = 2.0\n"
            "[solver]\nmax_outer_iterations = 1\npolicy_steps = 3\n"
            "regression_steps = 5\nscenarios = 2\n"
            "paths_per_scenario = 2\nn_steps = 4\nhidden_layers = [4]\n"
            "learning_rate = 1e12\n")
        res = run_cli("solve", "--config", str(path))
        assert res.returncode == 3
        assert "batch seed" in res.stderr


@pytest.fixture(scope="module")
def reported(run_dir):
    res = run_cli("report", run_dir)
    assert res.returncode == 0, res.stderr
    return run_dir


class TestReportCommand:
    def test_missing_manifest_exit_2(self, tmp_path):
        res = run_cli("report", str(tmp_path))
        assert res.returncode == 2
        assert "manifest" in res.stderr

    def test_quantiles_degenerate_without_noise(self, reported):
        lines = read_csv_lines(os.path.join(reported,
                                            "pollution_quantiles.csv"))
        assert lines[1] == "t,q05,mean,q95"
        for line in lines[2:]:
            _, q05, mean, q95 = line.split(",")
            # identical paths: the order statistics agree exactly, the
            # mean only up to accumulated rounding
            assert float(q05) == float(q95)
            assert abs(float(mean) - float(q05)) <= 1e-12 * (
                1.0 + abs(float(q05)))

    def test_scenario_pair_rows(self, reported):
        lines = read_csv_lines(os.path.join(reported,
                                            "scenario_pair.csv"))
        header = lines[1].split(",")
        assert header == ["scenario", "step", "t", "p", "b1",
                          "mean_production", "mean_consumption"]
        body = lines[2:]
        assert len(body) == 2 * 9
        terminal = [r for r in body if r.split(",")[1] == "8"]
        assert all(r.endswith(",") for r in terminal)
        interior = [r for r in body if r.split(",")[1] != "8"]
        assert all(float(r.split(",")[6]) > 0 for r in interior)

    def test_histogram_counts_conserved(self, reported):
        path = os.path.join(reported, "distributions_t5.csv")
        lines = read_csv_lines(path)
        assert lines[1] == "variable,bin_low,bin_high,count"
        totals = {}
        for line in lines[2:]:
            name, _, _, count = line.split(",")
            totals[name] = totals.get(name, 0) + int(count)
        assert set(totals) == {"k1", "k2", "a1", "a2"}
        assert all(total == 3 * 2 for total in totals.values())

    def test_times_beyond_horizon_skipped(self, reported):
        assert os.path.isfile(os.path.join(reported,
                                           "distributions_t10.csv"))
        assert not os.path.exists(os.path.join(reported,
                                               "distributions_t15.csv"))

    def test_csvs_carry_manifest_comment(self, reported):
        for name in ("pollution_quantiles.csv", "scenario_pair.csv",
                     "distributions_t5.csv"):
            first = read_csv_lines(os.path.join(reported, name))[0]
            assert first.startswith("# seed=3 config_sha256=")


class TestCheckCommand:
    def test_packaged_defaults_pass(self):
        res = run_cli("check")
        assert res.returncode == 0
        assert "holds" in res.stdout
        assert "FAILS" not in res.stdout

    def test_tiny_horizon_contraction_passes(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text(contraction_section(
            drift_in_emission=5.0, emission_map=5.0,
            terminal_slope_in_capital=5.0, control_in_costate=5.0,
            horizon=0.01))
        res = run_cli("check", "--config", str(path))
        assert res.returncode == 0

    def test_dominating_constant_fails_exit_1(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text(contraction_section(
            drift_in_emission=50.0, emission_map=50.0,
            terminal_slope_in_capital=50.0, control_in_costate=50.0,
            horizon=1.0))
        res = run_cli("check", "--config", str(path))
        assert res.returncode == 1
        assert "FAILS" in res.stdout

    def test_no_analysis_section_exit_2(self, tiny_toml):
        res = run_cli("check", "--config", tiny_toml)
        assert res.returncode == 2

    def test_out_writes_constant_and_slack_csvs(self, tmp_path):
        out = tmp_path / "rep"
        res = run_cli("check", "--out", str(out))
        assert res.returncode == 0
        constants = read_csv_lines(str(out / "constants.csv"))
        slacks = read_csv_lines(str(out / "slacks.csv"))
        assert constants[0].startswith("# seed=")
        assert constants[1] == "name,value"
        names = [line.split(",")[0] for line in slacks[2:]]
        assert "convexity_slack" in names
        assert "lambda_verdict" in names


class TestSelftestCommand:
    def test_green_and_fast(self):
        import time

        started = time.monotonic()
        res = run_cli("selftest")
        elapsed = time.monotonic() - started
        assert res.returncode == 0
        assert elapsed < 60.0
        for name in ("autodiff-gradient", "investment-root-finder",
                     "adam-step", "quantile-properties"):
            assert f"{name}: ok" in res.stdout

    def test_injected_failure_names_the_property(self):
        res = run_cli("selftest", "--inject-failure", "autodiff-gradient")
        assert res.returncode == 1
        assert "autodiff-gradient" in res.stderr
        assert "FAIL" in res.stdout


def test_main_requires_subcommand():
    res = run_cli()
    assert res.returncode == 2
