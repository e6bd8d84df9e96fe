"""Tests for cli.py - run-config parsing, output files and exit codes."""

import pandas as pd
import pytest

from cli import (
    EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, ConfigError, build_spec, load_run_config, main,
    parse_distribution, parse_offspring, parse_run_config,
)
from models import (
    Categorical, Configuration, CountTimes, Defective, Gamma, MarkovSIR, Multitype, ReedFrost,
)

BUNDLED = ["markov_sir.toml", "count_times_uniform.toml", "reed_frost.toml", "two_type.toml",
           "volz_regular.toml", "volz_heterogeneous.toml"]


def minimal_config(**run):
    settings = {"seed": 1, "N": [200], "replicates": 2}
    settings.update(run)
    return {"model": {"kind": "markov_sir", "beta": 2.0, "gamma": 1.0}, "run": settings,
            "output": {"dir": "out/test"}}


def write_toml(path, model_lines, run_lines="seed = 1\nN = [200]\nreplicates = 2"):
    path.write_text(f"[model]\n{model_lines}\n\n[run]\n{run_lines}\n\n[output]\ndir = \"unused\"\n")
    return str(path)


class TestParseDistribution:
    """Tests for distribution tables."""

    def test_gamma(self):
        assert parse_distribution({"family": "gamma", "shape": 2, "rate": 1}, "x") == Gamma(2.0, 1.0)

    def test_defective_mass(self):
        dist = parse_distribution({"family": "exponential", "rate": 1, "mass": 0.5}, "x")
        assert isinstance(dist, Defective)
        assert dist.total_mass == 0.5

    def test_unknown_family(self):
        with pytest.raises(ConfigError, match="unknown family"):
            parse_distribution({"family": "weibull"}, "model.times")

    def test_missing_parameter_names_field(self):
        with pytest.raises(ConfigError, match=r"model\.times\.rate: missing"):
            parse_distribution({"family": "exponential"}, "model.times")

    def test_unexpected_keys(self):
        with pytest.raises(ConfigError, match="unexpected keys"):
            parse_distribution({"family": "exponential", "rate": 1, "shape": 2}, "x")

    def test_invalid_value(self):
        with pytest.raises(ConfigError, match="rate must be positive"):
            parse_distribution({"family": "exponential", "rate": -1}, "x")


class TestParseOffspring:
    def test_categorical(self):
        assert parse_offspring({"law": "categorical", "probs": [0.5, 0.5]}, "x") == Categorical((0.5, 0.5))

    def test_unknown_law(self):
        with pytest.raises(ConfigError, match="unknown law"):
            parse_offspring({"law": "binomial"}, "model.offspring")


class TestBuildSpec:
    """Tests for [model] tables."""

    def test_kinds(self):
        assert isinstance(build_spec({"kind": "markov_sir", "beta": 2, "gamma": 1}), MarkovSIR)
        assert isinstance(build_spec({"kind": "reed_frost", "mu": 2}), ReedFrost)
        spec = build_spec({"kind": "count_times", "offspring": {"law": "poisson", "mean": 2},
                           "times": {"family": "uniform", "low": 0, "high": 1}})
        assert isinstance(spec, CountTimes)

    def test_multitype_matrix_of_times(self):
        exp = {"family": "exponential", "rate": 1}
        spec = build_spec({"kind": "multitype", "proportions": [0.5, 0.5], "mean": [[1, 1], [1, 1]],
                           "times": [[exp, exp], [exp, {"family": "gamma", "shape": 2, "rate": 2}]]})
        assert isinstance(spec, Multitype)
        assert spec.times[1][1] == Gamma(2.0, 2.0)

    def test_configuration(self):
        spec = build_spec({"kind": "configuration", "degree_probs": [0, 0.5, 0.5],
                           "contact": {"family": "gamma", "shape": 2, "rate": 2},
                           "infectious": {"family": "point", "at": 1.0}})
        assert isinstance(spec, Configuration)
        assert spec.degrees.tolist() == [2, 3]

    def test_unknown_kind(self):
        with pytest.raises(ConfigError, match="unknown kind"):
            build_spec({"kind": "seir"})

    def test_invalid_spec_wrapped(self):
        with pytest.raises(ConfigError, match="model: MarkovSIR needs"):
            build_spec({"kind": "markov_sir", "beta": -1, "gamma": 1})


class TestRunConfig:
    """Tests for [run] validation and flag overrides."""

    def test_seed_required(self):
        raw = minimal_config()
        del raw["run"]["seed"]
        with pytest.raises(ConfigError, match=r"run\.seed: missing"):
            parse_run_config(raw)

    def test_seed_flag_overrides(self):
        raw = minimal_config()
        del raw["run"]["seed"]
        assert parse_run_config(raw, seed=9).seed == 9

    def test_overrides(self):
        settings = parse_run_config(minimal_config(), out_dir="elsewhere", replicates=7)
        assert settings.out_dir == "elsewhere"
        assert settings.replicates == 7

    def test_unknown_tolerance(self):
        raw = minimal_config()
        raw["tolerances"] = {"wobble": 0.1}
        with pytest.raises(ConfigError, match="unknown tolerance"):
            parse_run_config(raw)

    def test_tolerance_override(self):
        raw = minimal_config()
        raw["tolerances"] = {"convergence": 0.2}
        assert parse_run_config(raw).tolerances["convergence"] == 0.2

    def test_bad_grid(self):
        with pytest.raises(ConfigError, match="run.u_step"):
            parse_run_config(minimal_config(u_min=0.0, u_max=1.0, u_step=0.3))

    def test_missing_section(self):
        with pytest.raises(ConfigError, match="output: missing section"):
            parse_run_config({"model": {}, "run": {}})

    @pytest.mark.parametrize("name", BUNDLED)
    def test_bundled_configs_load(self, config_path, name):
        settings = load_run_config(config_path(name))
        assert settings.seed > 0
        assert len(settings.grid) > 1

    def test_missing_file(self):
        with pytest.raises(ConfigError, match="no such file"):
            load_run_config("does/not/exist.toml")


class TestMain:
    """End-to-end subcommands and exit codes."""

    def test_constants_writes_csv(self, config_path, tmp_path):
        code = main(["constants", config_path("markov_sir.toml"), "--out", str(tmp_path)])
        assert code == EXIT_OK
        path = tmp_path / "constants.csv"
        text = path.read_text()
        assert "# seed: 20240611" in text
        frame = pd.read_csv(path, comment="#")
        values = dict(zip(frame["name"], frame["value"]))
        assert float(values["lambda"]) == pytest.approx(1.0)
        summary = (tmp_path / "summary.txt").read_text()
        assert summary.startswith("# tool_version")
        assert "# seed: 20240611" in summary
        assert "# config." in summary

    def test_simulate_writes_trajectories(self, tmp_path):
        config = write_toml(tmp_path / "run.toml", "kind = \"markov_sir\"\nbeta = 2.0\ngamma = 1.0")
        out = tmp_path / "out"
        assert main(["simulate", config, "--out", str(out)]) == EXIT_OK
        frame = pd.read_csv(out / "trajectory_N200_0001.csv", comment="#")
        assert list(frame.columns) == ["time", "type", "cum_infections", "S_1"]

    def test_same_seed_same_bytes(self, tmp_path):
        config = write_toml(tmp_path / "run.toml", "kind = \"markov_sir\"\nbeta = 2.0\ngamma = 1.0")
        main(["simulate", config, "--out", str(tmp_path / "a")])
        main(["simulate", config, "--out", str(tmp_path / "b")])
        first = (tmp_path / "a" / "trajectory_N200_0000.csv").read_bytes()
        assert first == (tmp_path / "b" / "trajectory_N200_0000.csv").read_bytes()

    def test_final_size_r0(self, capsys):
        assert main(["final-size", "--r0", "2"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "s_inf" in out
        assert "0.203188" in out

    def test_final_size_from_config(self, config_path, tmp_path):
        code = main(["final-size", config_path("volz_regular.toml"), "--out", str(tmp_path)])
        assert code == EXIT_OK
        frame = pd.read_csv(tmp_path / "final_size.csv", comment="#")
        values = dict(zip(frame["name"], frame["value"]))
        assert float(values["s_inf"]) == pytest.approx(0.125, abs=1e-9)

    def test_final_size_needs_input(self):
        assert main(["final-size"]) == EXIT_USAGE

    def test_missing_config_is_usage_error(self):
        assert main(["constants", "nope.toml"]) == EXIT_USAGE

    def test_unknown_command(self):
        assert main(["bogus"]) == EXIT_USAGE

    def test_subcritical_is_numerical_error(self, tmp_path):
        config = write_toml(tmp_path / "run.toml", "kind = \"markov_sir\"\nbeta = 0.5\ngamma = 1.0")
        assert main(["constants", config, "--out", str(tmp_path)]) == EXIT_NUMERICAL

    def test_reed_frost_needs_reed_frost(self, config_path, tmp_path):
        assert main(["reed-frost", config_path("markov_sir.toml"), "--out", str(tmp_path)]) == EXIT_USAGE
