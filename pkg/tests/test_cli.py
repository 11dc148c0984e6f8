"""CLI surface, config schema, deterministic batching, and artifact emission."""

import json
import math
from pathlib import Path

import numpy as np
import pytest

from fracsde import cli, mc
from fracsde.errors import ConfigError, DomainError, NumericError


def sq_task(rng, i):
    return rng.standard_normal() ** 2


# ---------------------------------------------------------------------------
# Monte Carlo batching


class TestMcBatch:
    def test_zero_paths_rejected(self):
        with pytest.raises(DomainError):
            mc.mc_batch(sq_task, 0, seed=1)

    @pytest.mark.parametrize("bad", [{"batch_size": 0}, {"workers": 0}])
    def test_bad_partitioning_rejected(self, bad):
        with pytest.raises(DomainError):
            mc.mc_batch(sq_task, 10, seed=1, **bad)

    def test_estimates_bit_identical_across_batch_sizes(self):
        runs = [mc.mc_batch(sq_task, 500, seed=3, batch_size=bs) for bs in (1, 64, 4096)]
        assert runs[0].estimate == runs[1].estimate == runs[2].estimate
        assert runs[0].standard_error == runs[1].standard_error == runs[2].standard_error
        assert all(r.n_effective == 500 for r in runs)

    def test_worker_count_does_not_change_bits(self):
        serial = mc.mc_batch(sq_task, 300, seed=9, batch_size=17, workers=1)
        threaded = mc.mc_batch(sq_task, 300, seed=9, batch_size=17, workers=4)
        assert serial.estimate == threaded.estimate
        assert serial.standard_error == threaded.standard_error

    def test_ci_covers_known_mean(self):
        # E X^2 = 1 for a standard normal; 95% CI over independent seeds
        covered = 0
        for seed in range(100):
            s = mc.mc_batch(sq_task, 400, seed=seed, batch_size=64)
            lo, hi = s.ci95()
            covered += lo <= 1.0 <= hi
        assert covered >= 90

    def test_batch_failure_names_the_batch(self):
        def explode(rng, i):
            if i == 130:
                raise ValueError("boom")
            return 1.0

        with pytest.raises(NumericError, match=r"batch 2"):
            mc.mc_batch(explode, 200, seed=0, batch_size=64)

    def test_exclusion_budget_enforced(self):
        def mostly_nan(rng, i):
            return math.nan if i % 3 == 0 else 1.0

        with pytest.raises(NumericError, match="budget"):
            mc.mc_batch(mostly_nan, 300, seed=0)

    def test_single_excluded_path_within_budget(self):
        def one_nan(rng, i):
            return math.nan if i == 7 else float(i)

        s = mc.mc_batch(one_nan, 2000, seed=0)
        assert s.excluded_paths == 1
        assert s.n_effective == 1999
        kept = [float(i) for i in range(2000) if i != 7]
        assert s.estimate == pytest.approx(np.mean(kept), rel=1e-12)

    def test_summary_serialises(self):
        s = mc.mc_batch(sq_task, 50, seed=4)
        blob = s.to_json_dict()
        assert set(blob) == {
            "estimate",
            "standard_error",
            "n_effective",
            "excluded_paths",
            "seed",
            "wall_time",
        }
        json.dumps(blob)

    def test_single_path_has_no_standard_error(self):
        s = mc.mc_batch(sq_task, 1, seed=4)
        assert math.isnan(s.standard_error)
        assert s.to_json_dict()["standard_error"] is None


# ---------------------------------------------------------------------------
# config schema


class TestConfigSchema:
    def test_round_trip_is_lossless(self):
        c = cli.RunConfig(
            experiment="converge",
            p=math.inf,
            q=7.5,
            mollification_levels=(0.5, 0.125),
            seed=99,
            output_dir="some/dir",
        )
        assert cli.config_from_mapping(cli.parse_config_text(cli.config_to_text(c))) == c

    def test_unknown_key_rejected_with_field(self):
        with pytest.raises(ConfigError) as err:
            cli.parse_config_text("experiment = simulate\nturbo = yes\n")
        assert err.value.field == "turbo"

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError):
            cli.parse_config_text("seed = 1\nseed = 2\n")

    def test_missing_equals_rejected(self):
        with pytest.raises(ConfigError):
            cli.parse_config_text("experiment simulate\n")

    def test_comments_and_blank_lines_ignored(self):
        raw = cli.parse_config_text("# hi\n\nseed = 5  # trailing\n")
        assert raw == {"seed": "5"}

    def test_schema_version_gate(self):
        with pytest.raises(ConfigError) as err:
            cli.config_from_mapping({"schema_version": "2"})
        assert err.value.field == "schema_version"

    def test_bad_value_names_the_field(self):
        with pytest.raises(ConfigError) as err:
            cli.config_from_mapping({"n_steps": "many"})
        assert err.value.field == "n_steps"

    @pytest.mark.parametrize(
        "field,value",
        [
            ("experiment", "dance"),
            ("H", 0.7),
            ("H", 0.0),
            ("n_steps", 1),
            ("n_paths", 0),
            ("generator_tag", "magic"),
            ("drift_kind", "cubic"),
            ("mollification_levels", (0.25, 0.5)),
            ("checkpoint_times", (0.5, 2.0)),
            ("quad_tol", 0.0),
        ],
    )
    def test_validate_rejects(self, field, value):
        cfg = cli.RunConfig(**{field: value})
        with pytest.raises(ConfigError) as err:
            cli.validate(cfg)
        assert err.value.field == field

    def test_shipped_example_parses_and_validates(self):
        text = (Path(__file__).resolve().parents[1] / "example.cfg").read_text()
        cfg = cli.config_from_mapping(cli.parse_config_text(text))
        cli.validate(cfg)
        assert cfg.experiment == "girsanov"

    def test_env_overrides_file_and_flags_override_env(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("experiment = regimes\noutput_dir = from_file\n")
        env = {"FRACSDE_OUT": "from_env"}
        cfg = cli.load_config(path=cfg_file, env=env)
        assert cfg.output_dir == "from_env"
        cfg = cli.load_config(path=cfg_file, env=env, overrides={"output_dir": "from_flag"})
        assert cfg.output_dir == "from_flag"


# ---------------------------------------------------------------------------
# run dispatch and artifacts


def run_cli(args, out_dir):
    return cli.main([*args, "--output-dir", str(out_dir)])


def load_summary(out_dir):
    return json.loads((Path(out_dir) / "summary.json").read_text(encoding="utf-8"))


class TestRunArtifacts:
    def test_regimes_example(self, tmp_path):
        rc = run_cli(["regimes", "--H", "0.25", "--d", "1", "--p", "2", "--q", "inf"], tmp_path)
        assert rc == 0
        blob = load_summary(tmp_path)
        assert blob["h1"] is True and blob["h2"] is True
        header = (tmp_path / "regimes.csv").read_text().splitlines()[0]
        assert header == "p,q,h1,h2,weak14,row_1,row_2,row_3,row_4,row_5,row_6,row_7,row_8"
        assert (tmp_path / "regimes.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_simulate_then_holder_check(self, tmp_path):
        sim = tmp_path / "sim"
        rc = run_cli(["simulate", "--n-steps", "128", "--n-paths", "300", "--seed", "7"], sim)
        assert rc == 0
        ver = tmp_path / "ver"
        rc = run_cli(
            ["verify", "--check", "holder", "--n-steps", "128", "--n-paths", "300", "--seed", "7"],
            ver,
        )
        assert rc == 0
        report = json.loads((ver / "verification_report.json").read_text())
        (check,) = report["checks"]
        assert check["check_name"] == "holder_slope"
        assert check["verdict"] == "pass"
        assert abs(check["implied_constant"] - 2 * 0.3) <= 0.05

    def test_rerun_same_seed_is_byte_identical(self, tmp_path):
        args = ["simulate", "--n-steps", "64", "--n-paths", "200", "--seed", "11"]
        assert run_cli(args, tmp_path) == 0
        before = {p.name: p.read_bytes() for p in tmp_path.iterdir()}
        assert run_cli(args, tmp_path) == 0
        for name, old in before.items():
            new = (tmp_path / name).read_bytes()
            if name == "summary.json":
                a, b = json.loads(old), json.loads(new)
                a.pop("wall_time"), b.pop("wall_time")
                assert a == b
            else:
                assert new == old, name

    def test_simulate_covariance_within_band(self, tmp_path):
        rc = run_cli(["simulate", "--n-steps", "64", "--n-paths", "500", "--seed", "3"], tmp_path)
        assert rc == 0
        q = load_summary(tmp_path)["quantities"]
        assert q["covariance_worst_abs_z"]["value"] <= q["covariance_worst_abs_z"]["tol"]

    def test_girsanov_smooth_drift(self, tmp_path):
        rc = run_cli(
            ["girsanov", "--n-steps", "64", "--n-paths", "400", "--drift-kind", "gauss",
             "--drift-strength", "0.5", "--seed", "7"],
            tmp_path,
        )
        assert rc == 0
        q = load_summary(tmp_path)["quantities"]
        assert q["weight_minus_one_abs_z"]["value"] <= 4.0
        header = (tmp_path / "weights.csv").read_text().splitlines()[0]
        assert header == "path_id,ito_sum,qv_sum,xi"
        assert (tmp_path / "reweighted_covariance.csv").exists()
        assert (tmp_path / "weights.png").exists()

    def test_converge_admissible_singular(self, tmp_path):
        rc = run_cli(
            ["converge", "--n-steps", "128", "--n-paths", "150", "--drift-kind",
             "singular_power", "--drift-gamma", "0.2", "--p", "4", "--seed", "7",
             "--mollification-levels", "0.5,0.25,0.125"],
            tmp_path,
        )
        assert rc == 0
        rows = (tmp_path / "convergence.csv").read_text().splitlines()
        assert rows[0] == "kind,parameter,distance"
        kinds = {r.split(",")[0] for r in rows[1:]}
        assert kinds == {"mollification", "step"}

    def test_flow_writes_slopes(self, tmp_path):
        rc = run_cli(
            ["flow", "--n-steps", "128", "--n-paths", "150", "--drift-kind", "gauss",
             "--seed", "7"],
            tmp_path,
        )
        assert rc == 0
        q = load_summary(tmp_path)["quantities"]
        assert q["time_slope"]["value"] >= 0.9 * 2 * 0.3
        assert (tmp_path / "flow.csv").exists()

    def test_verify_battery_all_pass(self, tmp_path):
        rc = run_cli(["verify", "--n-steps", "64", "--n-paths", "200", "--seed", "7"], tmp_path)
        assert rc == 0
        report = json.loads((tmp_path / "verification_report.json").read_text())
        assert report["n_passed"] == report["n_checks"] >= 7
        # every sweep-carrying check emits its CSV
        assert (tmp_path / "density_bound_sweep.csv").exists()
        assert (tmp_path / "kernel_bounds_sweep.csv").exists()

    def test_every_reported_quantity_carries_se_or_tol(self, tmp_path):
        rc = run_cli(["simulate", "--n-steps", "64", "--n-paths", "100", "--seed", "1"], tmp_path)
        assert rc == 0
        for name, obj in load_summary(tmp_path)["quantities"].items():
            assert "value" in obj, name
            assert ("se" in obj) ^ ("tol" in obj), name

    def test_config_echo_written_next_to_artifacts(self, tmp_path):
        rc = run_cli(["regimes", "--H", "0.2"], tmp_path)
        assert rc == 0
        echoed = cli.config_from_mapping(
            cli.parse_config_text((tmp_path / "run.cfg").read_text())
        )
        assert echoed.H == 0.2
        assert echoed.experiment == "regimes"


class TestExitCodes:
    def test_schema_violation_is_2(self, tmp_path, capsys):
        rc = run_cli(["simulate", "--H", "0.7"], tmp_path)
        assert rc == 2
        assert "H" in capsys.readouterr().err

    def test_unparseable_flag_is_2(self, tmp_path, capsys):
        rc = run_cli(["simulate", "--n-steps", "many"], tmp_path)
        assert rc == 2
        assert "n_steps" in capsys.readouterr().err

    def test_girsanov_without_coupled_noise_is_2(self, tmp_path, capsys):
        rc = run_cli(["girsanov", "--generator-tag", "cholesky"], tmp_path)
        assert rc == 2
        assert "volterra" in capsys.readouterr().err

    def test_regime_refusal_is_3_and_names_inequality(self, tmp_path, capsys):
        rc = run_cli(
            ["converge", "--H", "0.45", "--d", "2", "--p", "2", "--q", "2",
             "--drift-kind", "gauss"],
            tmp_path,
        )
        assert rc == 3
        assert "1/q + H*d/p" in capsys.readouterr().err

    def test_numeric_hard_error_is_4(self, tmp_path, capsys):
        # raw singular drift in the weight run: every path hits the
        # singularity budget and the run aborts
        rc = run_cli(
            ["girsanov", "--drift-kind", "singular_power", "--drift-gamma", "0.2",
             "--p", "4", "--n-steps", "64", "--n-paths", "100"],
            tmp_path,
        )
        assert rc == 4
        assert "excluded" in capsys.readouterr().err
