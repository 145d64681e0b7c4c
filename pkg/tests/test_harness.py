import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pdmc import cli
from pdmc.config import (OUTPUT_ENV, ConfigValidationError, ExperimentConfig, dump_kv_text,
                         load_config, parse_kv_text)
from pdmc.harness import (SummaryStats, code_hash, export_figure_data, run_experiment,
                          table1_trends)
from pdmc.io import read_csv


class TestConfig:
    def test_defaults_validate(self):
        cfg = load_config()
        assert cfg.algo == "zigzag" and cfg.n == 150 and cfg.data_seed == 19

    def test_precedence_cli_over_file_over_defaults(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# comment\nn = 300\nT = 50  # trailing\nseed = 3\n")
        cfg = load_config(path, {"seed": "7"})
        assert cfg.n == 300 and cfg.T == 50.0 and cfg.seed == 7
        assert cfg.N == ExperimentConfig().N

    def test_none_values(self):
        assert parse_kv_text("burn_in = none\n")["burn_in"] is None

    def test_roundtrip_dump(self, tmp_path):
        cfg = load_config(overrides={"algo": "bps", "refresh_rate": "2.0", "bound": "sum"})
        path = tmp_path / "c.cfg"
        path.write_text(dump_kv_text(cfg))
        assert load_config(path) == cfg

    @pytest.mark.parametrize("text", ["nonsense = 1\n", "n = abc\n", "n 3\n"])
    def test_bad_files(self, text):
        with pytest.raises(ConfigValidationError):
            parse_kv_text(text)

    @pytest.mark.parametrize("over", [
        {"algo": "bps", "refresh_rate": 0.0},
        {"estimator": "cv", "bound": "sum"},
        {"estimator": "simple", "bound": "max"},
        {"target": "gaussian", "bound": "sum"},
        {"algo": "bps", "epsilon": 0.1},
        {"T": 10.0, "burn_in": 10.0},
        {"N": 1},
        {"rate": 0.0},
    ])
    def test_capability_matrix(self, over):
        with pytest.raises(ConfigValidationError):
            load_config(overrides=over)

    def test_env_output_dir(self, monkeypatch, tmp_path):
        monkeypatch.setenv(OUTPUT_ENV, str(tmp_path))
        assert ExperimentConfig().output_dir == str(tmp_path)
        assert ExperimentConfig(out_dir="x").output_dir == "x"


class TestSummaryStats:
    @given(st.floats(1e-3, 1e6), st.floats(1e-3, 1e6), st.integers(0, 10**9), st.floats(1.0, 1e5))
    def test_product_identity(self, duration, e, proposals, horizon):
        s = SummaryStats.from_counts(duration, e, proposals, 3 * proposals, horizon)
        assert s.identity_error() <= 1e-9

    def test_zero_rate_sampler(self):
        s = SummaryStats.from_counts(90.0, 40.0, 0, 0, 100.0)
        assert s.iters_per_unit_time == 0.0 and s.iters_per_ess == 0.0
        assert s.identity_error() == 0.0

    def test_no_ess(self):
        s = SummaryStats.from_counts(90.0, 0.0, 10, 10, 100.0)
        assert math.isinf(s.t_per_ess)


def _small(tmp_path, **kw):
    base = dict(T=200.0, out_dir=str(tmp_path / "runs"), cache_dir=str(tmp_path / "cache"))
    base.update(kw)
    return load_config(overrides=base)


class TestRunExperiment:
    def test_sample_artifacts(self, tmp_path):
        out = run_experiment(_small(tmp_path))
        assert set(out.paths) == {"skeleton", "summary", "manifest"}
        man = json.loads(out.paths["manifest"].read_text())
        assert man["code_hash"] == code_hash() and man["seed"] == 0
        assert man["config"]["n"] == 150 and len(man["dataset_hash"]) > 0
        row = read_csv(out.paths["summary"])[0]
        assert float(row["iters_per_ess"]) == pytest.approx(
            float(row["t_per_ess"]) * float(row["iters_per_unit_time"]), rel=1e-9)
        assert out.stats.identity_error() <= 1e-9

    def test_byte_identical_reruns(self, tmp_path):
        a = run_experiment(_small(tmp_path, tag="a"))
        b = run_experiment(_small(tmp_path, tag="b"))
        for key in a.paths:
            if key == "manifest":
                ma, mb = (json.loads(p.read_text()) for p in (a.paths[key], b.paths[key]))
                ma["config"].pop("tag"), mb["config"].pop("tag")
                assert ma == mb
            else:
                assert a.paths[key].read_bytes() == b.paths[key].read_bytes()

    def test_manifest_reruns_experiment(self, tmp_path):
        a = run_experiment(_small(tmp_path, tag="a", estimator="cv", bound="cv"))
        cfg = ExperimentConfig(**json.loads(a.paths["manifest"].read_text())["config"])
        cfg.tag = "again"
        b = run_experiment(cfg)
        assert a.paths["skeleton"].read_bytes() == b.paths["skeleton"].read_bytes()

    def test_stream_changes_output(self, tmp_path):
        a = run_experiment(_small(tmp_path, tag="a"))
        b = run_experiment(_small(tmp_path, tag="b", stream=1))
        assert a.paths["skeleton"].read_bytes() != b.paths["skeleton"].read_bytes()

    def test_unknown_command(self, tmp_path):
        with pytest.raises(ValueError):
            run_experiment(_small(tmp_path), "nope")

    def test_smc_and_cis(self, tmp_path):
        cfg = _small(tmp_path, N=20, K=5, h=0.5, ess_threshold=10.0, T=5.0)
        smc = run_experiment(cfg, "smc")
        assert len(smc.paths["particles"].read_text().strip().split("\n")) == 6
        cis = run_experiment(cfg, "cis")
        last = json.loads(cis.paths["trajectory"].read_text().strip().split("\n")[-1])
        assert last["t"] == 5.0


class TestTrends:
    def _rows(self, canon, cv, sub):
        rows = []
        for method, vals in (("canonical", canon), ("cv", cv), ("subsampling", sub)):
            for n, (tpe, ipe) in zip((150, 1500, 15000), vals):
                rows.append({"method": method, "n": n, "t_per_ess": tpe, "iters_per_ess": ipe})
        return rows

    def test_expected_trend_rows_pass(self):
        rows = self._rows([(3.3, 190), (0.43, 600), (0.13, 2000)],
                          [(12.0, 4600), (1.1, 2100), (0.2, 3500)],
                          [(3.4, 800), (3.3, 4900), (3.4, 51000)])
        assert all(ok for ok, _ in table1_trends(rows).values())

    def test_violations_detected(self):
        rows = self._rows([(3.3, 1), (4.0, 1), (0.1, 1)], [(1.0, 1), (0.5, 10), (0.2, 1)],
                          [(1, 800), (1, 900), (1, 1000)])
        res = table1_trends(rows)
        assert not res["t_per_ess_decreasing_canonical"][0]
        assert not res["cv_iters_per_ess_flat"][0]
        assert not res["subsampling_iters_per_ess_growth"][0]


class TestExport:
    def test_rates_curves(self, tmp_path):
        cfg = _small(tmp_path)
        rows = export_figure_data("rates_curves", cfg, tmp_path / "rates.csv", n_grid=101)
        x = np.array([r["x"] for r in rows])
        canon = np.array([r["canonical"] for r in rows])
        simple = np.array([r["simple"] for r in rows])
        # the grid is centred on the mode, where the canonical rate vanishes
        assert canon[50] == pytest.approx(0.0, abs=1e-6)
        assert np.all(simple >= canon - 1e-9)
        assert len(read_csv(tmp_path / "rates.csv")) == len(x)

    def test_unknown_kind(self, tmp_path):
        with pytest.raises(ValueError):
            export_figure_data("bogus", _small(tmp_path), tmp_path / "x.csv")


class TestCli:
    def test_config_error_exit_code(self, capsys):
        assert cli.main(["sample", "--algo", "nope"]) == 2
        assert "config error" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        assert cli.main(["sample", "--config", str(tmp_path / "missing.cfg")]) == 2

    def test_sample_prints_summary(self, tmp_path, capsys):
        out = tmp_path / "skel.jsonl"
        code = cli.main(["sample", "--T", "100", "--out-dir", str(tmp_path), "--cache-dir",
                         str(tmp_path / "c"), "--out", str(out)])
        assert code == 0
        first = capsys.readouterr().out.splitlines()[0]
        assert "iters_per_ess" in json.loads(first)
        assert out.exists()

    def test_export(self, tmp_path, capsys):
        path = tmp_path / "v.csv"
        assert cli.main(["export", "--kind", "variance_curves", "--out", str(path)]) == 0
        row = read_csv(path)[0]
        assert set(row) == {"x", "var_rho_simple", "var_rho_cv", "var_grad_simple", "var_grad_cv"}

    def test_parser_lists_subcommands(self):
        text = cli.build_parser().format_help()
        for name in ("sample", "cis", "smc", "variance-study", "table1", "export"):
            assert name in text
