"""End-to-end command-line pipeline: artifacts, determinism, error JSON."""

import csv
import json
import shutil
from types import SimpleNamespace

import pytest

from dva.cli import DEFAULT_WEIGHT_GRID, main
from dva.evaluation import load_predictions

LENGTH = 160


def synth_payload(seed=11):
    base = {
        "process": "sinusoid",
        "length": LENGTH,
        "noise_scale": 0.01,
        "amplitude": 0.05,
        "period": 8.0,
        "start_price": 1.0,
        "volume_noise": 0.0,
        "intraday_scale": 0.0,
    }
    return {
        "schema_version": 1,
        "seed": seed,
        "tickers": {"AAA": dict(base), "BBB": dict(base, phase=2.0)},
    }


def run_payload(data_dir, out_dir, **extra):
    payload = {
        "schema_version": 1,
        "data_dir": str(data_dir),
        "tickers_file": str(data_dir / "tickers.txt"),
        "out_dir": str(out_dir),
        "runs": 2,
        "t_in": 8,
        "t_out": 4,
        "epochs": 1,
        "batch_size": 8,
        "channels": 4,
        "latent": 2,
        "se_reduction": 2,
        "energy_hidden": 6,
        "portfolio": {"lambda": 0.05, "gamma_grid": [0.5, 2.0]},
    }
    payload.update(extra)
    return payload


def write_json(path, payload):
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, out = root / "data", root / "out"
    spec = write_json(root / "synth.json", synth_payload())
    cfg = write_json(root / "run.json", run_payload(data, out))

    assert main(["synth", "--spec", str(spec), "--out", str(data)]) == 0
    assert main(["train", "--config", str(cfg)]) == 0
    assert main(["predict", "--config", str(cfg), "--force"]) == 0
    assert main(["evaluate", "--config", str(cfg)]) == 0
    assert main(["portfolio", "--config", str(cfg)]) == 0
    assert (
        main(
            [
                "sweep",
                "--config",
                str(cfg),
                "--zeta-grid",
                "0.5",
                "--eta-grid",
                "1.0",
            ]
        )
        == 0
    )
    return SimpleNamespace(root=root, data=data, out=out, cfg=cfg, spec=spec)


def read_stderr_json(capsys):
    err = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(err)


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


class TestSynth:
    def test_row_counts(self, pipeline):
        lines = (pipeline.data / "AAA.csv").read_text().splitlines()
        assert len(lines) == LENGTH + 1  # header + one row per day
        truth = (pipeline.data / "AAA.truth.csv").read_text().splitlines()
        assert len(truth) == LENGTH  # header + length-1 returns
        assert (pipeline.data / "tickers.txt").read_text() == "AAA\nBBB\n"

    def test_deterministic(self, pipeline, tmp_path):
        for sub in ("x", "y"):
            assert (
                main(
                    ["synth", "--spec", str(pipeline.spec), "--out", str(tmp_path / sub)]
                )
                == 0
            )
        for name in ("AAA.csv", "AAA.truth.csv", "BBB.csv", "tickers.txt"):
            assert (tmp_path / "x" / name).read_bytes() == (
                tmp_path / "y" / name
            ).read_bytes()

    def test_seed_override_changes_data(self, pipeline, tmp_path):
        assert (
            main(
                [
                    "synth",
                    "--spec",
                    str(pipeline.spec),
                    "--out",
                    str(tmp_path / "z"),
                    "--seed",
                    "99",
                ]
            )
            == 0
        )
        assert (tmp_path / "z" / "AAA.csv").read_bytes() != (
            pipeline.data / "AAA.csv"
        ).read_bytes()

    def test_refuses_overwrite_then_force(self, pipeline, capsys):
        assert main(["synth", "--spec", str(pipeline.spec), "--out", str(pipeline.data)]) == 2
        payload = read_stderr_json(capsys)
        assert payload["error"] == "ConfigError"
        assert "--force" in payload["message"]
        assert (
            main(
                [
                    "synth",
                    "--spec",
                    str(pipeline.spec),
                    "--out",
                    str(pipeline.data),
                    "--force",
                ]
            )
            == 0
        )

    def test_missing_spec_field_named(self, tmp_path, capsys):
        payload = synth_payload()
        del payload["seed"]
        spec = write_json(tmp_path / "s.json", payload)
        assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "o")]) == 2
        assert "seed" in read_stderr_json(capsys)["message"]


# ---------------------------------------------------------------------------
# ingest-check
# ---------------------------------------------------------------------------


class TestIngestCheck:
    def test_reports_shapes(self, pipeline, capsys):
        assert main(["ingest-check", "--config", str(pipeline.cfg)]) == 0
        out = json.loads(capsys.readouterr().out.strip())
        assert out["ok"] is True
        info = out["tickers"]["AAA"]
        assert info["rows"] == LENGTH
        split = info["split"]
        assert split["train"] + split["val"] + split["test"] == info["windows"]

    def test_missing_data_dir(self, pipeline, tmp_path, capsys):
        cfg = write_json(
            tmp_path / "c.json", run_payload(tmp_path / "nodata", tmp_path / "o")
        )
        (tmp_path / "nodata").mkdir()
        (tmp_path / "nodata" / "tickers.txt").write_text("AAA\n")
        assert main(["ingest-check", "--config", str(cfg)]) == 3
        assert read_stderr_json(capsys)["error"] == "DataError"


# ---------------------------------------------------------------------------
# train / predict
# ---------------------------------------------------------------------------


class TestTrain:
    def test_metrics_contents(self, pipeline):
        metrics = json.loads((pipeline.out / "metrics.json").read_text())
        assert metrics["partial"] is False
        assert sorted(metrics["per_stock"]) == ["AAA", "BBB"]
        for entry in metrics["per_stock"].values():
            assert len(entry["runs"]) == 2
        assert metrics["run_config"]["data_dir"] == str(pipeline.data)
        assert metrics["run_config_hash"]
        assert (pipeline.out / "run_info.json").exists()

    def test_checkpoints_and_predictions(self, pipeline):
        for ticker in ("AAA", "BBB"):
            for run in (0, 1):
                assert (pipeline.out / "checkpoints" / f"{ticker}_run{run}.npz").exists()
                y_hat, y_true, dates = load_predictions(
                    pipeline.out / "predictions" / f"{ticker}_run{run}.csv"
                )
                assert len(y_hat) == len(y_true) == len(dates)

    def test_refuses_overwrite(self, pipeline, capsys):
        assert main(["train", "--config", str(pipeline.cfg)]) == 2
        assert "--force" in read_stderr_json(capsys)["message"]

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = write_json(
            tmp_path / "bad.json",
            dict(run_payload(tmp_path, tmp_path / "o"), epochz=3),
        )
        assert main(["train", "--config", str(cfg)]) == 2
        assert "epochz" in read_stderr_json(capsys)["message"]

    def test_config_flag_required(self, capsys):
        assert main(["train"]) == 2
        assert "--config" in read_stderr_json(capsys)["message"]


class TestPredict:
    def test_validation_predictions_exist(self, pipeline):
        for ticker in ("AAA", "BBB"):
            for run in (0, 1):
                path = pipeline.out / "predictions_val" / f"{ticker}_run{run}.csv"
                y_hat, y_true, dates = load_predictions(path)
                assert len(y_hat) > 0

    def test_regeneration_is_byte_identical(self, pipeline):
        target = pipeline.out / "predictions" / "AAA_run0.csv"
        before = target.read_bytes()
        assert main(["predict", "--config", str(pipeline.cfg), "--force"]) == 0
        assert target.read_bytes() == before

    def test_missing_checkpoints(self, pipeline, tmp_path, capsys):
        cfg = write_json(
            tmp_path / "c.json", run_payload(pipeline.data, tmp_path / "empty")
        )
        assert main(["predict", "--config", str(cfg)]) == 3
        assert "checkpoint" in read_stderr_json(capsys)["message"]


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


class TestEvaluate:
    def test_report_and_uncertainty(self, pipeline):
        report = json.loads((pipeline.out / "report.json").read_text())
        assert report["kind"] == "evaluation_report"
        assert report["baseline"] == "persistence"
        assert sorted(report["report"]["per_stock"]) == ["AAA", "BBB"]
        agg = report["report"]["aggregate"]
        assert agg["mean_of_stock_means"] > 0
        with open(pipeline.out / "uncertainty.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["stock", "sd_before", "pct_mse_change"]
        assert len(rows) == 3
        sds = [float(r[1]) for r in rows[1:]]
        assert sds == sorted(sds)

    def test_missing_predictions(self, pipeline, tmp_path, capsys):
        cfg = write_json(
            tmp_path / "c.json", run_payload(pipeline.data, tmp_path / "empty")
        )
        assert main(["evaluate", "--config", str(cfg)]) == 3
        assert "missing artifact" in read_stderr_json(capsys)["message"]

    def test_explicit_baseline_metrics(self, pipeline, tmp_path):
        out2 = tmp_path / "o2"
        out2.mkdir()
        shutil.copytree(pipeline.out / "predictions", out2 / "predictions")
        cfg = write_json(tmp_path / "c.json", run_payload(pipeline.data, out2))
        assert (
            main(
                [
                    "evaluate",
                    "--config",
                    str(cfg),
                    "--baseline",
                    str(pipeline.out / "metrics.json"),
                ]
            )
            == 0
        )
        report = json.loads((out2 / "report.json").read_text())
        assert report["baseline"] == str(pipeline.out / "metrics.json")
        with open(out2 / "uncertainty.csv", newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        # the baseline is this run's own metrics: zero change, real SDs
        assert all(float(r[2]) == 0.0 for r in rows)

    def test_missing_baseline_file(self, pipeline, tmp_path, capsys):
        out2 = tmp_path / "o3"
        out2.mkdir()
        shutil.copytree(pipeline.out / "predictions", out2 / "predictions")
        cfg = write_json(tmp_path / "c.json", run_payload(pipeline.data, out2))
        assert (
            main(
                [
                    "evaluate",
                    "--config",
                    str(cfg),
                    "--baseline",
                    str(tmp_path / "absent.json"),
                ]
            )
            == 3
        )
        assert "missing artifact" in read_stderr_json(capsys)["message"]


# ---------------------------------------------------------------------------
# portfolio
# ---------------------------------------------------------------------------


class TestPortfolio:
    def test_report_and_weights(self, pipeline):
        report = json.loads((pipeline.out / "portfolio.json").read_text())
        assert report["kind"] == "portfolio_report"
        assert report["gamma_tuned_on_validation"] is True
        assert report["gamma_risk"] in (0.5, 2.0)
        assert report["lambda"] == 0.05
        assert sorted(report["runs"]) == ["0", "1"]
        for run_key, entry in report["runs"].items():
            csv_path = pipeline.out / "weights" / f"weights_run{run_key}.csv"
            with open(csv_path, newline="") as fh:
                rows = list(csv.reader(fh))
            assert rows[0] == ["period_start", "ticker", "weight"]
            assert len(rows) == 1 + 2 * len(entry["periods"])
            weights = [float(r[2]) for r in rows[1:]]
            assert all(w >= 0 for w in weights)

    def test_fixed_gamma_skips_tuning(self, pipeline, tmp_path):
        out2 = tmp_path / "o"
        out2.mkdir()
        shutil.copytree(pipeline.out / "predictions", out2 / "predictions")
        cfg = write_json(
            tmp_path / "c.json",
            run_payload(
                pipeline.data,
                out2,
                portfolio={"lambda": 0.05, "gamma_risk": 1.0},
            ),
        )
        assert main(["portfolio", "--config", str(cfg)]) == 0
        report = json.loads((out2 / "portfolio.json").read_text())
        assert report["gamma_tuned_on_validation"] is False
        assert report["gamma_risk"] == 1.0

    def test_tuning_needs_validation_predictions(self, pipeline, tmp_path, capsys):
        out2 = tmp_path / "o"
        out2.mkdir()
        shutil.copytree(pipeline.out / "predictions", out2 / "predictions")
        cfg = write_json(tmp_path / "c.json", run_payload(pipeline.data, out2))
        assert main(["portfolio", "--config", str(cfg)]) == 2
        assert "gamma_risk" in read_stderr_json(capsys)["message"]

    def test_regularization_off_records_null_lambda(self, pipeline, tmp_path):
        out2 = tmp_path / "o"
        out2.mkdir()
        shutil.copytree(pipeline.out / "predictions", out2 / "predictions")
        cfg = write_json(
            tmp_path / "c.json",
            run_payload(
                pipeline.data,
                out2,
                portfolio={"regularize": False, "gamma_risk": 1.0},
            ),
        )
        assert main(["portfolio", "--config", str(cfg)]) == 0
        report = json.loads((out2 / "portfolio.json").read_text())
        assert report["lambda"] is None


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


class TestSweep:
    def test_single_cell_matches_train(self, pipeline):
        with open(pipeline.out / "sweep" / "summary.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["zeta", "eta", "mean_of_stock_means", "mean_of_stock_sds", "partial"]
        assert len(rows) == 2
        assert rows[1][0] == "0.5" and rows[1][1] == "1.0"
        cell = json.loads(
            (pipeline.out / "sweep" / "zeta0.5_eta1" / "metrics.json").read_text()
        )
        train = json.loads((pipeline.out / "metrics.json").read_text())
        assert cell["per_stock"] == train["per_stock"]
        assert cell["aggregate"] == train["aggregate"]
        assert float(rows[1][2]) == train["aggregate"]["mean_of_stock_means"]

    def test_grid_cells_and_inclusion(self, pipeline, tmp_path):
        cfg = write_json(
            tmp_path / "c.json",
            run_payload(pipeline.data, tmp_path / "o", runs=1),
        )
        assert (
            main(
                [
                    "sweep",
                    "--config",
                    str(cfg),
                    "--zeta-grid",
                    "0.5,0.6",
                    "--eta-grid",
                    "0.9,1.0",
                ]
            )
            == 0
        )
        with open(tmp_path / "o" / "sweep" / "summary.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 5
        cells = {(r[0], r[1]) for r in rows[1:]}
        assert ("0.5", "1.0") in cells

    def test_default_grid_covers_paper_cell(self):
        assert len(DEFAULT_WEIGHT_GRID) == 10
        assert 0.5 in DEFAULT_WEIGHT_GRID and 1.0 in DEFAULT_WEIGHT_GRID

    @pytest.mark.parametrize("grid", ["", "0.5,0.5", "-0.1", "abc"])
    def test_grid_parse_errors(self, pipeline, tmp_path, grid, capsys):
        cfg = write_json(tmp_path / "c.json", run_payload(pipeline.data, tmp_path / "o"))
        assert (
            main(["sweep", "--config", str(cfg), "--zeta-grid", grid]) == 2
        )
        assert read_stderr_json(capsys)["error"] == "ConfigError"


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------


class TestPlumbing:
    def test_no_out_dir_anywhere(self, pipeline, tmp_path, capsys, monkeypatch):
        monkeypatch.delenv("DVA_OUT", raising=False)
        payload = run_payload(pipeline.data, tmp_path)
        del payload["out_dir"]
        cfg = write_json(tmp_path / "c.json", payload)
        assert main(["evaluate", "--config", str(cfg)]) == 2
        assert "DVA_OUT" in read_stderr_json(capsys)["message"]

    def test_dva_out_fallback(self, pipeline, tmp_path, monkeypatch):
        out2 = tmp_path / "env_out"
        out2.mkdir()
        shutil.copytree(pipeline.out / "predictions", out2 / "predictions")
        monkeypatch.setenv("DVA_OUT", str(out2))
        payload = run_payload(pipeline.data, tmp_path)
        del payload["out_dir"]
        cfg = write_json(tmp_path / "c.json", payload)
        assert main(["evaluate", "--config", str(cfg)]) == 0
        assert (out2 / "report.json").exists()

    def test_success_stdout_is_json(self, pipeline, capsys):
        assert main(["ingest-check", "--config", str(pipeline.cfg)]) == 0
        out = json.loads(capsys.readouterr().out.strip())
        assert out["ok"] is True

    def test_requires_subcommand(self):
        with pytest.raises(SystemExit):
            main([])

    def test_unknown_flag(self):
        with pytest.raises(SystemExit):
            main(["train", "--nonsense"])
