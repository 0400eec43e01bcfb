import json
from pathlib import Path

import pytest

from hessquant import cli


def write_config(tmp_path: Path, **overrides) -> Path:
    doc = {
        "experiment": "t",
        "seed": 0,
        "out_dir": str(tmp_path / "run"),
        "model": {"hidden_dims": [8, 6], "activation": "tanh"},
        "dataset": {
            "kind": "gaussian-blobs",
            "n_samples": 96,
            "n_features": 4,
            "n_classes": 3,
            "separation": 2.0,
        },
        "train": {"learning_rate": 0.05, "epochs": 60, "batch_size": 24},
        "probes": {"max_probes": 24, "rel_stderr_tol": None, "batch_size": 96,
                   "activation_inputs": 4},
        "plan": {"bit_menu": [2, 4, 8], "target_bytes": 60},
        "finetune": {"enabled": True, "epochs": 4, "learning_rate": 0.01},
    }
    for key, value in overrides.items():
        node = doc
        *head, last = key.split(".")
        for part in head:
            node = node.setdefault(part, {})
        node[last] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


ARTIFACTS = [
    "checkpoint.json",
    "local_min.json",
    "traces.csv",
    "trace_convergence.csv",
    "frontier.csv",
    "assignment.json",
    "quantized_checkpoint.json",
    "finetuned_checkpoint.json",
    "summary.json",
]


class TestPipeline:
    def test_end_to_end_artifacts_and_summary(self, tmp_path, capsys):
        config = write_config(tmp_path)
        assert cli.main(["pipeline", "--config", str(config)]) == 0
        run = tmp_path / "run"
        for name in ARTIFACTS:
            assert (run / name).exists(), name
        summary = json.loads((run / "summary.json").read_text())
        for key in (
            "baseline",
            "quantized",
            "finetuned",
            "size_bytes",
            "compression_ratio",
            "omega",
            "chosen_bits",
        ):
            assert key in summary
        assert summary["size_bytes"] <= summary["target_size_bytes"]
        assert "loss" in summary["baseline"] and "accuracy" in summary["baseline"]
        assert not (run / "FAILED_STAGE").exists()

    def test_rerun_is_byte_identical(self, tmp_path):
        config = write_config(tmp_path)
        assert cli.main(["pipeline", "--config", str(config)]) == 0
        run = tmp_path / "run"
        before = {
            name: (run / name).read_bytes()
            for name in ("summary.json", "traces.csv", "frontier.csv", "assignment.json")
        }
        assert cli.main(["pipeline", "--config", str(config)]) == 0
        for name, blob in before.items():
            assert (run / name).read_bytes() == blob, name

    def test_infeasible_target_exit_code_and_message(self, tmp_path, capsys):
        config = write_config(tmp_path, **{"plan.target_bytes": 1})
        code = cli.main(["pipeline", "--config", str(config)])
        assert code == 3
        err = capsys.readouterr().err
        assert "infeasible" in err
        assert "bytes" in err
        assert (tmp_path / "run" / "FAILED_STAGE").read_text().strip() == "plan"

    def test_failed_marker_cleared_on_success(self, tmp_path):
        config = write_config(tmp_path, **{"plan.target_bytes": 1})
        cli.main(["pipeline", "--config", str(config)])
        good = write_config(tmp_path, **{"plan.target_bytes": 60})
        assert cli.main(["pipeline", "--config", str(good)]) == 0
        assert not (tmp_path / "run" / "FAILED_STAGE").exists()


class TestStandaloneStages:
    def test_trace_reproduces_pipeline_csv(self, tmp_path):
        config = write_config(tmp_path)
        cli.main(["pipeline", "--config", str(config)])
        run = tmp_path / "run"
        pipeline_traces = (run / "traces.csv").read_bytes()
        (run / "traces.csv").unlink()
        assert cli.main(["trace", "--config", str(config)]) == 0
        assert (run / "traces.csv").read_bytes() == pipeline_traces

    def test_plan_flags_match_pipeline_selection(self, tmp_path):
        config = write_config(tmp_path)
        cli.main(["pipeline", "--config", str(config)])
        run = tmp_path / "run"
        chosen = json.loads((run / "assignment.json").read_text())
        frontier = (run / "frontier.csv").read_bytes()
        (run / "assignment.json").unlink()
        (run / "frontier.csv").unlink()
        code = cli.main(
            ["plan", "--config", str(config), "--bits", "2,4,8", "--target-bytes", "60"]
        )
        assert code == 0
        assert json.loads((run / "assignment.json").read_text()) == chosen
        assert (run / "frontier.csv").read_bytes() == frontier

    def test_quantize_and_finetune_from_artifacts(self, tmp_path):
        config = write_config(tmp_path, **{"finetune.enabled": False})
        cli.main(["pipeline", "--config", str(config)])
        assert cli.main(["quantize", "--config", str(config)]) == 0
        assert cli.main(["finetune", "--config", str(config)]) == 0
        assert (tmp_path / "run" / "finetuned_checkpoint.json").exists()

    def test_full_stage_sequence_equals_pipeline(self, tmp_path):
        # the same seed through train -> trace -> plan -> quantize ->
        # finetune reproduces every pipeline artifact byte for byte
        config_a = write_config(tmp_path)
        cli.main(["pipeline", "--config", str(config_a)])
        run_a = tmp_path / "run"

        config_b = write_config(tmp_path, out_dir=str(tmp_path / "staged"))
        for stage in ("train", "trace", "plan", "quantize", "finetune"):
            assert cli.main([stage, "--config", str(config_b)]) == 0
        run_b = tmp_path / "staged"
        for name in ARTIFACTS:
            if name == "summary.json":
                continue  # only the pipeline aggregates the summary
            assert (run_b / name).read_bytes() == (run_a / name).read_bytes(), name

    def test_bundled_demo_config_runs_and_validates(self, tmp_path):
        demo = Path(__file__).parent.parent / "configs" / "demo.json"
        out = tmp_path / "demo-run"
        assert cli.main(["pipeline", "--config", str(demo), "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        schema = {
            "experiment": str,
            "seed": int,
            "bit_menu": list,
            "target_size_bytes": int,
            "chosen_bits": list,
            "size_bytes": int,
            "compression_ratio": float,
            "omega": float,
            "baseline": dict,
            "quantized": dict,
            "finetuned": dict,
        }
        for key, kind in schema.items():
            assert isinstance(summary.get(key), kind), key
        for section in ("baseline", "quantized", "finetuned"):
            assert isinstance(summary[section]["loss"], float)
            assert 0.0 <= summary[section]["accuracy"] <= 1.0

    def test_missing_artifact_dependency_error(self, tmp_path, capsys):
        config = write_config(tmp_path)
        code = cli.main(["trace", "--config", str(config)])
        assert code == 2
        err = capsys.readouterr().err
        assert "missing artifact" in err
        assert "train" in err

    def test_probe_flags_override_config(self, tmp_path):
        config = write_config(tmp_path)
        cli.main(["train", "--config", str(config)])
        assert cli.main(["trace", "--config", str(config), "--probes", "8"]) == 0
        rows = (tmp_path / "run" / "traces.csv").read_text().splitlines()[1:]
        assert all(row.split(",")[6] == "8" for row in rows)
        assert (
            cli.main(
                ["trace", "--config", str(config), "--probe-dist", "gaussian"]
            )
            == 0
        )
        gaussian = (tmp_path / "run" / "traces.csv").read_bytes()
        cli.main(["trace", "--config", str(config)])
        assert (tmp_path / "run" / "traces.csv").read_bytes() != gaussian

    def test_threads_do_not_change_trace_csv(self, tmp_path):
        config = write_config(tmp_path)
        cli.main(["train", "--config", str(config)])
        assert cli.main(["trace", "--config", str(config), "--threads", "1"]) == 0
        single = (tmp_path / "run" / "traces.csv").read_bytes()
        assert cli.main(["trace", "--config", str(config), "--threads", "4"]) == 0
        assert (tmp_path / "run" / "traces.csv").read_bytes() == single


class TestAnalyzeAndReport:
    def test_quadratic_demo_prints_table(self, tmp_path, capsys):
        config = write_config(tmp_path)
        assert cli.main(["analyze", "quadratic-demo", "--config", str(config)]) == 0
        out = capsys.readouterr().out
        assert "200.000000" in out
        assert "101.000" in out and "199.000" in out
        assert "sharper surface loses more: True" in out

    def test_landscape_then_report_renders_figures(self, tmp_path):
        config = write_config(tmp_path)
        cli.main(["pipeline", "--config", str(config)])
        assert (
            cli.main(
                ["analyze", "landscape", "--config", str(config), "--layer", "0",
                 "--radius", "0.3", "--points", "5"]
            )
            == 0
        )
        assert cli.main(["report", "--config", str(config)]) == 0
        run = tmp_path / "run"
        assert (run / "report.txt").exists()
        for figure in ("traces.png", "frontier.png", "trace_convergence.png",
                       "landscape_layer0.png"):
            assert (run / figure).exists(), figure
        text = (run / "report.txt").read_text()
        assert "run summary" in text
        assert "average Hessian traces" in text
        assert "frontier" in text

    def test_ordering_analysis(self, tmp_path, capsys):
        config = write_config(tmp_path)
        cli.main(["pipeline", "--config", str(config)])
        assert cli.main(["analyze", "ordering", "--config", str(config)]) == 0
        doc = json.loads((tmp_path / "run" / "ordering.json").read_text())
        assert "kendall_distance" in doc and "trace_order" in doc


class TestConfigHandling:
    def test_unparseable_config_exit_two(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text("{nope")
        assert cli.main(["pipeline", "--config", str(path)]) == 2
        assert "offset" in capsys.readouterr().err

    def test_missing_required_field_exit_two(self, tmp_path, capsys):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"seed": 0}))
        assert cli.main(["pipeline", "--config", str(path)]) == 2
        assert "out_dir" in capsys.readouterr().err

    def test_target_bytes_only_required_for_planning(self, tmp_path, capsys):
        config = write_config(tmp_path)
        doc = json.loads(config.read_text())
        del doc["plan"]["target_bytes"]
        config.write_text(json.dumps(doc))
        assert cli.main(["train", "--config", str(config)]) == 0
        assert cli.main(["trace", "--config", str(config)]) == 0
        assert cli.main(["plan", "--config", str(config)]) == 2
        assert "target" in capsys.readouterr().err
        assert (
            cli.main(["plan", "--config", str(config), "--target-bytes", "60"]) == 0
        )

    def test_flag_overrides_config_seed(self, tmp_path):
        config = write_config(tmp_path)
        cli.main(["train", "--config", str(config), "--seed", "1"])
        run_seed1 = (tmp_path / "run" / "checkpoint.json").read_bytes()
        cli.main(["train", "--config", str(config)])
        assert (tmp_path / "run" / "checkpoint.json").read_bytes() != run_seed1

    def test_env_var_overrides_out_flag(self, tmp_path, monkeypatch):
        config = write_config(tmp_path)
        env_dir = tmp_path / "from-env"
        monkeypatch.setenv(cli.OUT_ENV_VAR, str(env_dir))
        cli.main(["train", "--config", str(config), "--out", str(tmp_path / "ignored")])
        assert (env_dir / "checkpoint.json").exists()
        assert not (tmp_path / "ignored").exists()
