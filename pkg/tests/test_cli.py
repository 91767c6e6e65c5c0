import csv
import json

import numpy as np
import pytest

from evocast.cli import main
from evocast.data import load_csv
from evocast.genotype import deserialize_genotype


def base_config(tmp_path, **overrides):
    cfg = {
        "dataset": {"synth": {"days": 60, "instants": 4, "seed": 2}},
        "output_dir": str(tmp_path / "run"),
        "algorithm": "ssea",
        "search": {"population": 3, "budget": 2, "seed": 0, "m_init_max": 3},
        "train": {"epochs_joint": 1, "epochs_weights": 2, "cycles": 2,
                  "batch_size": 16, "seed": 0},
    }
    cfg.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path, cfg


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    config_path, cfg = base_config(tmp)
    assert main(["search", str(config_path)]) == 0
    return tmp, cfg


class TestSearchCommand:
    def test_writes_all_artifacts(self, finished_run):
        run_dir, cfg = finished_run
        out = run_dir / "run"
        for name in ("best_genotype.json", "convergence.csv", "selected_features.csv",
                     "test_forecast.csv", "metrics.json"):
            assert (out / name).is_file(), name

    def test_metrics_summary_contents(self, finished_run):
        run_dir, _ = finished_run
        metrics = json.loads((run_dir / "run" / "metrics.json").read_text())
        assert metrics["algorithm"] == "ssea"
        assert metrics["evaluations"] == 5
        assert metrics["valid_mape_percent"] > 0
        assert 1 <= metrics["n_selected_features"] <= 20

    def test_best_genotype_file_parses(self, finished_run):
        run_dir, _ = finished_run
        deserialize_genotype((run_dir / "run" / "best_genotype.json").read_text())

    def test_prints_percent_with_three_decimals(self, tmp_path, capsys):
        config_path, _ = base_config(tmp_path)
        assert main(["search", str(config_path)]) == 0
        out = capsys.readouterr().out
        assert "valid MAPE" in out
        import re

        assert re.search(r"valid MAPE \d+\.\d{3}%", out)

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg_a, _ = base_config(tmp_path, output_dir=str(tmp_path / "a"))
        assert main(["search", str(cfg_a)]) == 0
        cfg_b, _ = base_config(tmp_path, output_dir=str(tmp_path / "b"))
        assert main(["search", str(cfg_b)]) == 0
        best_a = (tmp_path / "a" / "best_genotype.json").read_bytes()
        best_b = (tmp_path / "b" / "best_genotype.json").read_bytes()
        assert best_a == best_b

    def test_random_algorithm(self, tmp_path):
        config_path, _ = base_config(tmp_path, algorithm="rs")
        assert main(["search", str(config_path)]) == 0
        metrics = json.loads((tmp_path / "run" / "metrics.json").read_text())
        assert metrics["algorithm"] == "rs"

    def test_missing_population_is_config_error(self, tmp_path, capsys):
        config_path, _ = base_config(
            tmp_path, search={"budget": 2, "seed": 0}
        )
        assert main(["search", str(config_path)]) == 2
        assert "search.population" in capsys.readouterr().err

    def test_unknown_train_key_is_config_error(self, tmp_path, capsys):
        config_path, _ = base_config(
            tmp_path,
            train={"epochs_joint": 1, "epochs_weights": 1, "momentum": 0.9},
        )
        assert main(["search", str(config_path)]) == 2
        assert "momentum" in capsys.readouterr().err

    def test_two_dataset_sources_rejected(self, tmp_path, capsys):
        config_path, _ = base_config(
            tmp_path,
            dataset={"synth": {"days": 30}, "csv": "x.csv"},
        )
        assert main(["search", str(config_path)]) == 2

    def test_unknown_algorithm_rejected(self, tmp_path):
        config_path, _ = base_config(tmp_path, algorithm="hillclimb")
        assert main(["search", str(config_path)]) == 2

    def test_missing_config_file(self, tmp_path):
        assert main(["search", str(tmp_path / "nope.json")]) == 2

    def test_worker_env_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("EVOCAST_WORKERS", "2")
        config_path, _ = base_config(tmp_path)
        assert main(["search", str(config_path)]) == 0
        monkeypatch.setenv("EVOCAST_WORKERS", "banana")
        assert main(["search", str(config_path)]) == 2

    def test_seed_architecture_flag(self, tmp_path):
        config_path, _ = base_config(tmp_path, seed_architecture=True)
        assert main(["search", str(config_path)]) == 0


class TestSynthCommand:
    def test_writes_loadable_csv(self, tmp_path):
        cfg = tmp_path / "synth.json"
        cfg.write_text(json.dumps({"days": 12, "instants": 5, "seed": 1}))
        out = tmp_path / "data.csv"
        assert main(["synth", str(cfg), str(out)]) == 0
        ds = load_csv(out)
        assert ds.days == 12 and ds.instants == 5

    def test_unknown_key_rejected(self, tmp_path):
        cfg = tmp_path / "synth.json"
        cfg.write_text(json.dumps({"days": 12, "volume": 3}))
        assert main(["synth", str(cfg), str(tmp_path / "d.csv")]) == 2


class TestEvaluateCommand:
    def test_scores_stored_genotype(self, finished_run, tmp_path, capsys):
        run_dir, cfg = finished_run
        data_csv = tmp_path / "data.csv"
        synth_cfg = tmp_path / "synth.json"
        synth_cfg.write_text(json.dumps(cfg["dataset"]["synth"]))
        assert main(["synth", str(synth_cfg), str(data_csv)]) == 0
        train_cfg = tmp_path / "train.json"
        train_cfg.write_text(json.dumps({"train": cfg["train"]}))
        capsys.readouterr()
        code = main([
            "evaluate",
            str(run_dir / "run" / "best_genotype.json"),
            str(data_csv),
            str(train_cfg),
        ])
        out = capsys.readouterr().out
        assert code == 0
        assert "test MAPE" in out and "RMSE" in out

    def test_missing_genotype_file(self, finished_run, tmp_path):
        run_dir, _ = finished_run
        code = main([
            "evaluate", str(tmp_path / "nope.json"), str(tmp_path / "d.csv"),
            str(tmp_path / "c.json"),
        ])
        assert code == 2

    def test_corrupt_genotype_file(self, finished_run, tmp_path):
        run_dir, cfg = finished_run
        bad = tmp_path / "bad.json"
        bad.write_text("{\"h\": 4}")
        data_csv = tmp_path / "data.csv"
        synth_cfg = tmp_path / "synth.json"
        synth_cfg.write_text(json.dumps(cfg["dataset"]["synth"]))
        main(["synth", str(synth_cfg), str(data_csv)])
        train_cfg = tmp_path / "train.json"
        train_cfg.write_text(json.dumps({"train": cfg["train"]}))
        assert main(["evaluate", str(bad), str(data_csv), str(train_cfg)]) == 2


class TestExportCommand:
    def test_exports_three_files(self, finished_run):
        run_dir, _ = finished_run
        out = run_dir / "run"
        assert main(["export", str(out)]) == 0
        for name in ("export_convergence.csv", "export_last_week.csv",
                     "export_features.csv"):
            assert (out / name).is_file(), name

    def test_convergence_export_is_monotone(self, finished_run):
        run_dir, _ = finished_run
        out = run_dir / "run"
        main(["export", str(out)])
        with open(out / "export_convergence.csv") as fh:
            vals = [float(r["best_fitness"]) for r in csv.DictReader(fh)]
        assert vals
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_last_week_row_count(self, finished_run):
        run_dir, cfg = finished_run
        out = run_dir / "run"
        main(["export", str(out)])
        with open(out / "export_last_week.csv") as fh:
            rows = list(csv.DictReader(fh))
        instants = cfg["dataset"]["synth"]["instants"]
        assert len(rows) == 7 * instants

    def test_missing_artifacts_listed(self, tmp_path, capsys):
        assert main(["export", str(tmp_path)]) == 2
        err = capsys.readouterr().err
        assert "convergence.csv" in err and "test_forecast.csv" in err
