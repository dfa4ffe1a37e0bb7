import numpy as np
import pytest
import yaml

from cbonn import config as cfgmod
from cbonn.experiments import (
    aggregate,
    emit_plot_data,
    run_and_write,
    run_experiment,
    run_one,
    write_run_csv,
)


def tiny_config(experiment="sine", method="cbo", **overrides):
    base = {
        "sine": {
            "epochs": 2,
            "data.size": 60,
            "data.batch_size": 30,
            "optimizer.particles": 6,
            "network.width": 8,
        },
        "mnist": {
            "epochs": 1,
            "data.size": 40,
            "data.subset": 40,
            "data.batch_size": 20,
            "optimizer.particles": 5,
            "network.width": 4,
        },
        "multitask": {
            "epochs": 2,
            "data.size": 50,
            "data.batch_size": 25,
            "data.tasks": 3,
            "optimizer.particles": 6,
            "network.width": 6,
        },
        "square_ot": {
            "epochs": 2,
            "data.size": 40,
            "data.batch_size": 20,
            "optimizer.particles": 4,
            "network.width": 5,
        },
    }[experiment]
    cfg = cfgmod.default_config(experiment, method)
    return cfgmod.validate(cfgmod.apply_overrides(cfg, {**base, "seeds": [0], **overrides}))


class TestRunRecords:
    def test_zero_epochs_keep_only_initial_row(self):
        record = run_one(tiny_config(epochs=0), seed=0)
        assert record.epochs.tolist() == [0]
        assert record.risks.shape == (1, 1)

    def test_rows_cover_every_epoch(self):
        record = run_one(tiny_config(epochs=3), seed=1)
        assert record.epochs.tolist() == [0, 1, 2, 3]
        assert record.completed

    def test_multitask_reports_median_and_min(self):
        record = run_one(tiny_config("multitask", "multitask_cbo"), seed=0)
        assert record.risk_columns == ["risk_median", "risk_min"]
        assert np.all(record.risks[:, 1] <= record.risks[:, 0] + 1e-15)

    def test_alpha_column_tracks_schedule(self):
        cfg = tiny_config(epochs=3)
        cfg = cfgmod.validate(
            cfgmod.apply_overrides(cfg, {"schedule.alpha_every": 2, "schedule.alpha_enabled": True})
        )
        record = run_one(cfg, seed=0)
        assert record.alphas[0] == cfg["optimizer"]["alpha"]
        assert record.alphas[-1] == cfg["optimizer"]["alpha"] * 10

    def test_divergent_adam_aborts_with_partial_record(self):
        cfg = tiny_config(method="adam", epochs=50)
        cfg = cfgmod.validate(cfgmod.apply_overrides(cfg, {"optimizer.dt": 1e150}))
        record = run_one(cfg, seed=0)
        assert not record.completed
        assert record.abort_reason
        assert 1 <= len(record.epochs) < 51

    def test_mnist_synthetic_note_recorded(self):
        record = run_one(tiny_config("mnist", "cbo"), seed=0)
        assert record.notes["data_source"] == "synthetic_stand_in"


class TestDeterminism:
    @pytest.mark.parametrize(
        "experiment,method",
        [("sine", "cbo"), ("sine", "hybrid"), ("multitask", "multitask_cbo"), ("square_ot", "ot_cbo")],
    )
    def test_same_seed_replays_bitwise(self, experiment, method):
        cfg = tiny_config(experiment, method)
        a = run_one(cfg, seed=3)
        b = run_one(cfg, seed=3)
        assert np.array_equal(a.risks, b.risks)

    def test_parallel_workers_do_not_change_results(self, tmp_path):
        serial = tiny_config(epochs=3)
        parallel = cfgmod.validate(cfgmod.apply_overrides(serial, {"workers": 4}))
        a = run_one(serial, seed=2)
        b = run_one(parallel, seed=2)
        assert np.array_equal(a.risks, b.risks)
        pa = tmp_path / "serial.csv"
        pb = tmp_path / "parallel.csv"
        write_run_csv(a, pa)
        write_run_csv(b, pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_csv_bytes_replay(self, tmp_path):
        cfg = tiny_config()
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        write_run_csv(run_one(cfg, seed=5), a)
        write_run_csv(run_one(cfg, seed=5), b)
        assert a.read_bytes() == b.read_bytes()

    def test_config_echo_reproduces_run(self, tmp_path):
        cfg = tiny_config(out_dir=str(tmp_path / "first"))
        manifest = run_and_write(cfg)
        meta = yaml.safe_load(open(manifest["runs"][0].replace(".csv", ".meta.yaml")))
        echoed = cfgmod.validate(meta["config"])
        echoed = cfgmod.apply_overrides(echoed, {"out_dir": str(tmp_path / "second")})
        manifest2 = run_and_write(cfgmod.validate(echoed))
        first = open(manifest["runs"][0], "rb").read()
        second = open(manifest2["runs"][0], "rb").read()
        assert first == second


class TestAggregate:
    def test_single_record_aggregates_to_itself(self):
        record = run_one(tiny_config(), seed=0)
        agg = aggregate([record])
        assert np.array_equal(agg.stats["risk_median"], record.risks[:, 0])
        assert np.array_equal(agg.stats["risk_mean"], record.risks[:, 0])
        assert agg.seed_count == 1

    def test_median_and_mean_values(self):
        records = [run_one(tiny_config(), seed=s) for s in range(3)]
        for i, value in enumerate([1.0, 2.0, 9.0]):
            records[i].risks = records[i].risks.copy()
            records[i].risks[-1, 0] = value
        agg = aggregate(records)
        assert agg.stats["risk_median"][-1] == 2.0
        assert agg.stats["risk_mean"][-1] == 4.0

    def test_aborted_runs_excluded(self):
        good = run_one(tiny_config(), seed=0)
        bad = run_one(tiny_config(), seed=1)
        bad.completed = False
        agg = aggregate([good, bad])
        assert agg.seed_count == 1
        with pytest.raises(ValueError, match="no completed"):
            aggregate([bad])

    def test_misaligned_epochs_rejected(self):
        a = run_one(tiny_config(epochs=2), seed=0)
        b = run_one(tiny_config(epochs=3), seed=0)
        with pytest.raises(ValueError, match="misaligned"):
            aggregate([a, b])


class TestPlotData:
    def test_header_and_round_trip(self, tmp_path):
        records = run_experiment(tiny_config())
        agg = aggregate(records)
        path = tmp_path / "agg.csv"
        emit_plot_data(agg, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "experiment,method,epoch,stat,value"
        _, _, _, stat, value = lines[1].split(",")
        col = {"risk_mean": "risk_mean", "risk_median": "risk_median"}[stat]
        assert float(value) == agg.stats[col][0]

    def test_multitask_stat_names(self, tmp_path):
        records = run_experiment(tiny_config("multitask", "multitask_cbo"))
        agg = aggregate(records)
        path = tmp_path / "agg.csv"
        emit_plot_data(agg, path)
        stats = {line.split(",")[3] for line in path.read_text().splitlines()[1:]}
        assert {"median_task_risk", "min_task_risk"} <= stats

    def test_write_failure_carries_path(self):
        records = run_experiment(tiny_config())
        agg = aggregate(records)
        with pytest.raises(OSError, match="/no/such/dir/agg.csv"):
            emit_plot_data(agg, "/no/such/dir/agg.csv")


class TestRunAndWrite:
    def test_manifest_files_exist(self, tmp_path):
        cfg = tiny_config(out_dir=str(tmp_path), seeds=[0, 1])
        manifest = run_and_write(cfg)
        assert len(manifest["runs"]) == 2
        for path in manifest["runs"]:
            assert open(path).readline().startswith("epoch,risk")
        assert manifest["aggregate"].endswith("sine_cbo_agg.csv")
