import csv
import dataclasses
import json

import pytest

from pipetrain.cli import main
from pipetrain.experiment import CSV_HEADER, ConfigError, ExperimentConfig, compare, format_compare

SMALL = ["--num-samples", "512", "--epochs", "2", "--batch-size", "32"]


def test_smoke_run_writes_csv_and_sidecar(tmp_path, capsys):
    out = tmp_path / "m.csv"
    code = main(["--schedule", "xpipe", "--stages", "4", "--micro-batches", "2", "--batch-size", "128",
                 "--optimizer", "momentum", "--lr", "1e-2", "--seed", "1", "--out", str(out)])
    assert code == 0
    rows = list(csv.reader(out.open()))
    assert rows[0] == CSV_HEADER and len(rows) == 2
    side = json.loads(out.with_suffix(".json").read_text())
    assert side["config"]["micro_batches"] == 2 and len(side["stage_utilization"]) == 1
    assert capsys.readouterr().out.startswith(",".join(CSV_HEADER))


def test_analyze_mode_prints_gpipe_utilization(capsys):
    assert main(["--mode", "analyze", "--schedule", "gpipe", "-K", "4", "-T", "4"]) == 0
    assert "steady utilization 0.571" in capsys.readouterr().out


def test_preset_resolution():
    cfg = ExperimentConfig.from_preset("paper-cifar-momentum")
    assert (cfg.lr, cfg.momentum, cfg.weight_decay, cfg.batch_size) == (1e-2, 0.9, 5e-4, 128)
    assert [cfg.lr_at(e) for e in (0, 29, 30, 60)] == pytest.approx([1e-2, 1e-2, 1e-3, 1e-4])
    tiny = ExperimentConfig.from_preset("paper-tiny-momentum")
    assert tiny.batch_size == 100 and tiny.lr_at(45) == pytest.approx(1e-3)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_preset("nope")


@pytest.mark.parametrize("argv", [
    ["--stages", "0"],
    ["--batch-size", "30", "-T", "4"],
    ["--schedule", "spectrain", "--optimizer", "adam"],
    ["--lr", "0"],
    ["--dataset", "imagenet"],
    ["--mode", "lockstep", "--fwd-cost-us", "0"],
    ["--stages", "9"],
])
def test_invalid_configs_exit_nonzero(argv, capsys):
    assert main(SMALL + argv) != 0
    assert "error" in capsys.readouterr().err


def test_naive_is_coerced_to_single_microbatch(caplog):
    cfg = ExperimentConfig(schedule="naive", micro_batches=4).validate()
    assert cfg.micro_batches == 1 and "T=1" in caplog.text


def test_sidecar_round_trip(tmp_path):
    out = tmp_path / "a.csv"
    assert main(["--schedule", "pipedream", "-K", "2", "--out", str(out)] + SMALL) == 0
    first = ExperimentConfig.from_json(out.with_suffix(".json"))
    again = tmp_path / "b.csv"
    assert main(["--config", str(out.with_suffix(".json")), "--out", str(again)]) == 0
    second = ExperimentConfig.from_json(again.with_suffix(".json"))
    assert dataclasses.replace(first, out="") == dataclasses.replace(second, out="")
    assert out.read_bytes() == again.read_bytes()


def test_runtime_fault_flushes_partial_metrics(tmp_path, monkeypatch):
    from pipetrain.runtime import engine

    calls = {"n": 0}
    real = engine.PipelineEngine.run_epoch

    def flaky(self, *a, **kw):
        calls["n"] += 1
        if calls["n"] == 2:
            raise RuntimeError("stage crashed")
        return real(self, *a, **kw)

    monkeypatch.setattr(engine.PipelineEngine, "run_epoch", flaky)
    out = tmp_path / "m.csv"
    assert main(["-K", "2", "--out", str(out)] + SMALL) == 2
    assert len(list(csv.reader(out.open()))) == 2


def test_compare_uses_gpipe_reference(tmp_path, capsys):
    base = ExperimentConfig(stages=2, micro_batches=2, batch_size=32, num_samples=512, epochs=1,
                            out=str(tmp_path / "cmp.csv"))
    rows = compare(base, ["gpipe", "xpipe", "pipedream"])
    assert [r.schedule for r in rows] == ["gpipe", "xpipe", "pipedream"]
    assert rows[0].delta_top1 == 0 and rows[0].throughput_ratio == 1
    assert rows[1].throughput_ratio > 1
    table = format_compare(rows)
    assert "vs gpipe" in table and "%)" in table
    assert (tmp_path / "cmp.csv").exists()
    with pytest.raises(ConfigError):
        compare(base, ["xpipe"])


def test_compare_subcommand(capsys):
    assert main(["compare", "--schedules", "gpipe,xpipe", "-K", "2"] + SMALL) == 0
    assert "xpipe" in capsys.readouterr().out
    assert main(["compare", "--schedules", "gpipe,bogus", "-K", "2"] + SMALL) == 1


def test_idx_dataset_flag(tmp_path):
    import numpy as np

    from pipetrain.data import IDX_IMAGES, IDX_LABELS, write_idx

    rng = np.random.default_rng(0)
    ip, lp = tmp_path / "i.idx", tmp_path / "l.idx"
    write_idx(ip, rng.integers(0, 256, (80, 6, 6)), IDX_IMAGES)
    write_idx(lp, np.arange(80) % 3, IDX_LABELS)
    out = tmp_path / "m.csv"
    code = main(["--dataset", f"idx:{ip},{lp}", "--model", "cnn_small", "-K", "3", "-N", "16",
                 "--epochs", "1", "--out", str(out)])
    assert code == 0 and len(list(csv.reader(out.open()))) == 2
