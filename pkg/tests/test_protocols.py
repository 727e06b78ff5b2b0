import numpy as np
import pytest

from wireless_fm.core_series import TaskTag, TimeSeriesWindow
from wireless_fm.model import ModelConfig, init_params
from wireless_fm.protocols import (
    ABLATION_SETTINGS,
    MetricsReport,
    ProtocolData,
    ablation_config,
    read_reports_jsonl,
    run_protocol,
    seed_mean,
    write_reports_jsonl,
    write_table,
)
from wireless_fm.training import TrainConfig

CFG = ModelConfig(d_model=8, num_heads=2, num_layers=1, horizon=2, max_patches=4)
TC = TrainConfig(learning_rate=1e-3, batch_size=4, steps=2)


def windows(n, tag, dt, length=16, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        x = np.cumsum(rng.standard_normal(length + 2))
        out.append(TimeSeriesWindow(x[None, :length], x[None, length:], dt, tag))
    return out


@pytest.fixture
def data():
    train = {"channel": windows(4, TaskTag.CHANNEL, 5e-4), "angle": windows(4, TaskTag.ANGLE, 0.05, seed=1),
             "traffic": windows(4, TaskTag.TRAFFIC, 3600.0, seed=2)}
    test = {"delay": windows(3, TaskTag.DELAY, 0.05, seed=3), "angle": windows(3, TaskTag.ANGLE, 0.05, seed=4)}
    return ProtocolData(train, test)


def test_ablation_rows(data):
    reps = run_protocol("ablation", ProtocolData(data.train, {"angle": data.test["angle"]}), CFG, TC)
    assert [r.setting for r in reps] == list(ABLATION_SETTINGS)
    assert all(r.reference is not None for r in reps)
    assert all(len(r.per_step) == 2 for r in reps)


def test_ablation_configs():
    assert ablation_config(CFG, "no_patch").max_history == CFG.max_history
    assert ablation_config(CFG, "no_patch").patch_len == 1
    assert not ablation_config(CFG, "no_granularity_encoding").use_granularity_encoding
    with pytest.raises(ValueError):
        ablation_config(CFG, "bogus")


def test_context_sweep_rows(data):
    p = init_params(CFG, np.random.default_rng(0))
    reps = run_protocol("context-sweep", ProtocolData(test={"delay": data.test["delay"]}), CFG, params=p, l_max=16)
    assert [r.setting for r in reps] == [f"L={k}" for k in range(1, 17)]
    with pytest.raises(ValueError, match="l_max"):
        run_protocol("context-sweep", ProtocolData(test=data.test), CFG, params=p, l_max=17)
    with pytest.raises(ValueError, match="checkpoint"):
        run_protocol("context-sweep", data, CFG)


def test_zero_shot(data):
    reps = run_protocol("zero-shot", data, CFG, TC, steps_per_task=True)
    assert [r.setting for r in reps] == ["1-task", "2-task", "3-task", "persistence"]
    assert {r.task for r in reps} == {"delay"}
    assert reps[2].meta["tasks"] == ["channel", "angle", "traffic"]


def test_missing_data_fails_fast(data):
    with pytest.raises(ValueError, match="test:delay"):
        run_protocol("zero-shot", ProtocolData(data.train, {}), CFG, TC)
    with pytest.raises(ValueError, match="train:radar"):
        run_protocol("zero-shot", data, CFG, TC, task_subsets=[["radar"]])
    with pytest.raises(ValueError, match="TrainConfig"):
        run_protocol("ablation", data, CFG)


def test_report_validation():
    with pytest.raises(ValueError):
        MetricsReport("ablation", "x", "base", -1.0, [])
    with pytest.raises(ValueError):
        MetricsReport("ablation", "x", "base", 1.0, [0.1], rates={"se": -1})


def test_io_round_trip(tmp_path):
    reps = [MetricsReport("ablation", "angle", "base", 0.5, [0.25, 0.75], meta={"seed": s}) for s in (0, 1)]
    write_reports_jsonl(reps, tmp_path / "r.jsonl")
    assert read_reports_jsonl(tmp_path / "r.jsonl") == reps
    write_table(reps, tmp_path / "r.tsv")
    lines = (tmp_path / "r.tsv").read_text().splitlines()
    assert lines[0] == "protocol\ttask\tsetting\tstep\tvalue" and len(lines) == 1 + 2 * 3
    assert seed_mean(reps) == {"base": 0.5}
    (tmp_path / "bad.jsonl").write_text("{not json\n")
    with pytest.raises(ValueError, match="bad.jsonl:1"):
        read_reports_jsonl(tmp_path / "bad.jsonl")
