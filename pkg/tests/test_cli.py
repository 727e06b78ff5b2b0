import json
import subprocess
import sys

import numpy as np
import pytest

from wireless_fm.checkpoint import load_checkpoint
from wireless_fm.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, load_run_config, main
from wireless_fm.datagen import import_dataset
from wireless_fm.model import init_params

SMALL = ["--set", "model.d_model=8", "--set", "model.num_heads=2", "--set", "model.num_layers=1",
         "--set", "train.batch_size=4", "--set", "train.learning_rate=0.001"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def angle_file(tmp_path):
    path = tmp_path / "angle.wfm"
    assert run("generate", "--task", "angle", "--count", 6, "--seed", 1, "--out", path) == EXIT_OK
    return path


def last_json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


class TestGenerate:
    def test_round_trip_and_deterministic(self, tmp_path, capsys):
        a, b = tmp_path / "a.wfm", tmp_path / "b.wfm"
        for p in (a, b):
            assert run("generate", "--task", "traffic", "--count", 3, "--seed", 7, "--out", p) == EXIT_OK
        summary = last_json(capsys)
        assert a.read_bytes() == b.read_bytes()
        ws = import_dataset(a)
        assert len(ws) == 3 and summary["M"] == ws[0].num_vars and summary["seed"] == 7
        meta = json.loads((tmp_path / "a.wfm.meta.json").read_text())
        assert meta["config_hash"] == summary["config_hash"]

    def test_full_channel_geometry(self, tmp_path, capsys):
        assert run("generate", "--task", "channel", "--count", 1, "--out", tmp_path / "c.wfm") == EXIT_OK
        assert last_json(capsys)["M"] == 1536

    def test_bad_override(self, tmp_path):
        assert run("generate", "--task", "channel", "--set", "data.channel.bogus=1",
                   "--out", tmp_path / "x") == EXIT_CONFIG
        assert run("generate", "--set", "nope.x=1", "--out", tmp_path / "x") == EXIT_CONFIG
        assert run("generate", "--count", 0, "--out", tmp_path / "x") == EXIT_CONFIG


class TestTrain:
    def test_zero_steps_equals_init(self, tmp_path, angle_file):
        ck = tmp_path / "m.ckpt"
        assert run("train", "--data", angle_file, "--checkpoint-out", ck, *SMALL, "--set", "train.steps=0",
                   "--set", "train.seed=5") == EXIT_OK
        params, cfg, meta, _ = load_checkpoint(ck)
        ref = init_params(cfg, np.random.default_rng(5))
        assert all(params[k].tobytes() == ref[k].tobytes() for k in ref)
        assert meta["seed"] == 5 and len(meta["config_hash"]) == 16

    def test_resume_bitwise(self, tmp_path, angle_file):
        common = ["--data", angle_file, *SMALL, "--set", "train.checkpoint_every=3"]
        assert run("train", *common, "--set", "train.steps=6", "--checkpoint-out", tmp_path / "full") == EXIT_OK
        assert (tmp_path / "full.step3").exists()
        assert run("train", *common, "--set", "train.steps=6", "--resume", tmp_path / "full.step3",
                   "--checkpoint-out", tmp_path / "resumed") == EXIT_OK
        a = load_checkpoint(tmp_path / "full")[0]
        b = load_checkpoint(tmp_path / "resumed")[0]
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)
        lines = (tmp_path / "full.metrics.jsonl").read_text().splitlines()
        assert json.loads(lines[0])["header"] and len(lines) == 7

    def test_incompatible_data(self, tmp_path, angle_file):
        rc = run("train", "--data", angle_file, "--checkpoint-out", tmp_path / "m", *SMALL,
                 "--set", "model.horizon=3")
        assert rc == EXIT_CONFIG

    def test_missing_file(self, tmp_path):
        assert run("train", "--data", tmp_path / "nope", "--checkpoint-out", tmp_path / "m") == EXIT_IO

    def test_corrupt_checkpoint(self, tmp_path, angle_file):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"WFMC\x01")
        assert run("eval", "--checkpoint", bad, "--data", angle_file, "--metrics-out", tmp_path / "o") == EXIT_IO


class TestEval:
    @pytest.fixture
    def ckpt(self, tmp_path, angle_file):
        ck = tmp_path / "m.ckpt"
        assert run("train", "--data", angle_file, "--checkpoint-out", ck, *SMALL, "--set", "train.steps=2") == 0
        return ck

    def test_nmse_deterministic(self, tmp_path, ckpt, angle_file):
        outs = []
        for name in ("a", "b"):
            assert run("eval", "--checkpoint", ckpt, "--data", angle_file,
                       "--metrics-out", tmp_path / f"{name}.jsonl") == EXIT_OK
            outs.append((tmp_path / f"{name}.jsonl.tsv").read_text())
        assert outs[0] == outs[1]
        recs = [json.loads(l) for l in (tmp_path / "a.jsonl").read_text().splitlines()]
        assert [r["setting"] for r in recs] == ["checkpoint", "persistence"]

    def test_context_sweep_rows(self, tmp_path, ckpt, angle_file):
        tsv = tmp_path / "s.tsv"
        assert run("eval", "--checkpoint", ckpt, "--data", f"angle={angle_file}", "--protocol", "context-sweep",
                   "--set", "eval.l_max=16", "--metrics-out", tmp_path / "s.jsonl", "--table-out", tsv) == EXIT_OK
        rows = [l.split("\t") for l in tsv.read_text().splitlines()[1:]]
        assert sorted({r[2] for r in rows}, key=lambda s: int(s[2:])) == [f"L={k}" for k in range(1, 17)]

    def test_zero_shot_needs_delay(self, tmp_path, ckpt, angle_file):
        assert run("eval", "--checkpoint", ckpt, "--data", angle_file, "--protocol", "zero-shot",
                   "--metrics-out", tmp_path / "z") == EXIT_CONFIG

    def test_zero_shot(self, tmp_path, ckpt, angle_file):
        delay = tmp_path / "delay.wfm"
        assert run("generate", "--task", "delay", "--count", 3, "--out", delay) == EXIT_OK
        assert run("eval", "--checkpoint", ckpt, "--data", angle_file, "--data", f"delay={delay}",
                   "--protocol", "zero-shot", *SMALL, "--set", "train.steps=1",
                   "--metrics-out", tmp_path / "z.jsonl") == EXIT_OK
        recs = [json.loads(l) for l in (tmp_path / "z.jsonl").read_text().splitlines()]
        assert {r["task"] for r in recs} == {"delay"}
        assert [r["setting"] for r in recs] == ["1-task", "persistence"]

    def test_report(self, tmp_path, ckpt, angle_file, capsys):
        assert run("eval", "--checkpoint", ckpt, "--data", angle_file, "--metrics-out", tmp_path / "a.jsonl") == 0
        assert run("report", "--metrics", tmp_path / "a.jsonl", "--out", tmp_path / "rep") == EXIT_OK
        assert last_json(capsys)["records"] == 2
        summary = (tmp_path / "rep.summary.tsv").read_text().splitlines()
        assert len(summary) == 3
        pivot = (tmp_path / "rep.pivot.tsv").read_text().splitlines()
        assert pivot[0].split("\t") == ["protocol", "task", "checkpoint", "persistence"]
        assert run("report", "--out", tmp_path / "r2") == EXIT_CONFIG


def test_config_file_and_hash(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"model": {"d_model": 16}, "io": {"seed": 4}}))
    a = load_run_config(str(path))
    b = load_run_config(str(path), ["model.d_model=16"])
    c = load_run_config(str(path), ["model.d_model=32"])
    assert a.model.d_model == 16 and a.io.seed == 4
    assert a.hash == b.hash != c.hash
    path.write_text(json.dumps({"model": {"nope": 1}}))
    with pytest.raises(ValueError):
        load_run_config(str(path))


def test_console_entry(tmp_path):
    out = subprocess.run([sys.executable, "-m", "wireless_fm.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "generate" in out.stdout
    bad = subprocess.run([sys.executable, "-m", "wireless_fm.cli", "frobnicate"], capture_output=True)
    assert bad.returncode == EXIT_CONFIG
