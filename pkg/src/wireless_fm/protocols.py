"""Experiment protocols: ablation, context-length sweep, layer sweep and zero-shot transfer.

Every protocol returns a list of :class:`MetricsReport`, one per (task, setting, seed)
cell. Reports serialize to JSON lines and to a long-format table with the columns
``protocol, task, setting, step, value`` (``step`` is ``all`` for the pooled NMSE).
"""

from __future__ import annotations

import csv
import enum
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .core_series import TimeSeriesWindow
from .evaluation import mean_nmse, persistence_baseline, predict_windows, truncate_history
from .model import ModelConfig, ModelParams, init_params
from .training import TrainConfig, train

log = logging.getLogger(__name__)


class Protocol(str, enum.Enum):
    ABLATION = "ablation"
    CONTEXT_SWEEP = "context-sweep"
    LAYER_SWEEP = "layer-sweep"
    ZERO_SHOT = "zero-shot"


# Reference figures from full-scale runs, kept for side-by-side reading only; never compared against.
REFERENCE_VALUES = {
    "ablation": {
        "base": {"channel_0.5ms": 0.00823, "channel_50ms": 2.20e-6, "angle": 8.15e-5, "traffic": 0.134},
        "no_positional_encoding": {"channel_0.5ms": 0.00873, "channel_50ms": 2.39e-6, "angle": 9.10e-5,
                                   "traffic": 0.138},
        "no_granularity_encoding": {"channel_0.5ms": 0.0236, "channel_50ms": 2.97e-6, "angle": 1.96e-4,
                                    "traffic": 0.211},
        "no_patch": {"channel_0.5ms": 0.00803, "channel_50ms": 2.28e-6, "angle": 8.50e-5, "traffic": 0.153},
    },
}

ABLATION_SETTINGS = ("base", "no_positional_encoding", "no_granularity_encoding", "no_patch")
LAYER_COUNTS = (1, 2, 4, 8)


@dataclass
class MetricsReport:
    protocol: str
    task: str
    setting: str
    nmse: float
    per_step: list[float]
    rates: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    reference: float | None = None

    def __post_init__(self) -> None:
        if self.nmse < 0 or any(v < 0 for v in self.per_step):
            raise ValueError("NMSE must be non-negative")
        if any(v < 0 for v in self.rates.values()):
            raise ValueError("rates must be non-negative")

    @property
    def key(self) -> tuple:
        return self.protocol, self.task, self.setting, self.meta.get("seed")

    def table_rows(self) -> list[tuple]:
        rows = [(self.protocol, self.task, self.setting, "all", self.nmse)]
        rows += [(self.protocol, self.task, self.setting, str(i + 1), v) for i, v in enumerate(self.per_step)]
        return rows

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)


@dataclass
class ProtocolData:
    """Named training corpora and held-out evaluation sets."""

    train: dict[str, list[TimeSeriesWindow]] = field(default_factory=dict)
    test: dict[str, list[TimeSeriesWindow]] = field(default_factory=dict)


def evaluate(params: ModelParams, cfg: ModelConfig, windows: list[TimeSeriesWindow],
             protocol: str, task: str, setting: str, meta: dict | None = None) -> MetricsReport:
    agg, steps = mean_nmse(predict_windows(params, cfg, windows), windows)
    return MetricsReport(protocol, task, setting, agg, [float(v) for v in steps], meta=dict(meta or {}))


def persistence_report(windows, protocol: str, task: str, meta: dict | None = None) -> MetricsReport:
    agg, steps = mean_nmse([persistence_baseline(w) for w in windows], windows)
    return MetricsReport(protocol, task, "persistence", agg, [float(v) for v in steps], meta=dict(meta or {}))


def ablation_config(cfg: ModelConfig, setting: str) -> ModelConfig:
    if setting == "base":
        return cfg
    if setting == "no_positional_encoding":
        return replace(cfg, use_positional_encoding=False)
    if setting == "no_granularity_encoding":
        return replace(cfg, use_granularity_encoding=False)
    if setting == "no_patch":
        # Same maximum history, one sample per token.
        return replace(cfg, patch_len=1, max_patches=cfg.max_history)
    raise ValueError(f"unknown ablation setting {setting!r}")


def fit(cfg: ModelConfig, tcfg: TrainConfig, train_sets: dict, seed: int) -> ModelParams:
    params = init_params(cfg, np.random.default_rng(seed))
    params, _, _ = train(params, cfg, replace(tcfg, seed=seed), train_sets)
    return params


def _require(data: ProtocolData, train_keys=(), test_keys=()) -> None:
    missing = [f"train:{k}" for k in train_keys if not data.train.get(k)]
    missing += [f"test:{k}" for k in test_keys if not data.test.get(k)]
    if missing:
        raise ValueError(f"protocol is missing datasets: {', '.join(missing)}")


def run_protocol(protocol: Protocol | str, data: ProtocolData, model_cfg: ModelConfig,
                 train_cfg: TrainConfig | None = None, params: ModelParams | None = None,
                 seeds=(0,), settings=ABLATION_SETTINGS, layer_counts=LAYER_COUNTS,
                 l_max: int | None = None, task_subsets=None, eval_task: str = "delay",
                 steps_per_task: bool = False, meta: dict | None = None) -> list[MetricsReport]:
    """Run one protocol and return its reports.

    ``ablation`` and ``layer-sweep`` retrain from scratch on ``data.train`` for every
    setting and seed, then evaluate each test set. ``context-sweep`` evaluates ``params``
    at every history length 1..``l_max``. ``zero-shot`` trains one model per task subset
    and evaluates all of them on ``data.test[eval_task]``; with ``steps_per_task`` the step
    budget is multiplied by the subset size so every task gets equal exposure.
    Missing inputs raise before any training or inference happens.
    """
    protocol = Protocol(protocol)
    meta = dict(meta or {})
    reports: list[MetricsReport] = []

    if protocol is Protocol.CONTEXT_SWEEP:
        if params is None:
            raise ValueError("context-sweep needs a trained checkpoint")
        _require(data, test_keys=list(data.test) or ["<any>"])
        l_max = l_max or model_cfg.max_history
        if l_max > model_cfg.max_history:
            raise ValueError(f"l_max {l_max} exceeds model maximum history {model_cfg.max_history}")
        for task, windows in data.test.items():
            if l_max > min(w.history_len for w in windows):
                raise ValueError(f"test set {task!r} has windows shorter than l_max={l_max}")
        for task, windows in data.test.items():
            for length in range(1, l_max + 1):
                reports.append(evaluate(params, model_cfg, truncate_history(windows, length),
                                        protocol.value, task, f"L={length}", {**meta, "history_len": length}))
        return reports

    if train_cfg is None:
        raise ValueError(f"{protocol.value} retrains and needs a TrainConfig")

    if protocol is Protocol.ZERO_SHOT:
        task_subsets = [list(s) for s in (task_subsets or [list(data.train)[:n] for n in range(1, len(data.train) + 1)])]
        _require(data, {k for s in task_subsets for k in s}, [eval_task])
        windows = data.test[eval_task]
        for seed in seeds:
            for subset in task_subsets:
                tcfg = replace(train_cfg, task_mix=[[k, 1.0] for k in subset])
                if steps_per_task:
                    tcfg = replace(tcfg, steps=train_cfg.steps * len(subset))
                p = fit(model_cfg, tcfg, {k: data.train[k] for k in subset}, seed)
                reports.append(evaluate(p, model_cfg, windows, protocol.value, eval_task,
                                        f"{len(subset)}-task", {**meta, "seed": seed, "tasks": subset}))
        reports.append(persistence_report(windows, protocol.value, eval_task, meta))
        return reports

    _require(data, list(data.train) or ["<any>"], list(data.test) or ["<any>"])
    if protocol is Protocol.ABLATION:
        cells = [(s, ablation_config(model_cfg, s)) for s in settings]
    else:
        cells = [(f"layers={n}", replace(model_cfg, num_layers=n)) for n in layer_counts]
    refs = REFERENCE_VALUES.get(protocol.value, {})
    for seed in seeds:
        for setting, cfg in cells:
            p = fit(cfg, train_cfg, data.train, seed)
            for task, windows in data.test.items():
                r = evaluate(p, cfg, windows, protocol.value, task, setting, {**meta, "seed": seed})
                r.reference = refs.get(setting, {}).get(task)
                reports.append(r)
    return reports


# ---------------------------------------------------------------- aggregation and IO

def seed_mean(reports: list[MetricsReport], task: str | None = None) -> dict[str, float]:
    """Mean NMSE per setting over seeds (optionally for one task)."""
    acc: dict[str, list[float]] = {}
    for r in reports:
        if task is None or r.task == task:
            acc.setdefault(r.setting, []).append(r.nmse)
    return {k: float(np.mean(v)) for k, v in acc.items()}


def write_reports_jsonl(reports: list[MetricsReport], path) -> None:
    with open(path, "w") as f:
        for r in reports:
            f.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def read_reports_jsonl(path) -> list[MetricsReport]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if line.strip():
            try:
                out.append(MetricsReport.from_dict(json.loads(line)))
            except (json.JSONDecodeError, TypeError) as e:
                raise ValueError(f"{path}:{n}: not a metrics record ({e})") from e
    return out


TABLE_COLUMNS = ("protocol", "task", "setting", "step", "value")


def write_table(reports: list[MetricsReport], path, delimiter: str = "\t") -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, delimiter=delimiter, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for r in reports:
            w.writerows(r.table_rows())
