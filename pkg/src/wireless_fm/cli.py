"""Batch entry points: ``generate``, ``train``, ``eval`` and ``report``.

Each run reads one JSON config (sections ``model``, ``train``, ``data``, ``eval``,
``io``) plus ``--set section.key=value`` overrides. Unknown keys are rejected. The
resolved config's hash, the seed and the package version go into every output.

Exit codes: 0 success, 2 usage or config error, 3 I/O error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import re
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .datagen import DatasetFormatError, ScenarioConfig, config_from_dict, export_dataset, generate, import_dataset
from .model import ModelConfig, init_params
from .protocols import (
    Protocol,
    ProtocolData,
    evaluate,
    persistence_report,
    read_reports_jsonl,
    run_protocol,
    write_reports_jsonl,
    write_table,
)
from .training import NumericalError, OptimizerState, TrainConfig, train

log = logging.getLogger("wireless_fm")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    protocol: str = "nmse"  # "nmse" or any Protocol value
    seeds: list = field(default_factory=lambda: [0])
    settings: list = field(default_factory=lambda: ["base", "no_positional_encoding",
                                                    "no_granularity_encoding", "no_patch"])
    layer_counts: list = field(default_factory=lambda: [1, 2, 4, 8])
    l_max: int = 0  # 0 -> the checkpoint's maximum history
    task_subsets: list = field(default_factory=list)
    eval_task: str = "delay"
    steps_per_task: bool = False

    def __post_init__(self) -> None:
        if self.protocol != "nmse":
            Protocol(self.protocol)


@dataclass
class IoConfig:
    seed: int = 0


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": ScenarioConfig,
            "eval": EvalConfig, "io": IoConfig}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: ScenarioConfig = field(default_factory=ScenarioConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    io: IoConfig = field(default_factory=IoConfig)

    def to_dict(self) -> dict:
        d = {k: asdict(getattr(self, k)) for k in SECTIONS}
        d["data"] = self.data.to_dict()
        return d

    @property
    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_override(tree: dict, assignment: str) -> None:
    """Set ``a.b.c=value`` in a nested dict; values parse as JSON, else as strings."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, raw = assignment.split("=", 1)
    parts = key.split(".")
    if parts[0] not in SECTIONS or len(parts) < 2:
        raise ConfigError(f"override key {key!r} must start with one of {sorted(SECTIONS)}")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-mapping")
    node[parts[-1]] = _parse_value(raw)


def load_run_config(path: str | None, overrides=()) -> RunConfig:
    tree: dict = {}
    if path:
        try:
            tree = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(tree, dict):
            raise ConfigError(f"{path}: top level must be an object")
    unknown = set(tree) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for o in overrides:
        apply_override(tree, o)
    try:
        built = {}
        for name, cls in SECTIONS.items():
            section = tree.get(name, {})
            built[name] = cls.from_dict(section) if hasattr(cls, "from_dict") else config_from_dict(cls, section)
        return RunConfig(**built)
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e


def _stamp(cfg: RunConfig, seed: int) -> dict:
    return {"config_hash": cfg.hash, "seed": seed, "code_version": __version__}


def _parse_data_args(items) -> dict[str, list]:
    """``name=path`` or bare ``path`` (named after the file's task tag)."""
    out = {}
    for item in items or []:
        name, _, path = item.rpartition("=")
        windows = import_dataset(path)
        name = name or (windows[0].task_tag.value if windows else Path(path).stem)
        if name in out:
            raise ConfigError(f"dataset name {name!r} given twice")
        out[name] = windows
    return out


def _check_compatible(datasets: dict, mcfg: ModelConfig) -> None:
    for name, windows in datasets.items():
        if not windows:
            raise ConfigError(f"dataset {name!r} is empty")
        w = windows[0]
        if w.horizon != mcfg.horizon:
            raise ConfigError(f"dataset {name!r}: horizon H={w.horizon} but model.horizon={mcfg.horizon}")
        if w.history_len > mcfg.max_history:
            raise ConfigError(f"dataset {name!r}: history L={w.history_len} exceeds model max_patches*patch_len"
                              f"={mcfg.max_history}")


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True))


# ---------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    cfg = load_run_config(args.config, args.set)
    scen = cfg.data if args.task is None else replace(cfg.data, task=args.task)
    seed = cfg.io.seed if args.seed is None else args.seed
    try:
        windows = generate(scen.task, scen.generator_config(), args.count, seed)
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e
    if not windows:
        raise ConfigError("--count must be positive")
    export_dataset(windows, args.out)
    w = windows[0]
    summary = {"path": str(args.out), "task": scen.task.value, "count": len(windows), "M": w.num_vars,
               "L": w.history_len, "H": w.horizon, "delta_t": w.delta_t_seconds, **_stamp(cfg, seed)}
    Path(str(args.out) + ".meta.json").write_text(json.dumps({**summary, "config": cfg.to_dict()},
                                                             sort_keys=True, indent=1))
    _emit(summary)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.set)
    datasets = _parse_data_args(args.data)
    if not datasets:
        raise ConfigError("train needs at least one --data")
    tcfg = cfg.train
    for name, _ in tcfg.task_mix:
        if name not in datasets:
            raise ConfigError(f"task_mix names {name!r} but no such --data was given")
    out = Path(args.checkpoint_out)
    stamp = _stamp(cfg, tcfg.seed)

    if args.resume:
        params, mcfg, meta, opt = load_checkpoint(args.resume)
        if mcfg != cfg.model:
            raise ConfigError("resume checkpoint model config differs from the run config")
        if opt is None:
            raise ConfigError(f"{args.resume} holds no optimizer state to resume from")
    else:
        mcfg = cfg.model
        params = init_params(mcfg, np.random.default_rng(tcfg.seed))
        opt = OptimizerState.zeros_like(params)
    _check_compatible(datasets, mcfg)

    def checkpoint(p, state):
        save_checkpoint(out.with_name(f"{out.name}.step{state.step}"), p, mcfg, stamp, state)

    metrics = args.metrics_out or str(out) + ".metrics.jsonl"
    if not args.resume:
        Path(metrics).write_text(json.dumps({"header": True, **stamp}) + "\n")
    params, opt, losses = train(params, mcfg, tcfg, datasets, opt, metrics_path=metrics,
                                on_checkpoint=checkpoint)
    save_checkpoint(out, params, mcfg, stamp, opt)
    _emit({"checkpoint": str(out), "steps": opt.step, "final_loss": losses[-1] if losses else None, **stamp})
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config, args.set)
    params, ck_cfg, ck_meta, _ = load_checkpoint(args.checkpoint)
    # Model overrides on the command line (e.g. ablation toggles) apply to retraining protocols.
    mcfg = ck_cfg
    model_over = [o for o in args.set or [] if o.startswith("model.")]
    if model_over:
        tree = {"model": ck_cfg.to_dict()}
        for o in model_over:
            apply_override(tree, o)
        mcfg = ModelConfig.from_dict(tree["model"])
    datasets = _parse_data_args(args.data)
    if not datasets:
        raise ConfigError("eval needs at least one --data")
    _check_compatible(datasets, mcfg)
    ecfg = cfg.eval
    meta = {**_stamp(cfg, cfg.io.seed), "checkpoint": str(args.checkpoint),
            "checkpoint_config_hash": ck_meta.get("config_hash")}

    if ecfg.protocol == "nmse":
        reports = []
        for name, windows in datasets.items():
            reports.append(evaluate(params, ck_cfg, windows, "nmse", name, "checkpoint", meta))
            reports.append(persistence_report(windows, "nmse", name, meta))
    else:
        proto = Protocol(ecfg.protocol)
        if proto is Protocol.ZERO_SHOT:
            if ecfg.eval_task not in datasets:
                raise ConfigError(f"zero-shot needs a --data {ecfg.eval_task}=PATH evaluation set")
            data = ProtocolData({k: v for k, v in datasets.items() if k != ecfg.eval_task},
                                {ecfg.eval_task: datasets[ecfg.eval_task]})
        elif proto is Protocol.CONTEXT_SWEEP:
            data = ProtocolData({}, datasets)
        else:
            data = ProtocolData(datasets, datasets if not args.test_data else _parse_data_args(args.test_data))
        try:
            reports = run_protocol(proto, data, mcfg, cfg.train, params=params, seeds=ecfg.seeds,
                                   settings=ecfg.settings, layer_counts=ecfg.layer_counts,
                                   l_max=ecfg.l_max or None, task_subsets=ecfg.task_subsets or None,
                                   eval_task=ecfg.eval_task, steps_per_task=ecfg.steps_per_task, meta=meta)
        except (ValueError, KeyError) as e:
            raise ConfigError(str(e)) from e
    write_reports_jsonl(reports, args.metrics_out)
    table = args.table_out or str(args.metrics_out) + ".tsv"
    write_table(reports, table)
    _emit({"metrics": str(args.metrics_out), "table": table, "reports": len(reports), **meta})
    return EXIT_OK


def _natural(text: str) -> list:
    """Sort key that orders "L=2" before "L=10"."""
    return [(0, int(t), "") if t.isdigit() else (1, 0, t) for t in re.split(r"(\d+)", text)]


def cmd_report(args) -> int:
    if not args.metrics:
        raise ConfigError("report needs at least one --metrics file")
    sources = []
    for path in args.metrics:
        sources.append((Path(path).stem, read_reports_jsonl(path)))
    # Provenance is the checkpoint's config; differing eval settings alone are not a conflict.
    hashes = {r.meta.get("checkpoint_config_hash") or r.meta.get("config_hash") for _, reps in sources for r in reps}
    conflict = len(hashes) > 1
    if conflict:
        log.warning("metrics files come from %d different configs; columns are split per source", len(hashes))

    records = sorted(((src, r) for src, reps in sources for r in reps),
                     key=lambda x: (x[1].protocol, x[1].task, _natural(x[1].setting), str(x[1].meta.get("seed")), x[0]))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out.with_suffix(".summary.tsv"), "w") as f:
        f.write("protocol\ttask\tsetting\tseed\tnmse\treference\tsource\tconfig_hash\n")
        for src, r in records:
            f.write(f"{r.protocol}\t{r.task}\t{r.setting}\t{r.meta.get('seed', '')}\t{r.nmse:.6g}\t"
                    f"{'' if r.reference is None else r.reference}\t{src}\t{r.meta.get('config_hash', '')}\n")

    # Side-by-side view: one row per (protocol, task), one column per setting.
    cols, cells = [], {}
    for src, r in records:
        col = f"{r.setting}@{src}" if conflict else r.setting
        if col not in cols:
            cols.append(col)
        cells.setdefault((r.protocol, r.task), {}).setdefault(col, []).append(r.nmse)
    with open(out.with_suffix(".pivot.tsv"), "w") as f:
        f.write("\t".join(["protocol", "task", *cols]) + "\n")
        for key in sorted(cells):
            vals = [f"{np.mean(cells[key][c]):.6g}" if c in cells[key] else "" for c in cols]
            f.write("\t".join([*key, *vals]) + "\n")
    write_table([r for _, r in records], out.with_suffix(".table.tsv"))
    _emit({"records": len(records), "sources": len(sources), "config_conflict": conflict,
           "summary": str(out.with_suffix(".summary.tsv"))})
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wireless-fm", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted override, e.g. model.d_model=32 (repeatable)")

    g = sub.add_parser("generate", help="write a synthetic dataset file")
    common(g)
    g.add_argument("--task", choices=["channel", "angle", "delay", "traffic"])
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--count", type=int, default=100)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model on one or more datasets")
    common(t)
    t.add_argument("--data", action="append", metavar="[NAME=]PATH")
    t.add_argument("--checkpoint-out", required=True)
    t.add_argument("--metrics-out")
    t.add_argument("--resume", metavar="CHECKPOINT")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or run a protocol")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", action="append", metavar="[NAME=]PATH")
    e.add_argument("--test-data", action="append", metavar="[NAME=]PATH",
                   help="held-out sets for retraining protocols (default: the --data sets)")
    e.add_argument("--protocol", help="overrides eval.protocol")
    e.add_argument("--metrics-out", required=True)
    e.add_argument("--table-out")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="merge metrics files into summary tables")
    r.add_argument("--metrics", action="append", default=[])
    r.add_argument("--out", required=True, help="output prefix")
    r.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "protocol", None):
        args.set = [*args.set, f"eval.protocol={args.protocol}"]
    try:
        return args.func(args)
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DatasetFormatError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
