"""Multi-task training with first-patch masking, Adam, and gradient checking."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .core_series import (
    TimeSeriesWindow,
    classify_granularity,
    sample_training_mask,
    series_to_grid,
    to_model_domain,
)
from .model import ModelConfig, ModelParams, backward_batch, forward_batch

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    steps: int = 1000
    seed: int = 0
    task_mix: list = field(default_factory=list)  # [[dataset id, weight], ...]; empty -> uniform
    optimizer: str = "adam"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip_norm: float | None = 1.0
    log_every: int = 50
    checkpoint_every: int = 0

    def __post_init__(self) -> None:
        self.adam_betas = tuple(self.adam_betas)
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if any(w < 0 for _, w in self.task_mix):
            raise ValueError("task_mix weights must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def mse_loss(pred, target) -> float:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


# ---------------------------------------------------------------- samples -> grids

@dataclass
class _Sample:
    patches: np.ndarray  # (N_p, L_p), masked
    gran: int
    target: np.ndarray  # (H,), normalized with the history statistics


def prepare_samples(windows: list[TimeSeriesWindow], cfg: ModelConfig,
                    rng: np.random.Generator | None) -> list[_Sample]:
    """Normalize, pad and patch every row; with ``rng`` also draw a first-patch training mask.

    Applying a mask that zeroes the first r samples of an N_p * L_p history yields the
    same grid as the inference path on the last N_p * L_p - r samples.

    Rows whose history is constant carry no shape information and would blow the
    normalized target up by 1/eps, so they are left out.
    """
    out = []
    for w in windows:
        if w.future is None:
            raise ValueError("training windows need future targets")
        if w.future.shape[1] != cfg.horizon:
            raise ValueError(f"window horizon {w.future.shape[1]} != model horizon {cfg.horizon}")
        if w.history_len > cfg.max_history:
            raise ValueError(f"history length {w.history_len} exceeds model maximum {cfg.max_history}")
        w = to_model_domain(w)
        g = classify_granularity(w.delta_t_seconds)
        for row, fut in zip(w.values, w.future):
            if rng is not None:
                n_p = -(-row.size // cfg.patch_len)
                mask = sample_training_mask(n_p, cfg.patch_len, rng)
                # Statistics come from the unmasked samples only, exactly as inference
                # normalizes a history of that length before zero-padding it.
                row = row[n_p * cfg.patch_len - int(mask.sum()):]
            grid = series_to_grid(row, cfg.patch_len, g)
            if grid.stats.degenerate:
                continue
            target = (np.asarray(fut, dtype=np.float64) - grid.stats.mean) / grid.stats.std
            out.append(_Sample(grid.patches * grid.mask, int(g), target))
    return out


def _groups(samples: list[_Sample]):
    """Samples bucketed by patch count, in ascending order (fixed reduction order)."""
    by_n: dict[int, list[_Sample]] = {}
    for s in samples:
        by_n.setdefault(s.patches.shape[0], []).append(s)
    for n in sorted(by_n):
        group = by_n[n]
        yield (np.stack([s.patches for s in group]), np.array([s.gran for s in group]),
               np.stack([s.target for s in group]))


def loss_and_grads(samples: list[_Sample], params: ModelParams, cfg: ModelConfig,
                   loss_scale: float = 1.0) -> tuple[float, ModelParams]:
    """Mean squared error over every (row, step) in the batch and its exact gradient."""
    if not samples:
        raise ValueError("empty batch")
    total = len(samples) * cfg.horizon
    grads = {k: np.zeros_like(p) for k, p in params.items()}
    loss = 0.0
    for patches, gran, target in _groups(samples):
        pred, cache = forward_batch(params, cfg, patches, gran, keep_cache=True)
        err = pred.astype(np.float64) - target
        loss += float(np.sum(err * err))
        g = backward_batch(params, cfg, cache, loss_scale * 2.0 * err / total)
        for k in grads:
            grads[k] += g[k]
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter {k!r}")
    return loss_scale * loss / total, grads


def backward(window: TimeSeriesWindow, params: ModelParams, cfg: ModelConfig) -> ModelParams:
    """Gradient of the normalized-space MSE of one window w.r.t. every parameter."""
    return loss_and_grads(prepare_samples([window], cfg, None), params, cfg)[1]


def global_norm(grads: ModelParams) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_by_global_norm(grads: ModelParams, max_norm: float | None) -> tuple[ModelParams, float]:
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm:
        return grads, norm
    scale = max_norm / (norm + 1e-12)
    return {k: g * g.dtype.type(scale) for k, g in grads.items()}, norm


def adam_update(params: ModelParams, grads: ModelParams, state: OptimizerState,
                tcfg: TrainConfig) -> tuple[ModelParams, OptimizerState]:
    b1, b2 = tcfg.adam_betas
    t = state.step + 1
    step_size = tcfg.learning_rate / (1.0 - b1 ** t)
    bc2 = 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k].astype(p.dtype, copy=False)
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        upd = (step_size * m / (np.sqrt(v / bc2) + tcfg.adam_eps)).astype(p.dtype)
        new_p[k] = p - upd
        new_m[k], new_v[k] = m.astype(p.dtype), v.astype(p.dtype)
    return new_p, OptimizerState(new_m, new_v, t)


def train_step(batch: list[TimeSeriesWindow], params: ModelParams, opt_state: OptimizerState,
               cfg: ModelConfig, tcfg: TrainConfig, rng: np.random.Generator):
    """One Adam step; returns (params', opt_state', loss at the pre-step params)."""
    samples = prepare_samples(batch, cfg, rng)
    loss, grads = loss_and_grads(samples, params, cfg)
    grads, _ = clip_by_global_norm(grads, tcfg.grad_clip_norm)
    new_params, new_state = adam_update(params, grads, opt_state, tcfg)
    return new_params, new_state, loss


# ---------------------------------------------------------------- batching

def normalized_mix(datasets: dict, task_mix) -> tuple[list[str], np.ndarray]:
    if not task_mix:
        task_mix = [(k, 1.0) for k in datasets]
    ids = [str(k) for k, _ in task_mix]
    w = np.array([float(v) for _, v in task_mix])
    for k in ids:
        if k not in datasets:
            raise KeyError(f"task_mix names unknown dataset {k!r}")
        if not datasets[k]:
            raise ValueError(f"dataset {k!r} is empty")
    if w.sum() <= 0:
        raise ValueError("task_mix weights sum to zero")
    return ids, w / w.sum()


def build_batch(datasets: dict[str, list[TimeSeriesWindow]], task_mix, patch_len: int,
                batch_size: int, rng: np.random.Generator, history_range=None) -> list[TimeSeriesWindow]:
    """Draw single-variable windows: task by mix weight, then window, row and patch count.

    The patch count is uniform over ``history_range`` (inclusive (lo, hi)), defaulting to
    every count the source window supports; the history keeps its last N_p * L_p steps.
    """
    ids, probs = normalized_mix(datasets, task_mix)
    out = []
    for _ in range(batch_size):
        ds = datasets[ids[rng.choice(len(ids), p=probs)]]
        w = ds[rng.integers(len(ds))]
        row = rng.integers(w.num_vars)
        max_np = w.history_len // patch_len
        lo, hi = history_range if history_range is not None else (1, max_np)
        hi = min(hi, max_np)
        if hi < 1 or lo > hi:
            raise ValueError(f"history_range {history_range} infeasible for length {w.history_len}")
        n_p = int(rng.integers(lo, hi + 1))
        keep = n_p * patch_len
        out.append(TimeSeriesWindow(w.values[row:row + 1, -keep:], w.future[row:row + 1],
                                    w.delta_t_seconds, w.task_tag))
    return out


# ---------------------------------------------------------------- loop

def step_rng(seed: int, step: int) -> np.random.Generator:
    """Per-step generator, so resuming at any step reproduces the same batches."""
    return np.random.default_rng([seed, step])


def train(params: ModelParams, cfg: ModelConfig, tcfg: TrainConfig,
          datasets: dict[str, list[TimeSeriesWindow]], opt_state: OptimizerState | None = None,
          metrics_path=None, on_checkpoint: Callable | None = None,
          history_range=None) -> tuple[ModelParams, OptimizerState, list[float]]:
    """Run ``tcfg.steps`` total optimizer steps, continuing from ``opt_state.step``."""
    opt_state = opt_state or OptimizerState.zeros_like(params)
    losses = []
    sink = open(metrics_path, "a") if metrics_path else None
    try:
        for step in range(opt_state.step, tcfg.steps):
            t0 = time.perf_counter()
            rng = step_rng(tcfg.seed, step)
            batch = build_batch(datasets, tcfg.task_mix, cfg.patch_len, tcfg.batch_size, rng,
                                history_range)
            params, opt_state, loss = train_step(batch, params, opt_state, cfg, tcfg, rng)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite loss at step {step}")
            losses.append(loss)
            if sink:
                sink.write(json.dumps({"step": step, "loss": loss, "learning_rate": tcfg.learning_rate,
                                       "wall_ms": round(1e3 * (time.perf_counter() - t0), 3)}) + "\n")
            if tcfg.log_every and step % tcfg.log_every == 0:
                log.info("step %d loss %.6f", step, loss)
            if on_checkpoint and tcfg.checkpoint_every and (step + 1) % tcfg.checkpoint_every == 0:
                on_checkpoint(params, opt_state)
    finally:
        if sink:
            sink.close()
    return params, opt_state, losses


# ---------------------------------------------------------------- gradient check

def finite_difference_check(loss_fn: Callable[[ModelParams], float], params: ModelParams,
                            grads: ModelParams, entries: dict[str, list[tuple]],
                            h: float = 1e-4) -> dict[str, float]:
    """Worst relative error per array between ``grads`` and central differences.

    Relative error is |fd - an| / max(|fd|, |an|, 1e-8) over the listed entries.
    """
    worst = {}
    for name, idxs in entries.items():
        arr = params[name]
        errs = []
        for idx in idxs:
            orig = arr[idx]
            arr[idx] = orig + h
            up = loss_fn(params)
            arr[idx] = orig - h
            down = loss_fn(params)
            arr[idx] = orig
            fd = (up - down) / (2 * h)
            an = float(grads[name][idx])
            errs.append(abs(fd - an) / max(abs(fd), abs(an), 1e-8))
        worst[name] = max(errs)
    return worst


def save_metrics_jsonl(records, path) -> None:
    Path(path).write_text("".join(json.dumps(r) + "\n" for r in records))
