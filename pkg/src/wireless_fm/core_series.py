"""Series preprocessing: univariate split, instance norm, padding, patching, masks."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

NORM_EPS = 1e-8

# Granularity boundaries in seconds (closed on the left).
_ONE_MS = 1e-3
_ONE_HOUR = 3600.0


class TaskTag(str, enum.Enum):
    CHANNEL = "channel"
    ANGLE = "angle"
    TRAFFIC = "traffic"
    DELAY = "delay"
    CUSTOM = "custom"


class Granularity(enum.IntEnum):
    """Sampling-interval resolution class; the int value indexes the encoding table."""

    HIGH = 0
    MEDIUM = 1
    LOW = 2


@dataclass
class TimeSeriesWindow:
    """A multivariate history (M x L) with optional future targets (M x H)."""

    values: np.ndarray
    future: np.ndarray | None
    delta_t_seconds: float
    task_tag: TaskTag = TaskTag.CUSTOM

    def __post_init__(self) -> None:
        self.values = np.atleast_2d(np.asarray(self.values))
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise ValueError(f"values must be a non-empty M x L matrix, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("values contain non-finite entries")
        if self.future is not None:
            self.future = np.atleast_2d(np.asarray(self.future))
            if self.future.shape[0] != self.values.shape[0] or self.future.shape[1] < 1:
                raise ValueError(
                    f"future shape {self.future.shape} does not match {self.values.shape[0]} variables"
                )
            if not np.all(np.isfinite(self.future)):
                raise ValueError("future contains non-finite entries")
        if not self.delta_t_seconds > 0:
            raise ValueError(f"delta_t_seconds must be positive, got {self.delta_t_seconds}")
        self.task_tag = TaskTag(self.task_tag)

    @property
    def num_vars(self) -> int:
        return self.values.shape[0]

    @property
    def history_len(self) -> int:
        return self.values.shape[1]

    @property
    def horizon(self) -> int | None:
        return None if self.future is None else self.future.shape[1]


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float
    degenerate: bool = False


@dataclass
class PatchGrid:
    """Normalized univariate patches with a validity mask (1 = valid)."""

    patches: np.ndarray
    mask: np.ndarray
    stats: NormStats
    granularity: Granularity
    pad_count: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def num_patches(self) -> int:
        return self.patches.shape[0]

    @property
    def patch_len(self) -> int:
        return self.patches.shape[1]


def row_split(window: TimeSeriesWindow) -> list[np.ndarray]:
    return [row.copy() for row in window.values]


def instance_normalize(series, eps: float = NORM_EPS) -> tuple[np.ndarray, NormStats]:
    """Zero-mean, unit population-variance scaling of one series.

    A constant series keeps its mean, has its std clamped to ``eps`` and maps to zeros.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1 or x.size < 1:
        raise ValueError("series must be a non-empty 1-D vector")
    mean = float(x.mean())
    std = float(x.std())
    degenerate = std < eps
    if degenerate:
        return np.zeros_like(x), NormStats(mean, eps, True)
    return (x - mean) / std, NormStats(mean, std, False)


def denormalize(pred, stats: NormStats) -> np.ndarray:
    return np.asarray(pred, dtype=np.float64) * stats.std + stats.mean


def classify_granularity(delta_t_seconds: float) -> Granularity:
    if not delta_t_seconds > 0:
        raise ValueError(f"delta_t_seconds must be positive, got {delta_t_seconds}")
    if delta_t_seconds < _ONE_MS:
        return Granularity.HIGH
    if delta_t_seconds < _ONE_HOUR:
        return Granularity.MEDIUM
    return Granularity.LOW


def num_patches(length: int, patch_len: int) -> int:
    return math.ceil(length / patch_len)


def pad_to_patch_multiple(series, patch_len: int) -> tuple[np.ndarray, int]:
    """Prepend zeros so the length becomes a multiple of ``patch_len``."""
    x = np.asarray(series, dtype=np.float64)
    if x.size < 1 or patch_len < 1:
        raise ValueError("need a non-empty series and patch_len >= 1")
    pad = num_patches(x.size, patch_len) * patch_len - x.size
    return np.concatenate([np.zeros(pad), x]), pad


def prefix_mask(num_patches: int, patch_len: int, zeros: int) -> np.ndarray:
    """Mask whose first ``zeros`` flattened positions are 0 and the rest 1."""
    flat = np.ones(num_patches * patch_len)
    flat[:zeros] = 0.0
    return flat.reshape(num_patches, patch_len)


def patchify(padded, pad_count: int, patch_len: int, stats: NormStats,
             granularity: Granularity) -> PatchGrid:
    x = np.asarray(padded, dtype=np.float64)
    if x.size % patch_len:
        raise ValueError(f"padded length {x.size} not divisible by patch_len {patch_len}")
    n = x.size // patch_len
    mask = prefix_mask(n, patch_len, pad_count)
    patches = x.reshape(n, patch_len) * mask
    return PatchGrid(patches, mask, stats, Granularity(granularity), pad_count)


def sample_training_mask(num_patches: int, patch_len: int, rng: np.random.Generator) -> np.ndarray:
    """Random prefix mask confined to the first patch, r ~ U{0, ..., patch_len - 1}."""
    if num_patches < 1:
        raise ValueError("num_patches must be >= 1")
    r = int(rng.integers(0, patch_len))
    return prefix_mask(num_patches, patch_len, r)


def apply_patch_mask(grid: PatchGrid) -> PatchGrid:
    if grid.mask.shape != grid.patches.shape:
        raise ValueError("mask and patches differ in shape")
    return PatchGrid(grid.patches * grid.mask, grid.mask.copy(), grid.stats, grid.granularity,
                     grid.pad_count, dict(grid.meta))


def series_to_grid(series, patch_len: int, granularity: Granularity) -> PatchGrid:
    """Inference path for one series: normalize the valid samples, then pad and patch."""
    normed, stats = instance_normalize(series)
    padded, pad = pad_to_patch_multiple(normed, patch_len)
    return patchify(padded, pad, patch_len, stats, granularity)


def window_to_grids(window: TimeSeriesWindow, patch_len: int) -> list[PatchGrid]:
    g = classify_granularity(window.delta_t_seconds)
    return [series_to_grid(row, patch_len, g) for row in row_split(window)]


# Signed log: the 50 ms channel task spans a wide dynamic range across path loss
# states, and its real/imag parts are signed, so a plain log10 is undefined.
SIGNED_LOG_SCALE = 1e3


def signed_log(x, scale: float = SIGNED_LOG_SCALE) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.log10(1.0 + np.abs(x) * scale)


def inverse_signed_log(y, scale: float = SIGNED_LOG_SCALE) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return np.sign(y) * (np.power(10.0, np.abs(y)) - 1.0) / scale


def needs_signed_log(window: TimeSeriesWindow) -> bool:
    """Channel windows sampled at 10 ms or slower are modelled in the signed-log domain."""
    return window.task_tag is TaskTag.CHANNEL and window.delta_t_seconds >= 10e-3


def to_model_domain(window: TimeSeriesWindow) -> TimeSeriesWindow:
    if not needs_signed_log(window):
        return window
    fut = None if window.future is None else signed_log(window.future)
    return TimeSeriesWindow(signed_log(window.values), fut, window.delta_t_seconds, window.task_tag)


def from_model_domain(pred: np.ndarray, window: TimeSeriesWindow) -> np.ndarray:
    return inverse_signed_log(pred) if needs_signed_log(window) else pred
