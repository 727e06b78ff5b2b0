"""Prediction metrics, downstream link-level rates and the persistence baseline."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .core_series import (
    TimeSeriesWindow,
    classify_granularity,
    denormalize,
    from_model_domain,
    series_to_grid,
    to_model_domain,
)
from .datagen import steering_vector
from .model import ModelConfig, ModelParams, forward_batch, grids_to_batch

log = logging.getLogger(__name__)


def db_to_linear(db):
    return 10.0 ** (np.asarray(db, dtype=np.float64) / 10.0)


def dbm_to_watts(dbm):
    return 10.0 ** ((np.asarray(dbm, dtype=np.float64) - 30.0) / 10.0)


# ---------------------------------------------------------------- NMSE

def nmse(pred, truth) -> float:
    """Pooled error energy over truth energy across the whole horizon."""
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    den = float(np.sum(truth * truth))
    if den == 0.0:
        raise ValueError("NMSE undefined for an all-zero ground truth")
    return float(np.sum((pred - truth) ** 2)) / den


def nmse_per_step(pred, truth) -> np.ndarray:
    """NMSE of each horizon column (last axis) normalized separately."""
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    axes = tuple(range(truth.ndim - 1))
    den = np.sum(truth * truth, axis=axes)
    if np.any(den == 0):
        raise ValueError("per-step NMSE undefined for an all-zero ground-truth step")
    return np.sum((pred - truth) ** 2, axis=axes) / den


def mean_nmse(preds, windows: list[TimeSeriesWindow]) -> tuple[float, np.ndarray]:
    """Mean over windows of each window's pooled NMSE, plus the mean per-step curve."""
    pooled = [nmse(p, w.future) for p, w in zip(preds, windows)]
    steps = np.mean([nmse_per_step(p, w.future) for p, w in zip(preds, windows)], axis=0)
    return float(np.mean(pooled)), steps


def predict_windows(params: ModelParams, cfg: ModelConfig, windows: list[TimeSeriesWindow],
                    chunk: int = 4096) -> list[np.ndarray]:
    """Forecasts (M x H, original domain) for many windows, batching rows of equal length."""
    grids, owners = [], []
    for i, w in enumerate(windows):
        if w.history_len > cfg.max_history:
            raise ValueError(f"history length {w.history_len} exceeds model maximum {cfg.max_history}")
        mw = to_model_domain(w)
        g = classify_granularity(mw.delta_t_seconds)
        for row in mw.values:
            grids.append(series_to_grid(row, cfg.patch_len, g))
            owners.append(i)
    out = np.empty((len(grids), cfg.horizon))
    by_n: dict[int, list[int]] = {}
    for j, grid in enumerate(grids):
        by_n.setdefault(grid.num_patches, []).append(j)
    for idx in by_n.values():
        for s in range(0, len(idx), chunk):
            part = idx[s:s + chunk]
            patches, gran = grids_to_batch([grids[j] for j in part])
            pred = forward_batch(params, cfg, patches, gran).astype(np.float64)
            for j, p in zip(part, pred):
                out[j] = denormalize(p, grids[j].stats)
    preds, start = [], 0
    for w in windows:
        rows = out[start:start + w.num_vars]
        preds.append(from_model_domain(rows, w))
        start += w.num_vars
    return preds


def truncate_history(windows: list[TimeSeriesWindow], length: int) -> list[TimeSeriesWindow]:
    return [TimeSeriesWindow(w.values[:, -length:], w.future, w.delta_t_seconds, w.task_tag)
            for w in windows]


def persistence_baseline(window: TimeSeriesWindow, horizon: int | None = None) -> np.ndarray:
    h = horizon or window.horizon
    if h is None:
        raise ValueError("horizon unknown: window has no future and none was given")
    return np.repeat(window.values[:, -1:].astype(np.float64), h, axis=1)


# ---------------------------------------------------------------- channel downstream

@dataclass
class DownlinkConfig:
    snr_db: float = 10.0
    signal_power: float = 1.0

    @property
    def noise_power(self) -> float:
        return self.signal_power / float(db_to_linear(self.snr_db))


def spectrum_efficiency_cp(pred_csi, true_csi, cfg: DownlinkConfig) -> tuple[float, int]:
    """Average matched-filter rate over subcarriers and slots, bps/Hz.

    CSI arrays are complex (..., N_t) with the leading axes spanning (slot, subcarrier).
    Returns the rate and the number of zero predicted vectors (beam set to 0).
    """
    pred, true = np.asarray(pred_csi), np.asarray(true_csi)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {true.shape}")
    norm = np.linalg.norm(pred, axis=-1, keepdims=True)
    zero = norm[..., 0] == 0
    w = np.divide(pred, norm, out=np.zeros_like(pred, dtype=complex), where=norm > 0)
    gain = np.abs(np.sum(np.conj(true) * w, axis=-1)) ** 2
    rates = np.log2(1.0 + gain / cfg.noise_power)
    if zero.any():
        log.warning("%d zero predicted CSI vectors contribute zero rate", int(zero.sum()))
    return float(rates.mean()), int(zero.sum())


# ---------------------------------------------------------------- ISAC downstream

@dataclass
class IsacDownlinkConfig:
    num_users: int = 8
    num_tx_antennas: int = 4096
    pathloss_ref_db: float = -65.0
    ref_distance_m: float = 1.0
    pathloss_exp: float = 3.0
    noise_dbm: float = -80.0
    total_power_dbm: float = 20.0

    @property
    def noise_watts(self) -> float:
        return float(dbm_to_watts(self.noise_dbm))

    @property
    def user_power_watts(self) -> float:
        return float(dbm_to_watts(self.total_power_dbm)) / self.num_users

    def pathloss(self, distance):
        d = np.asarray(distance, dtype=np.float64)
        return db_to_linear(self.pathloss_ref_db) * (d / self.ref_distance_m) ** (-self.pathloss_exp)


def _steering_matrix(angles, num_antennas: int) -> np.ndarray:
    """Steering vectors stacked on the last axis: angles (...,) -> (..., N)."""
    angles = np.asarray(angles, dtype=np.float64)
    n = np.arange(num_antennas)
    return np.exp(-1j * np.pi * np.cos(angles)[..., None] * n) / math.sqrt(num_antennas)


def isac_snr(pred_angle, true_angle, distance, cfg: IsacDownlinkConfig):
    """Interference-free SNR of beams steered toward the predicted angle (linear)."""
    a_true = _steering_matrix(true_angle, cfg.num_tx_antennas)
    a_pred = _steering_matrix(pred_angle, cfg.num_tx_antennas)
    g2 = np.abs(np.sum(a_true.conj() * a_pred, axis=-1)) ** 2
    return cfg.user_power_watts * cfg.num_tx_antennas * cfg.pathloss(distance) * g2 / cfg.noise_watts


def predictive_beams(pred_angles, cfg: IsacDownlinkConfig) -> np.ndarray:
    """(N_t, K) beam matrix with columns sqrt(p) a(pred_k)."""
    cols = [steering_vector(phi, cfg.num_tx_antennas) for phi in np.atleast_1d(pred_angles)]
    return math.sqrt(cfg.user_power_watts) * np.stack(cols, axis=1)


def isac_sinr(true_angles, beams, distances, cfg: IsacDownlinkConfig) -> np.ndarray:
    """Per-user SINR with full inter-beam interference (linear)."""
    true_angles = np.atleast_1d(true_angles)
    dist = np.atleast_1d(distances)
    a = np.stack([steering_vector(phi, cfg.num_tx_antennas) for phi in true_angles], axis=1)
    # resp[k, j] = a(phi_k)^H w_j
    resp = np.abs(a.conj().T @ beams) ** 2
    scale = cfg.num_tx_antennas * cfg.pathloss(dist)
    signal = scale * np.diag(resp)
    interference = scale * (resp.sum(axis=1) - np.diag(resp))
    return signal / (interference + cfg.noise_watts)


def sum_rate_ap(pred_angles, true_angles, distances, cfg: IsacDownlinkConfig) -> float:
    """Sum over users and slots of log2(1 + SNR), divided by the number of slots only.

    Inputs are (K, H) arrays.
    """
    pred = np.asarray(pred_angles, dtype=np.float64)
    true = np.asarray(true_angles, dtype=np.float64)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {true.shape}")
    snr = isac_snr(pred, true, distances, cfg)
    return float(np.sum(np.log2(1.0 + snr)) / pred.shape[-1])


def sum_rate_bound(distances, cfg: IsacDownlinkConfig, horizon: int | None = None) -> float:
    """Rate with perfect beams: (1/H) sum log2(1 + p alpha N_t / sigma^2)."""
    d = np.asarray(distances, dtype=np.float64)
    h = horizon or (d.shape[-1] if d.ndim > 1 else 1)
    snr = cfg.user_power_watts * cfg.num_tx_antennas * cfg.pathloss(d) / cfg.noise_watts
    return float(np.sum(np.log2(1.0 + snr)) / h)
