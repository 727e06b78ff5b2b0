"""Synthetic wireless datasets, traffic CSV ingestion and the binary dataset format.

Generators are deterministic in (config, seed). A dataset of ``count`` windows uses
per-window seeds ``seed ^ splitmix64(index)`` so windows can be produced in any order.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .core_series import TaskTag, TimeSeriesWindow

log = logging.getLogger(__name__)

SPEED_OF_LIGHT = 2.998e8
_KMH = 1.0 / 3.6


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return x ^ (x >> 31)


def window_seed(seed: int, index: int) -> int:
    return (seed ^ splitmix64(index)) & 0xFFFFFFFFFFFFFFFF


def steering_vector(angle_rad: float, num_antennas: int) -> np.ndarray:
    """Half-wavelength ULA response, unit 2-norm."""
    if num_antennas < 1:
        raise ValueError("num_antennas must be >= 1")
    n = np.arange(num_antennas)
    return np.exp(-1j * np.pi * n * np.cos(angle_rad)) / math.sqrt(num_antennas)


# ---------------------------------------------------------------- channel

@dataclass
class ChannelScenarioConfig:
    num_antennas_h: int = 4
    num_antennas_v: int = 4
    num_subcarriers: int = 48
    carrier_freq_hz: float = 2.4e9
    subcarrier_spacing_hz: float = 180e3
    num_paths: int = 8
    speed_range_kmh: tuple[float, float] = (10.0, 100.0)
    delta_t_seconds: float = 0.5e-3
    los: bool = True
    k_factor_db: float = 9.0
    delay_spread_s: float = 100e-9
    history_len: int = 32
    horizon: int = 4
    # Slow-timescale blend (used for the 50 ms presets): path loss along a straight
    # track, Gauss-Markov shadowing, and a fast-fading residue of relative amplitude
    # ``fast_fading_weight`` on top of a Doppler-free multipath pattern.
    large_scale: bool = False
    fast_fading_weight: float = 0.1
    pathloss_exp: float = 3.5
    shadow_std_db: float = 4.0
    shadow_corr_m: float = 20.0
    start_distance_m: tuple[float, float] = (50.0, 300.0)

    def __post_init__(self) -> None:
        self.speed_range_kmh = tuple(float(v) for v in self.speed_range_kmh)
        self.start_distance_m = tuple(float(v) for v in self.start_distance_m)
        if self.num_antennas_h * self.num_antennas_v < 1 or self.num_subcarriers < 1:
            raise ValueError("need at least one antenna and one subcarrier")
        lo, hi = self.speed_range_kmh
        if lo < 0 or hi < lo:
            raise ValueError(f"speed range must be ordered and non-negative, got {self.speed_range_kmh}")
        if self.num_paths < 1 or self.delta_t_seconds <= 0:
            raise ValueError("num_paths and delta_t_seconds must be positive")

    @property
    def num_antennas(self) -> int:
        return self.num_antennas_h * self.num_antennas_v

    @property
    def num_vars(self) -> int:
        return 2 * self.num_antennas * self.num_subcarriers


_ENVIRONMENTS = {
    # (paths LOS, paths NLOS, delay spread LOS, delay spread NLOS, K-factor dB)
    "UMi": (8, 12, 65e-9, 130e-9, 9.0),
    "UMa": (10, 16, 100e-9, 360e-9, 9.0),
    "RMa": (6, 8, 30e-9, 40e-9, 7.0),
}

_TABLE = {
    "D1": (0.5e-3, "UMi", True), "D2": (0.5e-3, "UMi", False),
    "D3": (0.5e-3, "UMa", True), "D4": (0.5e-3, "UMa", False),
    "D5": (0.5e-3, "RMa", False), "D6": (50e-3, "UMi", True),
    "D7": (50e-3, "UMi", False), "D8": (50e-3, "UMa", True),
    "D9": (50e-3, "UMa", False), "D10": (50e-3, "RMa", False),
    "D11": (0.5e-3, "RMa", True),
}

HELD_OUT_PRESET = "D11"


def channel_preset(name: str, **overrides) -> ChannelScenarioConfig:
    """Scenario presets named after the dataset table (D11 is the held-out scenario)."""
    dt, env, los = _TABLE[name]
    p_los, p_nlos, ds_los, ds_nlos, k_db = _ENVIRONMENTS[env]
    cfg = ChannelScenarioConfig(
        delta_t_seconds=dt, los=los, num_paths=p_los if los else p_nlos,
        delay_spread_s=ds_los if los else ds_nlos, k_factor_db=k_db,
        large_scale=dt >= 10e-3,
    )
    unknown = set(overrides) - {f.name for f in fields(ChannelScenarioConfig)}
    if unknown:
        raise ValueError(f"unknown ChannelScenarioConfig keys: {sorted(unknown)}")
    return replace(cfg, **overrides)


def _upa_response(cfg: ChannelScenarioConfig, az, el) -> np.ndarray:
    """(P, N_t) unnormalized half-wavelength UPA responses, vertical-major flattening."""
    nh = np.arange(cfg.num_antennas_h)
    nv = np.arange(cfg.num_antennas_v)
    ph = np.exp(1j * np.pi * np.outer(np.sin(az) * np.cos(el), nh))
    pv = np.exp(1j * np.pi * np.outer(np.sin(el), nv))
    return (pv[:, :, None] * ph[:, None, :]).reshape(len(az), -1)


def _path_gains(cfg: ChannelScenarioConfig, rng) -> tuple[np.ndarray, np.ndarray]:
    p = cfg.num_paths
    delays = np.sort(rng.exponential(cfg.delay_spread_s, size=p))
    power = np.exp(-delays / cfg.delay_spread_s)
    gains = (rng.normal(size=p) + 1j * rng.normal(size=p)) / math.sqrt(2) * np.sqrt(power)
    if cfg.los:
        delays[0] = 0.0
        k = 10 ** (cfg.k_factor_db / 10)
        scat = gains[1:]
        scat *= math.sqrt(1.0 / (k + 1)) / max(np.linalg.norm(scat), 1e-12)
        gains[0] = math.sqrt(k / (k + 1)) * np.exp(1j * rng.uniform(0, 2 * np.pi))
    # Unit total power for every realization keeps mean power stable across seeds.
    gains /= np.linalg.norm(gains)
    return gains, delays


def channel_tensor(cfg: ChannelScenarioConfig, seed: int, speed_kmh: float | None = None) -> np.ndarray:
    """Complex CSI of shape (T, C, N_t) with T = history_len + horizon."""
    rng = np.random.default_rng(seed)
    steps = cfg.history_len + cfg.horizon
    if speed_kmh is None:
        speed_kmh = rng.uniform(*cfg.speed_range_kmh)
    v = speed_kmh * _KMH
    wavelength = SPEED_OF_LIGHT / cfg.carrier_freq_hz
    p = cfg.num_paths
    gains, delays = _path_gains(cfg, rng)
    az = rng.uniform(-np.pi / 2, np.pi / 2, size=p)
    el = rng.uniform(-np.pi / 6, np.pi / 6, size=p)
    doppler = v / wavelength * np.cos(rng.uniform(0, 2 * np.pi, size=p))
    t = np.arange(steps) * cfg.delta_t_seconds
    f_sub = (np.arange(cfg.num_subcarriers) - (cfg.num_subcarriers - 1) / 2) * cfg.subcarrier_spacing_hz
    arr = _upa_response(cfg, az, el)
    freq = np.exp(-2j * np.pi * np.outer(f_sub, delays))  # (C, P)

    if not cfg.large_scale:
        temporal = gains * np.exp(2j * np.pi * np.outer(t, doppler))  # (T, P)
        return np.einsum("tp,cp,pn->tcn", temporal, freq, arr)

    static = np.einsum("p,cp,pn->cn", gains, freq, arr)
    fast_t = gains * (np.exp(2j * np.pi * np.outer(t, doppler)) - 1.0)
    fast = np.einsum("tp,cp,pn->tcn", fast_t, freq, arr)
    # Straight-line track from a random start point.
    d0 = rng.uniform(*cfg.start_distance_m)
    heading = rng.uniform(0, 2 * np.pi)
    pos = np.stack([d0 + v * t * np.cos(heading), v * t * np.sin(heading)], axis=1)
    dist = np.maximum(np.hypot(pos[:, 0], pos[:, 1]), 1.0)
    rho = math.exp(-v * cfg.delta_t_seconds / cfg.shadow_corr_m)
    shadow = np.empty(steps)
    shadow[0] = rng.normal(0, cfg.shadow_std_db)
    innov = rng.normal(0, cfg.shadow_std_db * math.sqrt(1 - rho * rho), size=steps)
    for i in range(1, steps):
        shadow[i] = rho * shadow[i - 1] + innov[i]
    amp = (dist / 10.0) ** (-cfg.pathloss_exp / 2) * 10 ** (shadow / 20)
    return amp[:, None, None] * (static[None] + cfg.fast_fading_weight * fast)


def realify(csi: np.ndarray) -> np.ndarray:
    """(T, C, N_t) complex -> (2 * N_t * C, T) real; row 2*(n*C + c) + {0: real, 1: imag}."""
    t = csi.shape[0]
    per = csi.transpose(2, 1, 0).reshape(-1, t)  # (N_t * C, T), index n*C + c
    out = np.empty((2 * per.shape[0], t))
    out[0::2] = per.real
    out[1::2] = per.imag
    return out


def complexify(x: np.ndarray, num_subcarriers: int, num_antennas: int) -> np.ndarray:
    """Inverse of ``realify``: (2 * N_t * C, T) -> (T, C, N_t)."""
    z = x[0::2] + 1j * x[1::2]
    return z.reshape(num_antennas, num_subcarriers, -1).transpose(2, 1, 0)


def gen_channel_series(cfg: ChannelScenarioConfig, seed: int, speed_kmh: float | None = None) -> TimeSeriesWindow:
    x = realify(channel_tensor(cfg, seed, speed_kmh))
    L = cfg.history_len
    return TimeSeriesWindow(x[:, :L], x[:, L:], cfg.delta_t_seconds, TaskTag.CHANNEL)


# ---------------------------------------------------------------- trajectories

MOBILITY_SPEEDS_KMH = {
    "pedestrian": (0.0, 10.0),
    "bicycle": (10.0, 25.0),
    "vehicle": (30.0, 80.0),
    "rural_vehicle": (80.0, 120.0),
}


@dataclass
class TrajectoryConfig:
    mobility_mode: str = "vehicle"
    distance_range_m: tuple[float, float] = (5.0, 500.0)
    accel_std: float = 1.0  # m/s^2
    turn_rate_std: float = 0.3  # rad/s
    delta_t_seconds: float = 0.05
    num_users: int = 8
    angle_noise_std_rad: float = 0.0
    history_len: int = 32
    horizon: int = 4
    speed_range_kmh: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        if self.mobility_mode not in MOBILITY_SPEEDS_KMH:
            raise ValueError(f"unknown mobility mode {self.mobility_mode!r}")
        if self.speed_range_kmh is None:
            self.speed_range_kmh = MOBILITY_SPEEDS_KMH[self.mobility_mode]
        self.speed_range_kmh = tuple(float(v) for v in self.speed_range_kmh)
        self.distance_range_m = tuple(float(v) for v in self.distance_range_m)
        lo, hi = self.distance_range_m
        if not 0 < lo < hi:
            raise ValueError(f"bad distance range {self.distance_range_m}")
        if self.num_users < 1 or self.delta_t_seconds <= 0:
            raise ValueError("num_users and delta_t_seconds must be positive")


def wrap_angle(phi):
    """Map to (-pi, pi]."""
    out = np.angle(np.exp(1j * np.asarray(phi, dtype=np.float64)))
    return np.where(out <= -np.pi, np.pi, out)


def integrate_trajectory(pos0, speed0: float, heading0: float, steps: int, dt: float,
                         accel=None, turn=None, speed_range=(0.0, np.inf),
                         distance_range=(5.0, 500.0)) -> np.ndarray:
    """Positions (steps, 2) of a user driven by per-step acceleration and turn-rate samples.

    The speed is clipped to ``speed_range`` (m/s); crossing either distance bound
    reflects the position radially and flips the radial velocity component.
    """
    accel = np.zeros(steps) if accel is None else accel
    turn = np.zeros(steps) if turn is None else turn
    lo, hi = distance_range
    p = np.array(pos0, dtype=np.float64)
    speed, heading = float(speed0), float(heading0)
    out = np.empty((steps, 2))
    out[0] = p
    for i in range(1, steps):
        vel = speed * np.array([math.cos(heading), math.sin(heading)])
        p = p + vel * dt
        d = math.hypot(p[0], p[1])
        if d > hi or d < lo:
            r_hat = p / d
            p = r_hat * (2 * hi - d if d > hi else 2 * lo - d)
            vel = vel - 2 * np.dot(vel, r_hat) * r_hat
            heading = math.atan2(vel[1], vel[0])
        speed = float(np.clip(speed + accel[i] * dt, *speed_range))
        heading += turn[i] * dt
        out[i] = p
    return out


def simulate_users(cfg: TrajectoryConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Wrapped angles and distances, both shaped (K, T), for K users around a BS at the origin."""
    rng = np.random.default_rng(seed)
    steps = cfg.history_len + cfg.horizon
    lo, hi = (s * _KMH for s in cfg.speed_range_kmh)
    angles = np.empty((cfg.num_users, steps))
    dists = np.empty((cfg.num_users, steps))
    for k in range(cfg.num_users):
        d0 = rng.uniform(*cfg.distance_range_m)
        theta0 = rng.uniform(-np.pi, np.pi)
        pos = integrate_trajectory(
            (d0 * math.cos(theta0), d0 * math.sin(theta0)),
            rng.uniform(lo, hi), rng.uniform(-np.pi, np.pi), steps, cfg.delta_t_seconds,
            accel=rng.normal(0, cfg.accel_std, steps),
            turn=rng.normal(0, cfg.turn_rate_std, steps),
            speed_range=(lo, hi), distance_range=cfg.distance_range_m,
        )
        angles[k] = wrap_angle(np.arctan2(pos[:, 1], pos[:, 0]))
        dists[k] = np.hypot(pos[:, 0], pos[:, 1])
    return angles, dists


def gen_angle_series(cfg: TrajectoryConfig, seed: int) -> tuple[TimeSeriesWindow, TimeSeriesWindow]:
    """Angle window (unwrapped, noisy history, clean future) and the parallel two-way delay window."""
    angles, dists = simulate_users(cfg, seed)
    noise_rng = np.random.default_rng(window_seed(seed, 0x5EED))
    phi = np.unwrap(angles, axis=1)
    L = cfg.history_len
    hist = phi[:, :L] + noise_rng.normal(0, cfg.angle_noise_std_rad, size=(cfg.num_users, L))
    delay = 2.0 * dists / SPEED_OF_LIGHT
    return (
        TimeSeriesWindow(hist, phi[:, L:], cfg.delta_t_seconds, TaskTag.ANGLE),
        TimeSeriesWindow(delay[:, :L], delay[:, L:], cfg.delta_t_seconds, TaskTag.DELAY),
    )


# ---------------------------------------------------------------- traffic

@dataclass
class TrafficConfig:
    grid_dims: tuple[int, int] = (4, 4)
    daily_period_steps: int = 24
    weekly_modulation: float = 0.2
    noise_std: float = 0.1
    base_load: float = 100.0
    history_len: int = 64
    horizon: int = 4
    delta_t_seconds: float = 3600.0

    def __post_init__(self) -> None:
        self.grid_dims = tuple(int(v) for v in self.grid_dims)
        if min(self.grid_dims) < 1 or self.daily_period_steps < 1 or self.base_load <= 0:
            raise ValueError("grid dims, period and base load must be positive")
        if not 0 <= self.weekly_modulation < 1 or self.noise_std < 0:
            raise ValueError("weekly_modulation must be in [0, 1) and noise_std >= 0")


def traffic_cell_series(t, base: float, amplitude: float, phase: float, cfg: TrafficConfig,
                        rng: np.random.Generator) -> np.ndarray:
    """Diurnal sinusoid with a weekly envelope and mean-one lognormal noise; never negative."""
    t = np.asarray(t, dtype=np.float64)
    p = cfg.daily_period_steps
    diurnal = 1.0 + amplitude * np.sin(2 * np.pi * t / p + phase)
    weekly = 1.0 + cfg.weekly_modulation * np.sin(2 * np.pi * t / (7 * p))
    s = cfg.noise_std
    noise = np.exp(s * rng.normal(size=t.shape) - 0.5 * s * s)
    return base * diurnal * weekly * noise


def gen_traffic_series(cfg: TrafficConfig, seed: int) -> TimeSeriesWindow:
    rng = np.random.default_rng(seed)
    cells = cfg.grid_dims[0] * cfg.grid_dims[1]
    steps = cfg.history_len + cfg.horizon
    t = rng.integers(0, 7 * cfg.daily_period_steps) + np.arange(steps)
    rows = np.empty((cells, steps))
    for c in range(cells):
        base = cfg.base_load * rng.lognormal(0.0, 0.5)
        amp = rng.uniform(0.3, 0.8)
        phase = rng.normal(0.0, 0.3)
        rows[c] = traffic_cell_series(t, base, amp, phase, cfg, rng)
    L = cfg.history_len
    return TimeSeriesWindow(rows[:, :L], rows[:, L:], cfg.delta_t_seconds, TaskTag.TRAFFIC)


def _parse_timestamp(raw: str) -> float:
    raw = raw.strip()
    try:
        v = float(raw)
    except ValueError:
        dt = datetime.fromisoformat(raw)
        if dt.tzinfo is None:
            dt = dt.replace(tzinfo=timezone.utc)
        return dt.timestamp()
    return v / 1000.0 if v > 1e11 else v  # epoch milliseconds vs seconds


def ingest_traffic_csv(path, column_map: dict | None = None, grid_dims: tuple[int, int] | None = None,
                       history_len: int = 64, horizon: int = 4, delimiter: str = "\t",
                       stride: int = 1, max_missing: float = 0.1) -> list[TimeSeriesWindow]:
    """Hourly multivariate windows from per-record traffic logs.

    ``column_map`` gives zero-based indices for ``cell``, ``time`` and ``volume``
    (default: Milan-grid layout, columns 0, 1 and 7). Volumes are summed per
    (cell, hour). Missing hours are linearly interpolated from the cell's observed
    hours (held constant past the ends); a window whose missing share exceeds
    ``max_missing`` is dropped. With ``grid_dims`` the variables are cells
    1..N1*N2 in id order, otherwise every cell id present in the file.
    """
    cols = {"cell": 0, "time": 1, "volume": 7}
    cols.update(column_map or {})
    totals: dict[tuple[int, int], float] = {}
    skipped = 0
    with open(path, newline="") as fh:
        for row in csv.reader(fh, delimiter=delimiter):
            if not row or not any(f.strip() for f in row):
                continue
            try:
                cell = int(float(row[cols["cell"]]))
                hour = int(math.floor(_parse_timestamp(row[cols["time"]]) / 3600.0))
                vol = float(row[cols["volume"]]) if row[cols["volume"]].strip() else 0.0
            except (ValueError, IndexError):
                skipped += 1
                continue
            totals[(cell, hour)] = totals.get((cell, hour), 0.0) + vol
    if skipped:
        log.warning("skipped %d unparseable rows in %s", skipped, path)
    if not totals:
        return []

    if grid_dims is not None:
        cell_ids = list(range(1, grid_dims[0] * grid_dims[1] + 1))
    else:
        cell_ids = sorted({c for c, _ in totals})
    hours = [h for _, h in totals]
    h0, h1 = min(hours), max(hours)
    span = h1 - h0 + 1
    data = np.zeros((len(cell_ids), span))
    observed = np.zeros((len(cell_ids), span), dtype=bool)
    index = {c: i for i, c in enumerate(cell_ids)}
    for (c, h), v in totals.items():
        if c in index:
            data[index[c], h - h0] = v
            observed[index[c], h - h0] = True
    grid = np.arange(span)
    for i in range(len(cell_ids)):
        if observed[i].any() and not observed[i].all():
            data[i] = np.interp(grid, grid[observed[i]], data[i, observed[i]])

    need = history_len + horizon
    windows = []
    for s in range(0, span - need + 1, stride):
        if 1.0 - observed[:, s:s + need].mean() > max_missing:
            continue
        windows.append(TimeSeriesWindow(data[:, s:s + history_len], data[:, s + history_len:s + need],
                                        3600.0, TaskTag.TRAFFIC))
    return windows


# ---------------------------------------------------------------- dataset files

DATASET_MAGIC = b"WFMD"
DATASET_VERSION = 1
_TASK_CODES = list(TaskTag)
_HEADER = struct.Struct("<4sIIIIIdQ")  # magic, version, task, M, L, H, delta_t, count


class DatasetFormatError(ValueError):
    pass


def export_dataset(windows: list[TimeSeriesWindow], path) -> None:
    """Write windows sharing (task, M, L, H, delta_t) to the binary dataset format."""
    if not windows:
        raise ValueError("cannot export an empty window list without a shape")
    w0 = windows[0]
    m, l, h = w0.num_vars, w0.history_len, w0.horizon
    for w in windows:
        if (w.num_vars, w.history_len, w.horizon, w.delta_t_seconds, w.task_tag) != \
                (m, l, h, w0.delta_t_seconds, w0.task_tag):
            raise ValueError("all windows in a dataset must share task, shape and delta_t")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, _TASK_CODES.index(w0.task_tag),
                              m, l, h, float(w0.delta_t_seconds), len(windows)))
        for w in windows:
            fh.write(np.ascontiguousarray(w.values, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(w.future, dtype="<f4").tobytes())


def import_dataset(path) -> list[TimeSeriesWindow]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"truncated header: {len(raw)} bytes at offset 0, need {_HEADER.size}")
    magic, version, task, m, l, h, dt, count = _HEADER.unpack_from(raw, 0)
    if magic != DATASET_MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r} at offset 0")
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version} at offset 4")
    if task >= len(_TASK_CODES):
        raise DatasetFormatError(f"unknown task code {task} at offset 8")
    per = 4 * m * (l + h)
    expected = _HEADER.size + per * count
    if len(raw) < expected:
        bad = _HEADER.size + ((len(raw) - _HEADER.size) // per) * per
        raise DatasetFormatError(f"truncated payload: window data ends early at offset {bad} "
                                 f"(file {len(raw)} bytes, expected {expected})")
    if len(raw) > expected:
        raise DatasetFormatError(f"trailing bytes after offset {expected}")
    # Each window is its M x L history followed by its M x H future, both row-major.
    payload = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(count, m * (l + h))
    tag = _TASK_CODES[task]
    return [TimeSeriesWindow(p[:m * l].reshape(m, l).astype(np.float32),
                             p[m * l:].reshape(m, h).astype(np.float32), dt, tag)
            for p in payload]


# ---------------------------------------------------------------- batch generation

def config_from_dict(cls, d: dict):
    """Build a config dataclass, rejecting keys it does not declare."""
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


@dataclass
class ScenarioConfig:
    """Task selector plus the matching generator config.

    ``preset`` names a channel scenario from the preset table; the ``channel`` mapping
    then overrides individual fields of it.
    """

    task: TaskTag = TaskTag.CHANNEL
    preset: str | None = None
    channel: dict = field(default_factory=dict)
    trajectory: dict = field(default_factory=dict)
    traffic: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.task = TaskTag(self.task)
        if self.preset is not None and self.preset not in _TABLE:
            raise ValueError(f"unknown channel preset {self.preset!r}")
        self.generator_config()  # validate eagerly

    def generator_config(self):
        if self.task is TaskTag.CHANNEL:
            if self.preset:
                return channel_preset(self.preset, **self.channel)
            return config_from_dict(ChannelScenarioConfig, self.channel)
        if self.task in (TaskTag.ANGLE, TaskTag.DELAY):
            return config_from_dict(TrajectoryConfig, self.trajectory)
        if self.task is TaskTag.TRAFFIC:
            return config_from_dict(TrafficConfig, self.traffic)
        raise ValueError(f"no generator for task {self.task.value!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task"] = self.task.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        return config_from_dict(cls, d)


def generate(task: TaskTag | str, cfg, count: int, seed: int) -> list[TimeSeriesWindow]:
    """``count`` windows of one task; angle and delay share the trajectory generator."""
    task = TaskTag(task)
    out = []
    for i in range(count):
        s = window_seed(seed, i)
        if task is TaskTag.CHANNEL:
            out.append(gen_channel_series(cfg, s))
        elif task is TaskTag.ANGLE:
            out.append(gen_angle_series(cfg, s)[0])
        elif task is TaskTag.DELAY:
            out.append(gen_angle_series(cfg, s)[1])
        elif task is TaskTag.TRAFFIC:
            out.append(gen_traffic_series(cfg, s))
        else:
            raise ValueError(f"no generator for task {task.value!r}")
    return out
