"""Day-ahead load datasets.

Arrays are laid out as one row per day: inputs (days, instants, features),
targets (days, instants).  A generator produces synthetic but structured
load series from weather-like drivers, so the pipeline can be exercised and
benchmarked without any proprietary data.
"""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError


@dataclass
class LoadDataset:
    x: np.ndarray  # (days, instants, features)
    y: np.ndarray  # (days, instants)
    feature_names: list
    dates: list  # ISO date string per day

    def __post_init__(self):
        if self.x.ndim != 3 or self.y.ndim != 2:
            raise ContractError(f"bad array ranks {self.x.shape} / {self.y.shape}")
        if self.x.shape[:2] != self.y.shape:
            raise ContractError(
                f"inputs {self.x.shape} and targets {self.y.shape} disagree"
            )
        if self.x.shape[2] != len(self.feature_names):
            raise ContractError(
                f"{self.x.shape[2]} feature columns, {len(self.feature_names)} names"
            )
        if len(self.dates) != self.x.shape[0]:
            raise ContractError(f"{len(self.dates)} dates for {self.x.shape[0]} days")

    @property
    def days(self):
        return self.x.shape[0]

    @property
    def instants(self):
        return self.x.shape[1]

    @property
    def n_features(self):
        return self.x.shape[2]


@dataclass
class SynthConfig:
    days: int = 730
    instants: int = 24
    n_informative: int = 5
    n_noise: int = 15
    seed: int = 0
    base_load: float = 1000.0
    noise_scale: float = 10.0
    start_date: str = "2020-01-01"


INFORMATIVE_NAMES = ("temperature", "temp_smooth", "weekday_profile", "holiday", "cloud_cover")


def synth_generate(config):
    """Deterministic synthetic national-load-style dataset.

    The first ``n_informative`` features each drive the target through a
    distinct mechanism (heating demand, smoothed-temperature deviation,
    weekly rhythm, holiday shutdowns, lighting demand); the remaining
    columns are pure noise.  The target is strictly positive.
    """
    if config.n_informative != 5:
        raise ContractError("the generator defines exactly 5 informative drivers")
    rng = np.random.default_rng(config.seed)
    d, h = config.days, config.instants
    day_idx = np.arange(d)[:, None]
    hour = np.arange(h)[None, :] * (24.0 / h)

    annual = 10.0 * np.sin(2 * np.pi * (day_idx - 30) / 365.25)
    daily = 4.0 * np.sin(2 * np.pi * (hour - 9) / 24.0)
    ar = np.zeros(d)
    eps = rng.normal(0, 1.5, size=d)
    for t in range(1, d):
        ar[t] = 0.8 * ar[t - 1] + eps[t]
    temperature = 12.0 + annual + daily + ar[:, None]

    alpha = 0.95
    temp_smooth = np.empty_like(temperature)
    temp_smooth[0] = temperature[0]
    for t in range(1, d):
        temp_smooth[t] = alpha * temp_smooth[t - 1] + (1 - alpha) * temperature[t]

    start = dt.date.fromisoformat(config.start_date)
    dates = [(start + dt.timedelta(days=int(t))).isoformat() for t in range(d)]
    dow = np.array([(start + dt.timedelta(days=int(t))).weekday() for t in range(d)])
    weekday_profile = np.where(dow[:, None] < 5, 1.0, 0.0) * (
        1.0 + 0.3 * np.sin(2 * np.pi * (hour - 8) / 24.0)
    )
    # fixed-date holidays plus a few movable ones drawn once
    holiday_days = {(1, 1), (5, 1), (7, 14), (12, 25), (12, 26)}
    is_holiday = np.array(
        [
            (dt.date.fromisoformat(s).month, dt.date.fromisoformat(s).day) in holiday_days
            for s in dates
        ],
        dtype=float,
    )
    holiday = np.repeat(is_holiday[:, None], h, axis=1)

    cloud = np.clip(
        0.5
        + 0.3 * np.sin(2 * np.pi * day_idx / 365.25 + 1.0)
        + rng.normal(0, 0.15, size=(d, h)),
        0.0,
        1.0,
    )

    informative = np.stack(
        [temperature, temp_smooth, weekday_profile, holiday, cloud], axis=2
    )
    noise = rng.normal(0, 1.0, size=(d, h, config.n_noise))

    heating = np.maximum(0.0, 15.0 - temperature)
    deviation = temperature - temp_smooth
    y = (
        config.base_load
        + 15.0 * heating
        + 30.0 * np.abs(deviation)
        + 130.0 * weekday_profile
        - 600.0 * holiday
        + 300.0 * cloud
        + rng.normal(0, config.noise_scale, size=(d, h))
    )
    y = np.maximum(y, 1.0)

    names = list(INFORMATIVE_NAMES) + [f"noise_{i:02d}" for i in range(config.n_noise)]
    return LoadDataset(np.concatenate([informative, noise], axis=2), y, names, dates)


# ---------------------------------------------------------------------------
# CSV round trip: long format, one row per (day, instant)

def save_csv(dataset, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", "instant", "load"] + list(dataset.feature_names))
        for t in range(dataset.days):
            for i in range(dataset.instants):
                row = [dataset.dates[t], i, repr(float(dataset.y[t, i]))]
                row += [repr(float(v)) for v in dataset.x[t, i]]
                writer.writerow(row)


def load_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:3] != ["date", "instant", "load"]:
            raise ContractError(f"{path}: header must start with date,instant,load")
        names = header[3:]
        rows = list(reader)
    if not rows:
        raise ContractError(f"{path}: no data rows")
    dates = []
    per_day = {}
    for ln, row in enumerate(rows, start=2):
        if len(row) != 3 + len(names):
            raise ContractError(f"{path}:{ln}: expected {3 + len(names)} columns")
        date, instant = row[0], int(row[1])
        load = float(row[2])
        if load <= 0:
            raise ContractError(f"{path}:{ln}: non-positive load {load}")
        if date not in per_day:
            dates.append(date)
            per_day[date] = {}
        per_day[date][instant] = (load, [float(v) for v in row[3:]])
    instants = len(per_day[dates[0]])
    x = np.zeros((len(dates), instants, len(names)))
    y = np.zeros((len(dates), instants))
    for t, date in enumerate(dates):
        day = per_day[date]
        if len(day) != instants or set(day) != set(range(instants)):
            raise ContractError(f"{path}: day {date} does not cover instants 0..{instants - 1}")
        for i in range(instants):
            y[t, i], feats = day[i]
            x[t, i] = feats
    return LoadDataset(x, y, names, dates)


# ---------------------------------------------------------------------------
# splitting and scaling

def split_blocks(dataset, fractions=(0.7, 0.15, 0.15)):
    """Contiguous train / validation / test blocks in time order."""
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ContractError(f"need three positive fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ContractError(f"fractions must sum to 1, got {sum(fractions)}")
    d = dataset.days
    n_train = int(d * fractions[0])
    n_valid = int(d * fractions[1])
    n_test = d - n_train - n_valid
    if min(n_train, n_valid, n_test) < 1:
        raise ContractError(f"{d} days is too few to split as {fractions}")
    out = []
    lo = 0
    for n in (n_train, n_valid, n_test):
        out.append(
            LoadDataset(
                dataset.x[lo : lo + n],
                dataset.y[lo : lo + n],
                dataset.feature_names,
                dataset.dates[lo : lo + n],
            )
        )
        lo += n
    return tuple(out)


STD_FLOOR = 1e-8


@dataclass
class Scaler:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float

    def transform_x(self, x):
        return (x - self.x_mean) / self.x_std

    def transform_y(self, y):
        return (y - self.y_mean) / self.y_std

    def inverse_y(self, y):
        return y * self.y_std + self.y_mean


def fit_scaler(train):
    """Per-feature standardization statistics from the training block only."""
    x_mean = train.x.mean(axis=(0, 1))
    x_std = np.maximum(train.x.std(axis=(0, 1)), STD_FLOOR)
    y_mean = float(train.y.mean())
    y_std = float(max(train.y.std(), STD_FLOOR))
    return Scaler(x_mean, x_std, y_mean, y_std)
