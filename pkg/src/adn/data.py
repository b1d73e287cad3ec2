"""Measurement tables, windowed instances, masked batches.

The pipeline is: a raw location x time table (``RawSeries``) is cut into
moving windows (``Instance``), optionally z-scored with train-split
statistics, and packed into padded ``MaskedBatch`` tensors for the model.
A synthetic ground-truth-diffusion generator provides desk-scale data with
known structure.

Conventions: an instance covers ``t_total = t_src + t_tgt`` instants. The
first ``t_src`` instants (the reference instant is the last of them) are
sources; the remaining ``t_tgt`` are prediction targets. Missing or padded
events carry measurement 0 and a False validity flag.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .util import seeded_rng

SECONDS_PER_DAY = 86400


@dataclass(frozen=True)
class CalendarSpec:
    """Periodicity descriptors attached to instants."""

    days_per_week: int = 7
    slots_per_day: int = 288
    slot_minutes: int = 5

    def __post_init__(self):
        if self.slots_per_day * self.slot_minutes != 1440:
            raise ConfigError(
                f"slots_per_day * slot_minutes must cover one day: "
                f"{self.slots_per_day} * {self.slot_minutes} != 1440"
            )

    def ids_for(self, timestamps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(day-of-week ids, slot-of-day ids) for an array of datetime64 instants."""
        ts = timestamps.astype("datetime64[s]")
        days = ts.astype("datetime64[D]")
        # the datetime64 epoch 1970-01-01 was a Thursday; Monday = 0
        day_ids = (days.astype(np.int64) + 3) % self.days_per_week
        minutes = (ts - days).astype("timedelta64[m]").astype(np.int64)
        slot_ids = minutes // self.slot_minutes
        return day_ids.astype(np.int64), slot_ids.astype(np.int64)


@dataclass
class RawSeries:
    """A dense measurement table: one row per instant, one column per location."""

    values: np.ndarray            # ⟨num_instants, num_locations⟩ float64
    timestamps: np.ndarray        # ⟨num_instants⟩ datetime64[s], fixed spacing
    location_ids: list[str]
    valid: np.ndarray             # ⟨num_instants, num_locations⟩ bool
    missing_sentinel: float | None = None

    def __post_init__(self):
        if self.values.ndim != 2:
            raise DataError(f"values must be 2-d, got shape {self.values.shape}")
        n, m = self.values.shape
        if len(self.timestamps) != n:
            raise DataError(f"{len(self.timestamps)} timestamps for {n} rows")
        if len(self.location_ids) != m:
            raise DataError(f"{len(self.location_ids)} location ids for {m} columns")
        if len(set(self.location_ids)) != m:
            seen = set()
            for i, loc in enumerate(self.location_ids):
                if loc in seen:
                    raise DataError(f"duplicate location id {loc!r} at column {i}")
                seen.add(loc)
        if n >= 2:
            steps = np.diff(self.timestamps.astype("datetime64[s]").astype(np.int64))
            if (steps <= 0).any():
                row = int(np.argmax(steps <= 0)) + 1
                raise DataError(f"timestamps not strictly increasing at row {row}")
            if (steps != steps[0]).any():
                row = int(np.argmax(steps != steps[0])) + 1
                raise DataError(f"nonuniform timestamp spacing at row {row}")

    @property
    def num_instants(self) -> int:
        return self.values.shape[0]

    @property
    def num_locations(self) -> int:
        return self.values.shape[1]

    def slice_instants(self, start: int, stop: int) -> "RawSeries":
        return RawSeries(
            values=self.values[start:stop],
            timestamps=self.timestamps[start:stop],
            location_ids=list(self.location_ids),
            valid=self.valid[start:stop],
            missing_sentinel=self.missing_sentinel,
        )


@dataclass(frozen=True)
class Instance:
    """One windowed problem instance.

    ``location_index`` holds indices into the dataset's location registry,
    not raw id strings, so instances stay cheap to slice and batch.
    """

    measurements: np.ndarray      # ⟨N, t_total, P⟩ float64, masked cells are 0
    valid: np.ndarray             # ⟨N, t_total⟩ bool
    location_index: np.ndarray    # ⟨N⟩ int64
    day_ids: np.ndarray           # ⟨t_total⟩ int64
    slot_ids: np.ndarray          # ⟨t_total⟩ int64
    t_src: int
    ref_ts: np.datetime64         # timestamp of the reference instant (last source)

    @property
    def num_locations(self) -> int:
        return self.measurements.shape[0]

    @property
    def t_total(self) -> int:
        return self.measurements.shape[1]

    @property
    def t_tgt(self) -> int:
        return self.t_total - self.t_src

    @property
    def num_features(self) -> int:
        return self.measurements.shape[2]

    def take_locations(self, rows: np.ndarray) -> "Instance":
        rows = np.asarray(rows, dtype=np.int64)
        return replace(
            self,
            measurements=self.measurements[rows],
            valid=self.valid[rows],
            location_index=self.location_index[rows],
        )


@dataclass(frozen=True)
class MaskedBatch:
    """Padded model input ⟨B, N, t_total, P⟩ with a validity mask.

    ``loc_rows`` are embedding-table rows: registry index + 1, with 0 reserved
    for padding. Padded locations are fully masked.
    """

    measurements: np.ndarray      # ⟨B, N, t_total, P⟩
    valid: np.ndarray             # ⟨B, N, t_total⟩ bool
    loc_rows: np.ndarray          # ⟨B, N⟩ int64, 0 = padding
    day_ids: np.ndarray           # ⟨B, t_total⟩ int64
    slot_ids: np.ndarray          # ⟨B, t_total⟩ int64
    t_src: int

    @property
    def batch_size(self) -> int:
        return self.measurements.shape[0]

    @property
    def num_locations(self) -> int:
        return self.measurements.shape[1]

    @property
    def t_total(self) -> int:
        return self.measurements.shape[2]

    @property
    def t_tgt(self) -> int:
        return self.t_total - self.t_src

    @property
    def num_features(self) -> int:
        return self.measurements.shape[3]

    @property
    def loc_valid(self) -> np.ndarray:
        """⟨B, N⟩ bool: locations that are real (non-padding) in each instance."""
        return self.loc_rows != 0

    @property
    def target_values(self) -> np.ndarray:
        return self.measurements[:, :, self.t_src:, :]

    @property
    def target_valid(self) -> np.ndarray:
        return self.valid[:, :, self.t_src:]


# ---------------------------------------------------------------------------
# loading and saving raw series

def load_raw(path, format: str = "csv", missing_sentinel: float | None = None) -> RawSeries:
    """Parse a raw series file.

    csv: header row ``timestamp,<loc>,...``; first column ISO-8601 instants.
    binary: little-endian float64 row-major matrix with a ``<path>.json``
    sidecar describing shape, locations, start instant and spacing.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    if format == "csv":
        raw = _load_csv(path)
    elif format == "binary":
        raw = _load_binary(path)
    else:
        raise ConfigError(f"unknown raw format {format!r}")
    sentinel = missing_sentinel if missing_sentinel is not None else raw.missing_sentinel
    if sentinel is not None:
        if np.isnan(sentinel):
            missing = np.isnan(raw.values)
        else:
            missing = raw.values == sentinel
        raw.valid &= ~missing
        raw.missing_sentinel = float(sentinel)
    return raw


def _load_csv(path: Path) -> RawSeries:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if len(header) < 2:
            raise DataError(f"{path}: header must name a timestamp column and at least one location")
        location_ids = [h.strip() for h in header[1:]]
        width = len(header)
        times: list[np.datetime64] = []
        rows: list[list[float]] = []
        for i, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != width:
                raise DataError(f"{path}: row {i} has {len(row)} fields, expected {width}")
            try:
                times.append(np.datetime64(row[0].strip(), "s"))
            except ValueError as e:
                raise DataError(f"{path}: row {i}: bad timestamp {row[0]!r}") from e
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError as e:
                raise DataError(f"{path}: row {i}: non-numeric measurement") from e
    if not rows:
        raise DataError(f"{path}: no data rows")
    values = np.asarray(rows, dtype=np.float64)
    return RawSeries(
        values=values,
        timestamps=np.asarray(times, dtype="datetime64[s]"),
        location_ids=location_ids,
        valid=np.ones(values.shape, dtype=bool),
    )


def _load_binary(path: Path) -> RawSeries:
    sidecar = Path(str(path) + ".json")
    if not sidecar.exists():
        raise DataError(f"missing sidecar {sidecar}")
    meta = json.loads(sidecar.read_text())
    n, m = int(meta["num_instants"]), int(meta["num_locations"])
    values = np.fromfile(path, dtype="<f8")
    if values.size != n * m:
        raise DataError(f"{path}: expected {n * m} values, found {values.size}")
    values = values.reshape(n, m)
    start = np.datetime64(meta["start_timestamp"], "s")
    step = np.timedelta64(int(meta["slot_minutes"]) * 60, "s")
    timestamps = start + step * np.arange(n)
    sentinel = meta.get("missing_sentinel")
    return RawSeries(
        values=values,
        timestamps=timestamps.astype("datetime64[s]"),
        location_ids=[str(s) for s in meta["location_ids"]],
        valid=np.ones((n, m), dtype=bool),
        missing_sentinel=None if sentinel is None else float(sentinel),
    )


def save_raw(raw: RawSeries, path, format: str = "csv") -> None:
    """Write a series back out in one of the interchange formats."""
    path = Path(path)
    if format == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["timestamp"] + list(raw.location_ids))
            for i in range(raw.num_instants):
                stamp = np.datetime_as_string(raw.timestamps[i].astype("datetime64[s]"))
                writer.writerow([stamp] + [repr(float(v)) for v in raw.values[i]])
    elif format == "binary":
        raw.values.astype("<f8").tofile(path)
        step = raw.timestamps[1] - raw.timestamps[0] if raw.num_instants > 1 else np.timedelta64(300, "s")
        meta = {
            "num_instants": raw.num_instants,
            "num_locations": raw.num_locations,
            "location_ids": list(raw.location_ids),
            "start_timestamp": str(np.datetime_as_string(raw.timestamps[0].astype("datetime64[s]"))),
            "slot_minutes": int(step.astype("timedelta64[s]").astype(np.int64) // 60),
            "missing_sentinel": raw.missing_sentinel,
        }
        Path(str(path) + ".json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    else:
        raise ConfigError(f"unknown raw format {format!r}")


# ---------------------------------------------------------------------------
# windowing, splitting, batching

def make_windows(
    raw: RawSeries,
    window: int = 24,
    stride: int = 12,
    reference_offset: int = 12,
    calendar: CalendarSpec | None = None,
) -> list[Instance]:
    """Cut the series into moving windows of ``window`` instants.

    Each window becomes one Instance with t_src = reference_offset source
    instants and window - reference_offset targets. Missing cells are masked
    and zeroed. The defaults give 2-hour windows with one-hour overlap on a
    5-minute grid.
    """
    calendar = calendar or CalendarSpec()
    if window > raw.num_instants:
        raise ConfigError(f"window {window} exceeds series length {raw.num_instants}")
    if not 0 < reference_offset < window:
        raise ConfigError(f"reference_offset must lie strictly inside the window, got {reference_offset}")
    if stride <= 0:
        raise ConfigError(f"stride must be positive, got {stride}")
    day_all, slot_all = calendar.ids_for(raw.timestamps)
    instances = []
    n_loc = raw.num_locations
    loc_index = np.arange(n_loc, dtype=np.int64)
    for start in range(0, raw.num_instants - window + 1, stride):
        stop = start + window
        meas = np.ascontiguousarray(raw.values[start:stop].T)[:, :, None]  # ⟨N, window, 1⟩
        valid = np.ascontiguousarray(raw.valid[start:stop].T)
        meas = np.where(valid[:, :, None], meas, 0.0)
        instances.append(
            Instance(
                measurements=meas,
                valid=valid,
                location_index=loc_index.copy(),
                day_ids=day_all[start:stop].copy(),
                slot_ids=slot_all[start:stop].copy(),
                t_src=reference_offset,
                ref_ts=raw.timestamps[start + reference_offset - 1],
            )
        )
    return instances


def chronological_split(
    instances: list[Instance],
    train_frac: float,
    val_frac: float,
    test_frac: float,
) -> tuple[list[Instance], list[Instance], list[Instance]]:
    """Dispatch instances by reference instant: earliest to train, then val, then test."""
    if abs(train_frac + val_frac + test_frac - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {train_frac}/{val_frac}/{test_frac}")
    ordered = sorted(instances, key=lambda inst: inst.ref_ts)
    n = len(ordered)
    n_train = int(round(train_frac * n))
    n_val = int(round(val_frac * n))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) <= 0:
        raise ConfigError(f"split of {n} instances leaves an empty part: {n_train}/{n_val}/{n_test}")
    return ordered[:n_train], ordered[n_train:n_train + n_val], ordered[n_train + n_val:]


def batch(instances: list[Instance], batch_size: int, dtype=np.float32) -> list[MaskedBatch]:
    """Pack instances into padded batches, preserving order.

    The spatial axis is padded to the largest N in each group; padded
    locations get embedding row 0 and an all-False mask.
    """
    if batch_size <= 0:
        raise ConfigError(f"batch_size must be positive, got {batch_size}")
    out = []
    for lo in range(0, len(instances), batch_size):
        group = instances[lo:lo + batch_size]
        t_src = group[0].t_src
        t_total = group[0].t_total
        n_feat = group[0].num_features
        for inst in group:
            if inst.t_src != t_src or inst.t_total != t_total or inst.num_features != n_feat:
                raise ConfigError("instances in a batch must share window shape")
        b = len(group)
        n_max = max(inst.num_locations for inst in group)
        meas = np.zeros((b, n_max, t_total, n_feat), dtype=dtype)
        valid = np.zeros((b, n_max, t_total), dtype=bool)
        loc_rows = np.zeros((b, n_max), dtype=np.int64)
        day_ids = np.zeros((b, t_total), dtype=np.int64)
        slot_ids = np.zeros((b, t_total), dtype=np.int64)
        for i, inst in enumerate(group):
            n = inst.num_locations
            meas[i, :n] = inst.measurements.astype(dtype)
            valid[i, :n] = inst.valid
            loc_rows[i, :n] = inst.location_index + 1
            day_ids[i] = inst.day_ids
            slot_ids[i] = inst.slot_ids
        out.append(MaskedBatch(meas, valid, loc_rows, day_ids, slot_ids, t_src))
    return out


# ---------------------------------------------------------------------------
# standardization

@dataclass
class Standardizer:
    """Per-feature z-score transform fitted on unmasked training cells."""

    mean: np.ndarray   # ⟨P⟩ float64
    std: np.ndarray    # ⟨P⟩ float64

    @classmethod
    def fit(cls, train_instances: list[Instance]) -> "Standardizer":
        n_feat = train_instances[0].num_features
        mean = np.zeros(n_feat)
        std = np.ones(n_feat)
        for p in range(n_feat):
            cells = np.concatenate(
                [inst.measurements[:, :, p][inst.valid] for inst in train_instances]
            )
            if cells.size == 0:
                warnings.warn(f"feature {p}: no valid training cells, leaving unscaled")
                continue
            m = cells.mean()
            s = cells.std()
            if s == 0.0:
                warnings.warn(f"feature {p}: zero variance in training data, leaving unscaled")
                continue
            mean[p] = m
            std[p] = s
        return cls(mean=mean, std=std)

    def transform(self, instances: list[Instance]) -> list[Instance]:
        out = []
        for inst in instances:
            z = (inst.measurements - self.mean) / self.std
            z = np.where(inst.valid[:, :, None], z, 0.0)
            out.append(replace(inst, measurements=z))
        return out

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return values.astype(np.float64) * self.std + self.mean


def standardize(
    train_instances: list[Instance],
    apply_to: list[Instance],
) -> tuple[list[Instance], np.ndarray, np.ndarray]:
    """Fit on the train split, transform ``apply_to``; returns (instances, mean, std)."""
    scaler = Standardizer.fit(train_instances)
    return scaler.transform(apply_to), scaler.mean, scaler.std


# ---------------------------------------------------------------------------
# prepared dataset container

@dataclass
class DatasetSplits:
    """Windowed, split and (optionally) standardized data ready for training."""

    train: list[Instance]
    val: list[Instance]
    test: list[Instance]
    locations: list[str]
    calendar: CalendarSpec
    standardizer: Standardizer | None = None
    window: dict = field(default_factory=dict)

    @property
    def t_src(self) -> int:
        return self.train[0].t_src


def prepare_dataset(
    raw: RawSeries,
    window: int = 24,
    stride: int = 12,
    reference_offset: int = 12,
    fractions: tuple[float, float, float] = (0.7, 0.1, 0.2),
    standardize_values: bool = True,
    calendar: CalendarSpec | None = None,
) -> DatasetSplits:
    """Window, split and standardize a raw series in one step."""
    calendar = calendar or CalendarSpec()
    instances = make_windows(raw, window, stride, reference_offset, calendar)
    train, val, test = chronological_split(instances, *fractions)
    scaler = None
    if standardize_values:
        scaler = Standardizer.fit(train)
        train = scaler.transform(train)
        val = scaler.transform(val)
        test = scaler.transform(test)
    return DatasetSplits(
        train=train,
        val=val,
        test=test,
        locations=list(raw.location_ids),
        calendar=calendar,
        standardizer=scaler,
        window={"window": window, "stride": stride, "reference_offset": reference_offset},
    )


# ---------------------------------------------------------------------------
# synthetic ground-truth-diffusion data

def synth_diffusion(
    num_locations: int,
    num_days: int,
    seed: int,
    noise_std: float = 0.05,
    diffusion_weights: np.ndarray | None = None,
    calendar: CalendarSpec | None = None,
    persistence: float = 0.98,
    start: str = "2024-01-01",
) -> RawSeries:
    """Generate a series whose deviations from daily profiles diffuse across locations.

    Each location n follows a smooth daily profile p_n. The state evolves as

        x[t+1] = W @ (persistence * (x[t] - p[t]) + p[t+1]) + noise

    so with W = identity and zero noise every location repeats its profile
    exactly, while an averaging W pulls all locations toward the mean profile.
    The noise term makes deviations temporally and spatially correlated,
    which a context-aware forecaster can exploit but a periodic-mean
    predictor cannot. Deterministic given the seed.
    """
    calendar = calendar or CalendarSpec()
    if num_locations <= 0 or num_days <= 0:
        raise ConfigError("num_locations and num_days must be positive")
    w = _default_weights(num_locations) if diffusion_weights is None else np.asarray(diffusion_weights, dtype=np.float64)
    if w.shape != (num_locations, num_locations):
        raise ConfigError(f"diffusion_weights shape {w.shape} does not match {num_locations} locations")
    if (w < 0).any() or np.abs(w.sum(axis=1) - 1.0).max() > 1e-9:
        raise ConfigError("diffusion_weights must be row-stochastic and nonnegative")
    if not 0.0 < persistence <= 1.0:
        raise ConfigError(f"persistence must lie in (0, 1], got {persistence}")

    rng = seeded_rng(seed, "synth")
    slots = calendar.slots_per_day
    s = np.arange(slots)
    profiles = np.empty((slots, num_locations))
    for n in range(num_locations):
        base = rng.uniform(2.0, 4.0)
        prof = np.full(slots, base)
        for h in (1, 2, 3):
            amp = rng.uniform(0.4, 0.8) / h
            phase = rng.uniform(0.0, 2.0 * np.pi)
            prof = prof + amp * np.sin(2.0 * np.pi * h * s / slots + phase)
        profiles[:, n] = prof

    total = num_days * slots
    values = np.empty((total, num_locations))
    values[0] = profiles[0]
    for t in range(total - 1):
        p_now = profiles[t % slots]
        p_next = profiles[(t + 1) % slots]
        drift = persistence * (values[t] - p_now) + p_next
        values[t + 1] = w @ drift
        if noise_std > 0:
            values[t + 1] += rng.normal(0.0, noise_std, num_locations)

    step = np.timedelta64(calendar.slot_minutes * 60, "s")
    timestamps = np.datetime64(start, "s") + step * np.arange(total)
    ids = [f"S{n:02d}" for n in range(num_locations)]
    return RawSeries(
        values=values,
        timestamps=timestamps.astype("datetime64[s]"),
        location_ids=ids,
        valid=np.ones((total, num_locations), dtype=bool),
    )


def _default_weights(n: int) -> np.ndarray:
    """Ring diffusion: each location keeps 0.7 of itself, shares 0.15 per neighbour."""
    if n == 1:
        return np.ones((1, 1))
    w = np.eye(n) * 0.7
    for i in range(n):
        w[i, (i - 1) % n] += 0.15
        w[i, (i + 1) % n] += 0.15
    return w
