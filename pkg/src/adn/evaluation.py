"""Autoregressive evaluation, masked metrics, and the historical-average comparator.

Metrics are computed in original measurement units over valid target events
only. Per-step arrays are always produced; the 15/30/60-minute summary picks
the single step at that horizon (steps 3/6/12 on a 5-minute grid).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import CalendarSpec, Instance, RawSeries, Standardizer, batch as make_batches
from .errors import EvaluationError
from .model import ModelParams, forward

MAPE_FLOOR = 1e-3  # |target| below this is excluded from MAPE
HORIZON_STEPS = (3, 6, 12)


def masked_mae(pred: np.ndarray, target: np.ndarray, valid: np.ndarray) -> float:
    if int(valid.sum()) == 0:
        raise EvaluationError("metric over zero valid events")
    err = np.abs(pred - target)[valid]
    return float(err.mean())


def masked_rmse(pred: np.ndarray, target: np.ndarray, valid: np.ndarray) -> float:
    if int(valid.sum()) == 0:
        raise EvaluationError("metric over zero valid events")
    err = (pred - target)[valid]
    return float(np.sqrt(np.mean(err * err)))


def masked_mape(pred: np.ndarray, target: np.ndarray, valid: np.ndarray) -> float:
    """Mean |error / target| * 100 over valid events with |target| above the floor."""
    usable = valid & (np.abs(target) > MAPE_FLOOR)
    if int(usable.sum()) == 0:
        raise EvaluationError("MAPE over zero usable events")
    ratio = np.abs((pred - target) / target)[usable]
    return float(ratio.mean() * 100.0)


@dataclass
class MetricsReport:
    """Per-step and horizon-aggregated masked errors, original units."""

    mae_per_step: np.ndarray
    rmse_per_step: np.ndarray
    mape_per_step: np.ndarray
    counts_per_step: np.ndarray
    horizons: dict[int, dict[str, float]]   # horizon minutes -> {mae, rmse, mape}
    mae: float
    rmse: float
    mape: float
    num_events: int
    slot_minutes: int = 5
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "mae": self.mae,
                "rmse": self.rmse,
                "mape": self.mape,
                "num_events": self.num_events,
                "slot_minutes": self.slot_minutes,
                "per_step": {
                    "mae": self.mae_per_step.tolist(),
                    "rmse": self.rmse_per_step.tolist(),
                    "mape": self.mape_per_step.tolist(),
                    "counts": self.counts_per_step.tolist(),
                },
                "horizons": {str(k): v for k, v in self.horizons.items()},
                "meta": self.meta,
            },
            indent=1,
            sort_keys=True,
        )

    def table(self) -> str:
        lines = [f"{'horizon':>10} {'MAE':>8} {'RMSE':>8} {'MAPE%':>8}"]
        for minutes in sorted(self.horizons):
            h = self.horizons[minutes]
            lines.append(
                f"{minutes:>7} min {h['mae']:>8.3f} {h['rmse']:>8.3f} {h['mape']:>8.2f}"
            )
        lines.append(f"{'overall':>10} {self.mae:>8.3f} {self.rmse:>8.3f} {self.mape:>8.2f}")
        return "\n".join(lines)


class _MetricAccumulator:
    """Streams (pred, target, valid) triples and reduces to a MetricsReport."""

    def __init__(self, t_tgt: int):
        self.t_tgt = t_tgt
        self.abs_sum = np.zeros(t_tgt)
        self.sq_sum = np.zeros(t_tgt)
        self.count = np.zeros(t_tgt, dtype=np.int64)
        self.ape_sum = np.zeros(t_tgt)
        self.ape_count = np.zeros(t_tgt, dtype=np.int64)

    def add(self, pred: np.ndarray, target: np.ndarray, valid: np.ndarray) -> None:
        # pred/target ⟨N, T', P⟩, valid ⟨N, T'⟩
        err = pred.astype(np.float64) - target.astype(np.float64)
        v = valid[:, :, None] & np.ones(pred.shape[-1], dtype=bool)
        self.abs_sum += np.where(v, np.abs(err), 0.0).sum(axis=(0, 2))
        self.sq_sum += np.where(v, err * err, 0.0).sum(axis=(0, 2))
        self.count += v.sum(axis=(0, 2))
        usable = v & (np.abs(target) > MAPE_FLOOR)
        safe = np.where(usable, target, 1.0)
        self.ape_sum += np.where(usable, np.abs(err / safe), 0.0).sum(axis=(0, 2))
        self.ape_count += usable.sum(axis=(0, 2))

    def report(self, slot_minutes: int, meta: dict | None = None) -> MetricsReport:
        if self.count.sum() == 0:
            raise EvaluationError("evaluation over zero valid events")
        with np.errstate(invalid="ignore", divide="ignore"):
            mae = self.abs_sum / self.count
            rmse = np.sqrt(self.sq_sum / self.count)
            mape = 100.0 * self.ape_sum / self.ape_count
        horizons = {}
        for step in HORIZON_STEPS:
            if step <= self.t_tgt and self.count[step - 1] > 0:
                horizons[step * slot_minutes] = {
                    "mae": float(mae[step - 1]),
                    "rmse": float(rmse[step - 1]),
                    "mape": float(mape[step - 1]),
                }
        overall_mape = (100.0 * self.ape_sum.sum() / self.ape_count.sum()
                        if self.ape_count.sum() > 0 else float("nan"))
        return MetricsReport(
            mae_per_step=mae,
            rmse_per_step=rmse,
            mape_per_step=mape,
            counts_per_step=self.count.copy(),
            horizons=horizons,
            mae=float(self.abs_sum.sum() / self.count.sum()),
            rmse=float(np.sqrt(self.sq_sum.sum() / self.count.sum())),
            mape=float(overall_mape),
            num_events=int(self.count.sum()),
            slot_minutes=slot_minutes,
            meta=meta or {},
        )


def predict(params: ModelParams, mb, standardizer: Standardizer | None = None) -> np.ndarray:
    """Autoregressive rollout over one batch, inverse-standardized to original units."""
    out = forward(mb, params, params.config, mode="autoregressive").data
    if standardizer is not None:
        return standardizer.inverse(out)
    return out.astype(np.float64)


def evaluate_model(
    params: ModelParams,
    instances: list[Instance],
    batch_size: int,
    standardizer: Standardizer | None = None,
    meta: dict | None = None,
) -> MetricsReport:
    """Autoregressive test metrics for the model over a list of instances."""
    if not instances:
        raise EvaluationError("no instances to evaluate")
    t_src = instances[0].t_src
    acc = _MetricAccumulator(instances[0].t_tgt)
    for lo in range(0, len(instances), batch_size):
        group = instances[lo:lo + batch_size]
        mb = make_batches(group, batch_size)[0]
        preds = predict(params, mb, standardizer)
        for i, inst in enumerate(group):
            n = inst.num_locations
            target = inst.measurements[:, t_src:, :]
            if standardizer is not None:
                target = standardizer.inverse(target)
            acc.add(preds[i, :n], target, inst.valid[:, t_src:])
    slot_minutes = params.calendar.slot_minutes
    return acc.report(slot_minutes, meta)


# ---------------------------------------------------------------------------
# historical average baseline

class HistoricalAverage:
    """Predicts the train-set mean per (location, day-of-week, slot) cell.

    Ignores the source window entirely, so its prediction for an instant is
    the same at every horizon.
    """

    def __init__(self, table: np.ndarray, calendar: CalendarSpec):
        self.table = table          # ⟨num_locations, days, slots⟩
        self.calendar = calendar

    def predict_instance(self, inst: Instance) -> np.ndarray:
        t = inst.t_src
        day = inst.day_ids[t:]
        slot = inst.slot_ids[t:]
        out = self.table[inst.location_index[:, None], day[None, :], slot[None, :]]
        return out[:, :, None]      # ⟨N, T', 1⟩


def historical_average(train_raw: RawSeries, calendar: CalendarSpec) -> HistoricalAverage:
    """Fit the comparator on (the training portion of) a raw series.

    Cells never observed fall back to the location mean, with a warning;
    locations with no data at all fall back to the global mean.
    """
    day, slot = calendar.ids_for(train_raw.timestamps)
    n = train_raw.num_locations
    sums = np.zeros((n, calendar.days_per_week, calendar.slots_per_day))
    counts = np.zeros_like(sums)
    values = np.where(train_raw.valid, train_raw.values, 0.0)
    for loc in range(n):
        np.add.at(sums[loc], (day, slot), values[:, loc])
        np.add.at(counts[loc], (day, slot), train_raw.valid[:, loc].astype(np.float64))
    global_mean = (values.sum() / train_raw.valid.sum()) if train_raw.valid.any() else 0.0
    loc_counts = counts.sum(axis=(1, 2))
    loc_means = np.where(loc_counts > 0, sums.sum(axis=(1, 2)) / np.maximum(loc_counts, 1.0), global_mean)
    empty = counts == 0
    if empty.any():
        warnings.warn(
            f"historical average: {int(empty.sum())} empty (day, slot) cells, using location means"
        )
    with np.errstate(invalid="ignore", divide="ignore"):
        table = np.where(empty, loc_means[:, None, None], sums / np.maximum(counts, 1.0))
    return HistoricalAverage(table, calendar)


def evaluate_ha(
    ha: HistoricalAverage,
    instances: list[Instance],
    standardizer: Standardizer | None = None,
    meta: dict | None = None,
) -> MetricsReport:
    """Metrics for the historical-average comparator over (standardized) instances."""
    if not instances:
        raise EvaluationError("no instances to evaluate")
    t_src = instances[0].t_src
    acc = _MetricAccumulator(instances[0].t_tgt)
    for inst in instances:
        target = inst.measurements[:, t_src:, :]
        if standardizer is not None:
            target = standardizer.inverse(target)
        acc.add(ha.predict_instance(inst), target, inst.valid[:, t_src:])
    return acc.report(ha.calendar.slot_minutes, meta)
