"""The four experiment protocols: data scarcity, missing locations,
spatial partitioning, and few-shot domain adaptation.

Each protocol is a seeded, reproducible procedure over a prepared dataset;
``run_experiment`` sweeps a knob and emits one metrics row per point and
horizon. Validation and test splits are never altered by a protocol.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import DatasetSplits, Instance
from .errors import ConfigError
from .evaluation import MetricsReport, evaluate_model
from .model import PARAM_GROUPS, ModelConfig, ModelParams
from .tensor import Tensor
from .training import TrainConfig, train
from .util import derive_seed, seeded_rng

RESULT_FIELDS = ("kind", "knob", "seed", "horizon_min", "mae", "rmse", "mape", "train_time_s")


@dataclass
class ExperimentSpec:
    kind: str                       # scarcity | missing | partition | adapt
    knobs: tuple
    seed: int
    data: DatasetSplits
    model_config: ModelConfig
    train_config: TrainConfig
    source_params: ModelParams | None = None   # adapt only
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("scarcity", "missing", "partition", "adapt"):
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        for knob in self.knobs:
            if self.kind == "scarcity" and not 0.0 < knob <= 1.0:
                raise ConfigError(f"scarcity fraction must lie in (0, 1], got {knob}")
            if self.kind == "missing" and not 0.0 <= knob < 1.0:
                raise ConfigError(f"missing fraction must lie in [0, 1), got {knob}")
            if self.kind == "partition" and (int(knob) != knob or knob < 1):
                raise ConfigError(f"partition count must be a positive integer, got {knob}")
            if self.kind == "adapt" and (int(knob) != knob or knob < 1):
                raise ConfigError(f"adaptation days must be a positive integer, got {knob}")
        if self.kind == "adapt" and self.source_params is None:
            raise ConfigError("adapt experiments need source_params")


def scarcity_subset(train_instances: list[Instance], x: float) -> list[Instance]:
    """Keep the x-fraction of training instances with the earliest reference instants."""
    if not 0.0 < x <= 1.0:
        raise ConfigError(f"scarcity fraction must lie in (0, 1], got {x}")
    ordered = sorted(train_instances, key=lambda inst: inst.ref_ts)
    keep = int(round(x * len(ordered)))
    if keep == 0:
        raise ConfigError(f"scarcity fraction {x} keeps no instances out of {len(ordered)}")
    return ordered[:keep]


def drop_locations(inst: Instance, x: float, rng: np.random.Generator) -> Instance:
    """Delete a uniform random ceil(x*N) of the instance's locations.

    The spatial axis shrinks; at least one location always survives.
    """
    if not 0.0 <= x < 1.0:
        raise ConfigError(f"drop fraction must lie in [0, 1), got {x}")
    n = inst.num_locations
    n_drop = min(math.ceil(x * n), n - 1)
    if n_drop == 0:
        return inst
    drops = rng.choice(n, size=n_drop, replace=False)
    keep = np.setdiff1d(np.arange(n), drops)
    return inst.take_locations(keep)


def random_partition(location_ids, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Uniformly random partition of the ids into k near-equal disjoint cells."""
    ids = np.asarray(location_ids)
    if k < 1 or k > len(ids):
        raise ConfigError(f"cannot partition {len(ids)} locations into {k} cells")
    perm = rng.permutation(len(ids))
    return [ids[cell] for cell in np.array_split(perm, k)]


def partition_transform(k: int, seed: int):
    """Per-epoch training transform: each full instance becomes k partial ones.

    Partitions are redrawn every epoch; within an epoch every location of
    every instance lands in exactly one partial instance.
    """

    def transform(instances: list[Instance], epoch: int) -> list[Instance]:
        rng = seeded_rng(seed, "partition", epoch)
        out = []
        for inst in instances:
            rows = np.arange(inst.num_locations)
            for cell in random_partition(rows, k, rng):
                out.append(inst.take_locations(np.sort(cell)))
        return out

    return transform


def apply_missing(train_instances: list[Instance], x: float, seed: int) -> list[Instance]:
    """The missing-data protocol: independent random location removal per instance."""
    rng = seeded_rng(seed, "missing")
    return [drop_locations(inst, x, rng) for inst in train_instances]


def adapt_domain(
    source_params: ModelParams,
    target: DatasetSplits,
    days: int,
    train_config: TrainConfig,
) -> tuple[ModelParams, list]:
    """Few-shot transfer to a disjoint location set.

    A fresh location-embedding table is learned from scratch on target
    instances spanning the first ``days`` days of the target train split;
    every other parameter group stays frozen at the source values.
    """
    overlap = set(source_params.locations) & set(target.locations)
    if overlap:
        raise ValueError(f"source and target domains share locations: {sorted(overlap)[:5]}")
    if days < 1:
        raise ConfigError(f"adaptation days must be >= 1, got {days}")

    config = source_params.config
    rng = seeded_rng(train_config.seed, "adapt-init")
    loc = rng.normal(0.0, 1.0 / math.sqrt(config.d_model),
                     (len(target.locations) + 1, config.d_model))
    loc[0] = 0.0
    tensors = {}
    for name, t in source_params.tensors.items():
        if name == "loc_embed":
            tensors[name] = Tensor(loc.astype(t.dtype), requires_grad=True)
        else:
            tensors[name] = Tensor(t.data.copy(), requires_grad=True)
    params = ModelParams(tensors, config, source_params.calendar, target.locations)

    start = min(inst.ref_ts for inst in target.train)
    limit = start + np.timedelta64(days * 86400, "s")
    subset = [inst for inst in target.train if inst.ref_ts < limit]
    if not subset:
        raise ConfigError(f"no target instances within the first {days} days")

    frozen = frozenset(g for g in PARAM_GROUPS if g != "loc_embed")
    cfg = replace(train_config, freeze_groups=frozen)
    return train(params, subset, target.val, cfg, standardizer=target.standardizer)


def run_experiment(spec: ExperimentSpec, out_csv=None) -> list[dict]:
    """Sweep the knob, train and evaluate per point, emit one row per horizon."""
    rows = []
    for knob in spec.knobs:
        point_seed = derive_seed(spec.seed, spec.kind, knob)
        t0 = time.perf_counter()
        report = _run_point(spec, knob, point_seed)
        elapsed = time.perf_counter() - t0
        for minutes in sorted(report.horizons):
            h = report.horizons[minutes]
            rows.append({
                "kind": spec.kind,
                "knob": knob,
                "seed": point_seed,
                "horizon_min": minutes,
                "mae": h["mae"],
                "rmse": h["rmse"],
                "mape": h["mape"],
                "train_time_s": round(elapsed, 3),
            })
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=RESULT_FIELDS)
            writer.writeheader()
            writer.writerows(rows)
    return rows


def _run_point(spec: ExperimentSpec, knob, point_seed: int) -> MetricsReport:
    data = spec.data
    tc = replace(spec.train_config, seed=point_seed)

    if spec.kind == "adapt":
        adapted, _ = adapt_domain(spec.source_params, data, int(knob), tc)
        return evaluate_model(adapted, data.test, tc.batch_size, data.standardizer)

    if spec.kind == "scarcity":
        train_insts = scarcity_subset(data.train, knob)
        transform = None
    elif spec.kind == "missing":
        train_insts = apply_missing(data.train, knob, point_seed)
        transform = None
    else:  # partition
        train_insts = data.train
        transform = partition_transform(int(knob), point_seed) if int(knob) > 1 else None

    init_rng = seeded_rng(point_seed, "init")
    params = ModelParams.create(spec.model_config, data.calendar, data.locations, init_rng)
    best, _ = train(params, train_insts, data.val, tc,
                    standardizer=data.standardizer, epoch_transform=transform)
    return evaluate_model(best, data.test, tc.batch_size, data.standardizer)
