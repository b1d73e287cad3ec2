"""Operator entry point: prepare, train, eval, experiment, export-embeddings.

Configuration is read from a flat ``key = value`` text file, with command-line
flags taking precedence, and every run directory receives the exact resolved
configuration used. Exit codes: 0 ok, 2 configuration error, 3 data error,
4 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    CalendarSpec,
    DatasetSplits,
    Instance,
    Standardizer,
    load_raw,
    prepare_dataset,
)
from .errors import ConfigError, DataError, DivergenceError
from .evaluation import evaluate_model
from .experiments import ExperimentSpec, run_experiment
from .model import ModelConfig, ModelParams
from .training import TrainConfig, train
from .util import seeded_rng

DEFAULT_KNOBS = {
    "scarcity": (0.01, 0.05, 0.1, 0.3, 0.5, 1.0),
    "missing": (0.0, 0.3, 0.6, 0.8, 0.95),
    "partition": (1, 2, 4),
    "adapt": (1, 2, 3, 7),
}


# ---------------------------------------------------------------------------
# flat config files

def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment."""
    out: dict[str, str] = {}
    for i, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{i}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_config_file(path, values: dict) -> None:
    lines = [f"{k} = {values[k]}" for k in sorted(values)]
    Path(path).write_text("\n".join(lines) + "\n")


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        return tuple(type(like[0])(v) for v in value.split(",")) if value else ()
    return value


def _apply_config(defaults, file_values: dict, overrides: dict):
    """Layer file values then explicit CLI overrides onto a dataclass instance."""
    merged = asdict(defaults)
    for key, raw in file_values.items():
        if key in merged:
            merged[key] = _coerce(raw, merged[key])
    for key, value in overrides.items():
        if value is not None and key in merged:
            merged[key] = value
    if "freeze_groups" in merged:
        merged["freeze_groups"] = frozenset(merged["freeze_groups"])
    return type(defaults)(**merged)


# ---------------------------------------------------------------------------
# instance store

def save_store(out_dir, splits: DatasetSplits, source: str, missing_sentinel) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digests = {}
    for name, insts in (("train", splits.train), ("val", splits.val), ("test", splits.test)):
        arrays = _stack_instances(insts)
        path = out / f"{name}.npz"
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)
        digests[name] = hashlib.sha256(path.read_bytes()).hexdigest()
    scaler = splits.standardizer
    manifest = {
        "version": __version__,
        "source": str(source),
        "missing_sentinel": missing_sentinel,
        "calendar": asdict(splits.calendar),
        "window": splits.window,
        "locations": splits.locations,
        "standardizer": None if scaler is None else {
            "mean": scaler.mean.tolist(),
            "std": scaler.std.tolist(),
        },
        "counts": {
            "train": len(splits.train),
            "val": len(splits.val),
            "test": len(splits.test),
        },
        "split_digests": digests,
    }
    (out / "store.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_store(store_dir) -> DatasetSplits:
    store = Path(store_dir)
    manifest_path = store / "store.json"
    if not manifest_path.exists():
        raise DataError(f"no instance store at {store}")
    manifest = json.loads(manifest_path.read_text())
    calendar = CalendarSpec(**manifest["calendar"])
    scaler = None
    if manifest["standardizer"] is not None:
        scaler = Standardizer(
            mean=np.asarray(manifest["standardizer"]["mean"]),
            std=np.asarray(manifest["standardizer"]["std"]),
        )
    splits = {}
    for name in ("train", "val", "test"):
        with np.load(store / f"{name}.npz") as z:
            splits[name] = _unstack_instances(z)
    return DatasetSplits(
        train=splits["train"],
        val=splits["val"],
        test=splits["test"],
        locations=list(manifest["locations"]),
        calendar=calendar,
        standardizer=scaler,
        window=manifest["window"],
    )


def _stack_instances(insts: list[Instance]) -> dict[str, np.ndarray]:
    return {
        "measurements": np.stack([i.measurements for i in insts]),
        "valid": np.stack([i.valid for i in insts]),
        "location_index": np.stack([i.location_index for i in insts]),
        "day_ids": np.stack([i.day_ids for i in insts]),
        "slot_ids": np.stack([i.slot_ids for i in insts]),
        "ref_ts": np.asarray([i.ref_ts.astype("datetime64[s]").astype(np.int64) for i in insts]),
        "t_src": np.asarray([insts[0].t_src]),
    }


def _unstack_instances(z) -> list[Instance]:
    t_src = int(z["t_src"][0])
    out = []
    for i in range(z["measurements"].shape[0]):
        out.append(Instance(
            measurements=z["measurements"][i],
            valid=z["valid"][i],
            location_index=z["location_index"][i],
            day_ids=z["day_ids"][i],
            slot_ids=z["slot_ids"][i],
            t_src=t_src,
            ref_ts=np.datetime64(int(z["ref_ts"][i]), "s"),
        ))
    return out


# ---------------------------------------------------------------------------
# commands

def cmd_prepare(args) -> int:
    raw = load_raw(args.data, format=args.format, missing_sentinel=args.missing_sentinel)
    calendar = CalendarSpec(slots_per_day=1440 // args.slot_minutes, slot_minutes=args.slot_minutes)
    fractions = tuple(float(f) for f in args.splits.split(","))
    if len(fractions) != 3:
        raise ConfigError(f"--splits needs three comma-separated fractions, got {args.splits!r}")
    splits = prepare_dataset(
        raw,
        window=args.window,
        stride=args.stride,
        reference_offset=args.ref_offset,
        fractions=fractions,
        standardize_values=not args.no_standardize,
        calendar=calendar,
    )
    manifest = save_store(args.out, splits, source=args.data, missing_sentinel=args.missing_sentinel)
    print(f"prepared {manifest['counts']} instances over {len(splits.locations)} locations -> {args.out}")
    return 0


def _model_config_from(args, file_values) -> ModelConfig:
    overrides = {
        "d_model": args.d_model,
        "enc_layers": args.layers,
        "dec_layers": args.layers if args.dec_layers is None else args.dec_layers,
        "heads_t": args.heads_t,
        "heads_n": args.heads_n,
        "ff_dim": args.ff_dim,
        "dropout": args.dropout,
        "use_positional_encoding": args.positional_encoding or None,
    }
    return _apply_config(ModelConfig(), file_values, overrides)


def _train_config_from(args, file_values) -> TrainConfig:
    overrides = {
        "batch_size": args.batch_size,
        "epochs": args.epochs,
        "lr0": args.lr,
        "seed": args.seed,
    }
    return _apply_config(TrainConfig(), file_values, overrides)


def _resolved_config(model_config, train_config, extras: dict) -> dict:
    out = {f"model.{k}": v for k, v in asdict(model_config).items()}
    out.update({f"train.{k}": v for k, v in asdict(train_config).items()})
    out["train.freeze_groups"] = ",".join(sorted(train_config.freeze_groups))
    out.update(extras)
    return out


def cmd_train(args) -> int:
    splits = load_store(args.store)
    file_values = read_config_file(args.config) if args.config else {}
    model_config = _model_config_from(args, file_values)
    train_config = _train_config_from(args, file_values)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    init_rng = seeded_rng(train_config.seed, "init")
    params = ModelParams.create(model_config, splits.calendar, splits.locations, init_rng)

    best, history = train(params, splits.train, splits.val, train_config,
                          standardizer=splits.standardizer)
    save_checkpoint(out / "checkpoint.npz", best,
                    extra={"store": str(args.store), "seed": train_config.seed})
    _write_history(out / "history.csv", history)
    write_config_file(out / "resolved_config.txt", _resolved_config(
        model_config, train_config, {"version": __version__, "store": args.store}))
    if history:
        final = history[-1]
        print(f"trained {train_config.epochs} epochs; final val MAE {final.val_mae:.4f} -> {out}")
    else:
        print(f"trained 0 epochs; checkpoint equals initialization -> {out}")
    return 0


def _write_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "train_loss", "val_mae",
                         "val_mae_15", "val_mae_30", "val_mae_60"])
        for h in history:
            hz = h.val_mae_by_horizon
            writer.writerow([h.epoch, h.lr, h.train_loss, h.val_mae,
                             hz.get(15, ""), hz.get(30, ""), hz.get(60, "")])


def cmd_eval(args) -> int:
    params, _ = load_checkpoint(args.ckpt)
    splits = load_store(args.store)
    report = evaluate_model(params, splits.test, args.batch_size or 64, splits.standardizer)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json())
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["horizon_min", "mae", "rmse", "mape"])
        for minutes in sorted(report.horizons):
            h = report.horizons[minutes]
            writer.writerow([minutes, h["mae"], h["rmse"], h["mape"]])
        writer.writerow(["all", report.mae, report.rmse, report.mape])
    print(report.table())
    return 0


def cmd_experiment(args) -> int:
    splits = load_store(args.store)
    file_values = read_config_file(args.config) if args.config else {}
    model_config = _model_config_from(args, file_values)
    train_config = _train_config_from(args, file_values)
    if args.knobs:
        knob_type = int if args.kind in ("partition", "adapt") else float
        knobs = tuple(knob_type(k) for k in args.knobs.split(","))
    else:
        knobs = DEFAULT_KNOBS[args.kind]
    source_params = None
    if args.kind == "adapt":
        if not args.ckpt:
            raise ConfigError("adapt experiments need --ckpt with the source checkpoint")
        source_params, _ = load_checkpoint(args.ckpt)
        model_config = source_params.config
    spec = ExperimentSpec(
        kind=args.kind,
        knobs=knobs,
        seed=train_config.seed,
        data=splits,
        model_config=model_config,
        train_config=train_config,
        source_params=source_params,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_experiment(spec, out_csv=out / "results.csv")
    write_config_file(out / "resolved_config.txt", _resolved_config(
        model_config, train_config,
        {"version": __version__, "kind": args.kind, "knobs": ",".join(str(k) for k in knobs)}))
    print(f"{len(rows)} result rows -> {out / 'results.csv'}")
    return 0


def cmd_export_embeddings(args) -> int:
    params, _ = load_checkpoint(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    d = params.config.d_model
    cols = [f"d{i}" for i in range(d)]

    loc = params.tensors["loc_embed"].data
    with open(out / "locations.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["location"] + cols)
        for i, name in enumerate(params.locations):
            writer.writerow([name] + [repr(float(v)) for v in loc[i + 1]])

    day = params.tensors["day_embed"].data
    slot = params.tensors["slot_embed"].data
    with open(out / "instants.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["day", "slot"] + cols)
        for di in range(day.shape[0]):
            for si in range(slot.shape[0]):
                vec = day[di] + slot[si]
                writer.writerow([di, si] + [repr(float(v)) for v in vec])
    print(f"exported {len(params.locations)} location rows and "
          f"{day.shape[0] * slot.shape[0]} instant rows -> {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adn",
        description="Structured time-series forecasting without a structural prior",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="window a raw series into an instance store")
    p.add_argument("--data", required=True, help="raw series file")
    p.add_argument("--out", required=True, help="output store directory")
    p.add_argument("--format", default="csv", choices=["csv", "binary"])
    p.add_argument("--missing-sentinel", type=float, default=None)
    p.add_argument("--window", type=int, default=24)
    p.add_argument("--stride", type=int, default=12)
    p.add_argument("--ref-offset", type=int, default=12)
    p.add_argument("--slot-minutes", type=int, default=5)
    p.add_argument("--splits", default="0.7,0.1,0.2")
    p.add_argument("--no-standardize", action="store_true")
    p.set_defaults(fn=cmd_prepare)

    p = sub.add_parser("train", help="train on a prepared store")
    _common_model_flags(p)
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="autoregressive test metrics for a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int, default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("experiment", help="run a protocol sweep")
    _common_model_flags(p)
    p.add_argument("--kind", required=True, choices=["scarcity", "missing", "partition", "adapt"])
    p.add_argument("--knobs", default=None, help="comma-separated knob values")
    p.add_argument("--store", required=True)
    p.add_argument("--ckpt", default=None, help="source checkpoint (adapt only)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_experiment)

    p = sub.add_parser("export-embeddings", help="dump embedding tables as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export_embeddings)

    return parser


def _common_model_flags(p) -> None:
    p.add_argument("--config", default=None, help="flat key = value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--d-model", type=int, default=None)
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--dec-layers", type=int, default=None)
    p.add_argument("--heads-t", type=int, default=None)
    p.add_argument("--heads-n", type=int, default=None)
    p.add_argument("--ff-dim", type=int, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--positional-encoding", action="store_true")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except DivergenceError as e:
        print(f"divergence: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
