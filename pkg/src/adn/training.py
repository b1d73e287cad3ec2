"""Teacher-forced training loop.

The recipe: masked mean-absolute-error on the target steps, Adam
(beta1 0.9, beta2 0.98, eps 1e-9), initial learning rate 0.002 halved at
epochs 15/30/45, global gradient-norm clipping at 0.1, batch size 64,
up to 100 epochs with the best-on-validation checkpoint retained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import Instance, batch as make_batches
from .errors import ConfigError, DivergenceError, EvaluationError
from .model import ModelParams, forward
from .tensor import Tape, Tensor, absolute, backward, mul, reduce_sum, scale
from .util import seeded_rng


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 100
    lr0: float = 0.002
    lr_halve_epochs: tuple[int, ...] = (15, 30, 45)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    grad_clip: float = 0.1
    seed: int = 0
    freeze_groups: frozenset = frozenset()


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Piecewise-constant rate: lr0 halved at each epoch listed in the config."""
    if epoch < 0:
        raise ConfigError(f"epoch must be nonnegative, got {epoch}")
    halvings = sum(1 for e in config.lr_halve_epochs if epoch >= e)
    return config.lr0 * 0.5 ** halvings


def masked_mae_loss(pred: Tensor, target: np.ndarray, valid: np.ndarray) -> Tensor:
    """Mean |pred - target| over valid target events only."""
    count = int(valid.sum())
    if count == 0:
        raise EvaluationError("masked MAE over zero valid events")
    target = np.asarray(target, dtype=pred.dtype)
    mask = valid[..., None].astype(pred.dtype)
    err = mul(absolute(pred - Tensor(target)), Tensor(mask))
    total = count * pred.shape[-1]
    return scale(reduce_sum(err), 1.0 / total)


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    sq = 0.0
    for g in grads.values():
        sq += float(np.sum(g.astype(np.float64) ** 2))
    return math.sqrt(sq)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float = 0.1) -> dict[str, np.ndarray]:
    """Global-norm clipping: if ||g||_2 > max_norm, rescale every gradient."""
    norm = global_grad_norm(grads)
    if norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= g.dtype.type(factor)
    return grads


@dataclass
class OptState:
    """Adam moments per trainable parameter; frozen groups carry no state."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, params: ModelParams, freeze_groups=frozenset()) -> "OptState":
        names = params.trainable_names(freeze_groups)
        return cls(
            m={n: np.zeros_like(params.tensors[n].data) for n in names},
            v={n: np.zeros_like(params.tensors[n].data) for n in names},
        )


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: OptState,
              lr: float, config: TrainConfig) -> OptState:
    """Standard bias-corrected Adam update, applied in place to the parameters."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p = params.tensors[name]
        p.data -= update.astype(p.data.dtype)
    return state


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    val_mae: float
    val_mae_by_horizon: dict[int, float] = field(default_factory=dict)


def train(
    params: ModelParams,
    train_instances: list[Instance],
    val_instances: list[Instance],
    config: TrainConfig,
    standardizer=None,
    callbacks: dict | None = None,
    epoch_transform=None,
) -> tuple[ModelParams, list[EpochStats]]:
    """Optimize ``params`` in place; returns (best-on-validation copy, history).

    Each epoch shuffles the training instances with a seeded stream,
    runs teacher-forced forward/backward per batch, clips and applies Adam,
    then measures autoregressive validation MAE in original units.
    ``epoch_transform(instances, epoch)`` may rewrite the training instances
    (used by the partitioned-training protocol). Deterministic given the seed.
    """
    from .evaluation import evaluate_model  # local import, avoids a cycle

    callbacks = callbacks or {}
    model_config = params.config
    shuffle_rng = seeded_rng(config.seed, "shuffle")
    dropout_rng = seeded_rng(config.seed, "dropout")
    state = OptState.init(params, config.freeze_groups)
    trainable = params.trainable_names(config.freeze_groups)

    best = params.copy()
    best_val = math.inf
    history: list[EpochStats] = []

    for epoch in range(config.epochs):
        lr = lr_schedule(epoch, config)
        insts = train_instances
        if epoch_transform is not None:
            insts = epoch_transform(insts, epoch)
        order = shuffle_rng.permutation(len(insts))
        shuffled = [insts[i] for i in order]

        losses = []
        for bi, mb in enumerate(make_batches(shuffled, config.batch_size)):
            params.zero_grads()
            with Tape():
                preds = forward(mb, params, model_config, mode="teacher_forced",
                                rng=dropout_rng, training=True)
                loss = masked_mae_loss(preds, mb.target_values, mb.target_valid)
                backward(loss)
            loss_value = float(loss.data)
            if not math.isfinite(loss_value):
                raise DivergenceError(f"loss diverged at epoch {epoch}, batch {bi}")
            grads = {}
            for name in trainable:
                g = params.tensors[name].grad
                grads[name] = g if g is not None else np.zeros_like(params.tensors[name].data)
            clip_gradients(grads, config.grad_clip)
            adam_step(params, grads, state, lr, config)
            losses.append(loss_value)
            if "on_step" in callbacks:
                callbacks["on_step"]({
                    "epoch": epoch,
                    "batch": bi,
                    "loss": loss_value,
                    "grad_norm": global_grad_norm(grads),
                    "lr": lr,
                })

        train_loss = float(np.mean(losses)) if losses else math.nan
        val_mae = math.nan
        horizon_mae: dict[int, float] = {}
        if val_instances:
            report = evaluate_model(params, val_instances, config.batch_size, standardizer)
            val_mae = report.mae
            horizon_mae = {h: m["mae"] for h, m in report.horizons.items()}
            if val_mae < best_val:
                best_val = val_mae
                best = params.copy()
        stats = EpochStats(epoch, lr, train_loss, val_mae, horizon_mae)
        history.append(stats)
        if "on_epoch" in callbacks:
            callbacks["on_epoch"](stats)

    if not val_instances and config.epochs > 0:
        best = params.copy()
    return best, history
