"""Encoder-decoder forecaster with separable temporal/spatial attention.

Events live on a (location, instant) grid. Rather than flattening the grid
into one sequence (which would need attention matrices of size (N*T)^2),
every layer alternates standard multi-head attention along one axis at a
time: the spatial axis is folded into the batch for temporal attention, and
the temporal axis is folded for spatial attention. Attention matrices are
therefore never larger than max(N, T, T')^2.

No relational knowledge between locations is used anywhere: locations enter
only through learned identity embeddings, instants through day-of-week and
slot-of-day embeddings. The decoder is causal along time and is fed the
previous instant's measurement (shifted right); at test time it runs as an
autoregressor on its own predictions.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .data import CalendarSpec, MaskedBatch
from .errors import ConfigError, ShapeError
from .tensor import (
    Tensor,
    dropout,
    embedding_lookup,
    layer_norm,
    mask_fill,
    matmul,
    mul,
    narrow,
    permute,
    relu,
    reshape,
    scale,
    softmax,
)

PARAM_GROUPS = ("loc_embed", "instant_embed", "input_proj", "attention", "pred_head")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture shape. Defaults are the tuned full-scale settings."""

    d_model: int = 32
    enc_layers: int = 3
    dec_layers: int = 3
    heads_t: int = 4
    heads_n: int = 2
    ff_dim: int = 256
    dropout: float = 0.3
    num_features: int = 1
    use_positional_encoding: bool = False

    def __post_init__(self):
        if self.d_model % self.heads_t or self.d_model % self.heads_n:
            raise ConfigError(
                f"d_model {self.d_model} must be divisible by heads_t {self.heads_t} "
                f"and heads_n {self.heads_n}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")


class ModelParams:
    """All learnable tensors, keyed by name and partitioned into named groups.

    Groups ("loc_embed", "instant_embed", "input_proj", "attention",
    "pred_head") are the unit of freezing: domain adaptation relearns
    loc_embed while keeping every other group fixed.

    Embedding row i+1 belongs to ``locations[i]``; row 0 is reserved for
    padding and never trained.
    """

    def __init__(self, tensors: dict[str, Tensor], config: ModelConfig,
                 calendar: CalendarSpec, locations: list[str]):
        self.tensors = tensors
        self.config = config
        self.calendar = calendar
        self.locations = list(locations)

    @classmethod
    def create(cls, config: ModelConfig, calendar: CalendarSpec, locations: list[str],
               rng: np.random.Generator, dtype=np.float32) -> "ModelParams":
        d = config.d_model
        p = config.num_features
        ff = config.ff_dim
        t: dict[str, Tensor] = {}

        def param(name, arr):
            t[name] = Tensor(np.ascontiguousarray(arr, dtype=dtype), requires_grad=True)

        def uniform(fan_in, shape):
            k = 1.0 / math.sqrt(fan_in)
            return rng.uniform(-k, k, shape)

        def embed_table(rows):
            return rng.normal(0.0, 1.0 / math.sqrt(d), (rows, d))

        loc = embed_table(len(locations) + 1)
        loc[0] = 0.0  # padding row
        param("loc_embed", loc)
        param("day_embed", embed_table(calendar.days_per_week))
        param("slot_embed", embed_table(calendar.slots_per_day))
        param("in_proj.w", uniform(p, (p, d)))
        param("in_proj.b", np.zeros(d))

        def attn_block(prefix):
            # no key bias: softmax is invariant to a constant shift of the
            # scores in a row, so a key bias would be inert
            for side in ("wq", "wk", "wv", "wo"):
                param(f"{prefix}.{side}", uniform(d, (d, d)))
            for side in ("bq", "bv", "bo"):
                param(f"{prefix}.{side}", np.zeros(d))

        def norm_block(prefix):
            param(f"{prefix}.g", np.ones(d))
            param(f"{prefix}.b", np.zeros(d))

        def ff_block(prefix):
            param(f"{prefix}.w1", uniform(d, (d, ff)))
            param(f"{prefix}.b1", np.zeros(ff))
            param(f"{prefix}.w2", uniform(ff, (ff, d)))
            param(f"{prefix}.b2", np.zeros(d))

        for layer in range(config.enc_layers):
            pre = f"enc{layer}"
            attn_block(f"{pre}.tattn")
            attn_block(f"{pre}.nattn")
            norm_block(f"{pre}.ln1")
            norm_block(f"{pre}.ln2")
            norm_block(f"{pre}.ln3")
            ff_block(f"{pre}.ff")
        for layer in range(config.dec_layers):
            pre = f"dec{layer}"
            attn_block(f"{pre}.self")
            attn_block(f"{pre}.cross")
            attn_block(f"{pre}.nattn")
            for i in (1, 2, 3, 4):
                norm_block(f"{pre}.ln{i}")
            ff_block(f"{pre}.ff")
        param("pred.w", uniform(d, (d, p)))
        param("pred.b", np.zeros(p))
        return cls(t, config, calendar, locations)

    @staticmethod
    def group_of(name: str) -> str:
        if name == "loc_embed":
            return "loc_embed"
        if name in ("day_embed", "slot_embed"):
            return "instant_embed"
        if name.startswith("in_proj"):
            return "input_proj"
        if name.startswith("pred"):
            return "pred_head"
        return "attention"

    def names_in_group(self, group: str) -> list[str]:
        return [n for n in self.tensors if self.group_of(n) == group]

    def trainable_names(self, freeze_groups=frozenset()) -> list[str]:
        return [n for n in self.tensors if self.group_of(n) not in freeze_groups]

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        tensors = {n: Tensor(t.data.copy(), requires_grad=True) for n, t in self.tensors.items()}
        return ModelParams(tensors, self.config, self.calendar, self.locations)

    def astype(self, dtype) -> "ModelParams":
        tensors = {n: Tensor(t.data.astype(dtype), requires_grad=True) for n, t in self.tensors.items()}
        return ModelParams(tensors, self.config, self.calendar, self.locations)

    def attn(self, prefix: str) -> dict[str, Tensor]:
        keys = ("wq", "bq", "wk", "wv", "bv", "wo", "bo")
        return {k: self.tensors[f"{prefix}.{k}"] for k in keys}

    def loc_row(self, location_id: str) -> int:
        return self.locations.index(location_id) + 1

    @property
    def dtype(self):
        return self.tensors["loc_embed"].dtype


# ---------------------------------------------------------------------------
# axis folding

def split_t(x: Tensor) -> Tensor:
    """⟨B,N,S,D⟩ -> ⟨B*N,S,D⟩: fold locations into the batch for temporal attention.

    N is adjacent to B in row-major order, so this is a pure reshape.
    """
    b, n, s, d = x.shape
    return reshape(x, (b * n, s, d))


def merge_t(x: Tensor, batch_size: int) -> Tensor:
    g, s, d = x.shape
    return reshape(x, (batch_size, g // batch_size, s, d))


def split_n(x: Tensor) -> Tensor:
    """⟨B,N,S,D⟩ -> ⟨B*S,N,D⟩: fold instants into the batch for spatial attention.

    Needs a materializing permute before the reshape.
    """
    b, n, s, d = x.shape
    return reshape(permute(x, (0, 2, 1, 3)), (b * s, n, d))


def merge_n(x: Tensor, batch_size: int) -> Tensor:
    g, n, d = x.shape
    return permute(reshape(x, (batch_size, g // batch_size, n, d)), (0, 2, 1, 3))


# ---------------------------------------------------------------------------
# attention

_attention_shape_log: list[tuple[int, int]] | None = None


@contextmanager
def record_attention_shapes():
    """Collect the (rows, cols) of every attention matrix allocated inside the block."""
    global _attention_shape_log
    prev = _attention_shape_log
    _attention_shape_log = log = []
    try:
        yield log
    finally:
        _attention_shape_log = prev


def mha(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: int,
    p: dict[str, Tensor],
    mask: np.ndarray | None = None,
    key_valid: np.ndarray | None = None,
    dropout_p: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    """Scaled dot-product multi-head attention over ⟨G,S,D⟩ inputs.

    ``mask`` is a boolean ⟨S_q,S_k⟩ array marking blocked pairs (True = may
    not attend); ``key_valid`` is a per-key boolean ⟨G,S_k⟩. Blocked and
    invalid keys receive -inf before the softmax, so a fully blocked query row
    yields a zero attention output.
    """
    g, s_q, d = q.shape
    s_k = k.shape[1]
    if d % heads:
        raise ShapeError(f"model width {d} not divisible by {heads} heads")
    if k.shape != v.shape or k.shape[0] != g or k.shape[2] != d:
        raise ShapeError(f"attention inputs disagree: q {q.shape}, k {k.shape}, v {v.shape}")
    dh = d // heads

    def project(x, s, w, b=None):
        y = matmul(x, p[w])
        if b is not None:
            y = y + p[b]
        return permute(reshape(y, (g, s, heads, dh)), (0, 2, 1, 3))  # ⟨G,H,S,dh⟩

    qh = project(q, s_q, "wq", "bq")
    kh = project(k, s_k, "wk")
    vh = project(v, s_k, "wv", "bv")

    scores = scale(matmul(qh, permute(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))  # ⟨G,H,Sq,Sk⟩
    if _attention_shape_log is not None:
        _attention_shape_log.append((s_q, s_k))

    blocked = None
    if mask is not None:
        blocked = np.asarray(mask, dtype=bool)
    if key_valid is not None:
        kb = ~np.asarray(key_valid, dtype=bool).reshape(g, 1, 1, s_k)
        blocked = kb if blocked is None else (blocked | kb)
    if blocked is not None:
        scores = mask_fill(scores, blocked, -np.inf)

    attn = softmax(scores, axis=-1)
    if training and dropout_p > 0.0:
        attn = dropout(attn, dropout_p, training, rng)
    ctx = matmul(attn, vh)  # ⟨G,H,Sq,dh⟩
    out = reshape(permute(ctx, (0, 2, 1, 3)), (g, s_q, d))
    return matmul(out, p["wo"]) + p["bo"]


def causal_mask(steps: int) -> np.ndarray:
    """Blocked pairs for decoder self-attention: no peeking at later steps."""
    return np.triu(np.ones((steps, steps), dtype=bool), k=1)


# ---------------------------------------------------------------------------
# initialisation layers

def positional_encoding(length: int, d: int, dtype) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    enc = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return enc.astype(dtype)


def _embed_events(values: Tensor, valid: np.ndarray, loc_rows: np.ndarray,
                  day_ids: np.ndarray, slot_ids: np.ndarray, positions: np.ndarray,
                  params: ModelParams, config: ModelConfig) -> Tensor:
    """Shared event embedding: projected measurement + location + calendar (+ position)."""
    b, n, steps, _ = values.shape
    d = config.d_model
    masked = mul(values, Tensor(valid[:, :, :, None].astype(values.dtype)))
    x = matmul(masked, params.tensors["in_proj.w"]) + params.tensors["in_proj.b"]
    loc = embedding_lookup(params.tensors["loc_embed"], loc_rows)        # ⟨B,N,D⟩
    cal = embedding_lookup(params.tensors["day_embed"], day_ids) + \
        embedding_lookup(params.tensors["slot_embed"], slot_ids)          # ⟨B,S,D⟩
    x = x + reshape(loc, (b, n, 1, d)) + reshape(cal, (b, 1, steps, d))
    if config.use_positional_encoding:
        pe = positional_encoding(int(positions.max()) + 1, d, values.dtype)[positions]
        x = x + Tensor(pe)
    return x


def enc_ini(batch: MaskedBatch, params: ModelParams, config: ModelConfig,
            meas: Tensor | None = None) -> Tensor:
    """Embed the source events (instants up to the reference) as ⟨B,N,T,D⟩."""
    t = batch.t_src
    if meas is None:
        values = Tensor(np.ascontiguousarray(batch.measurements[:, :, :t, :]))
    else:
        values = narrow(meas, 2, 0, t)
    return _embed_events(
        values,
        batch.valid[:, :, :t],
        batch.loc_rows,
        batch.day_ids[:, :t],
        batch.slot_ids[:, :t],
        np.arange(t),
        params,
        config,
    )


def dec_ini(batch: MaskedBatch, params: ModelParams, config: ModelConfig,
            meas: Tensor | None = None,
            inputs: np.ndarray | None = None,
            input_valid: np.ndarray | None = None,
            steps: int | None = None) -> Tensor:
    """Embed the decoder inputs as ⟨B,N,steps,D⟩.

    Step i carries the measurement observed at absolute instant T+i-1 (the
    target sequence shifted right, so step 0 holds the reference-instant
    measurement), while its calendar and positional identity are those of the
    target instant T+i being predicted. ``inputs`` overrides the shifted
    measurements for autoregressive rollout.
    """
    t = batch.t_src
    n_steps = batch.t_tgt if steps is None else steps
    if inputs is not None:
        values = Tensor(np.ascontiguousarray(inputs))
        valid = input_valid if input_valid is not None else np.ones(inputs.shape[:3], dtype=bool)
    elif meas is not None:
        values = narrow(meas, 2, t - 1, n_steps)
        valid = batch.valid[:, :, t - 1:t - 1 + n_steps]
    else:
        values = Tensor(np.ascontiguousarray(batch.measurements[:, :, t - 1:t - 1 + n_steps, :]))
        valid = batch.valid[:, :, t - 1:t - 1 + n_steps]
    return _embed_events(
        values,
        valid,
        batch.loc_rows,
        batch.day_ids[:, t:t + n_steps],
        batch.slot_ids[:, t:t + n_steps],
        np.arange(t, t + n_steps),
        params,
        config,
    )


# ---------------------------------------------------------------------------
# transformation layers

def _spatial_key_valid(loc_valid: np.ndarray, steps: int) -> np.ndarray:
    """⟨B,N⟩ location validity replicated per folded instant -> ⟨B*steps,N⟩."""
    b, n = loc_valid.shape
    return np.broadcast_to(loc_valid[:, None, :], (b, steps, n)).reshape(b * steps, n)


def _ff(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    t = params.tensors
    h = relu(matmul(x, t[f"{prefix}.w1"]) + t[f"{prefix}.b1"])
    return matmul(h, t[f"{prefix}.w2"]) + t[f"{prefix}.b2"]


def _sublayer(x: Tensor, out: Tensor, params: ModelParams, ln: str,
              config: ModelConfig, rng, training) -> Tensor:
    """Residual add + dropout + post-norm around a sublayer output."""
    t = params.tensors
    out = dropout(out, config.dropout, training, rng)
    return layer_norm(x + out, t[f"{ln}.g"], t[f"{ln}.b"])


def enc_layer(x: Tensor, params: ModelParams, layer: int, config: ModelConfig,
              loc_valid: np.ndarray, rng=None, training: bool = False) -> Tensor:
    """Temporal self-attention, spatial self-attention, feed-forward.

    Temporal attention sees all source instants (non-causal); spatial
    attention excludes padded locations as keys.
    """
    b, n, t, d = x.shape
    pre = f"enc{layer}"
    h = split_t(x)
    a = merge_t(mha(h, h, h, config.heads_t, params.attn(f"{pre}.tattn"),
                    dropout_p=config.dropout, rng=rng, training=training), b)
    x = _sublayer(x, a, params, f"{pre}.ln1", config, rng, training)

    h = split_n(x)
    kv = _spatial_key_valid(loc_valid, t)
    a = merge_n(mha(h, h, h, config.heads_n, params.attn(f"{pre}.nattn"), key_valid=kv,
                    dropout_p=config.dropout, rng=rng, training=training), b)
    x = _sublayer(x, a, params, f"{pre}.ln2", config, rng, training)

    return _sublayer(x, _ff(x, params, f"{pre}.ff"), params, f"{pre}.ln3", config, rng, training)


def dec_layer(y: Tensor, enc_out: Tensor, params: ModelParams, layer: int,
              config: ModelConfig, loc_valid: np.ndarray, rng=None,
              training: bool = False) -> Tensor:
    """Causal temporal self-attention, temporal cross-attention against the
    encoder output, spatial self-attention, feed-forward."""
    b, n, steps, d = y.shape
    pre = f"dec{layer}"
    h = split_t(y)
    a = merge_t(mha(h, h, h, config.heads_t, params.attn(f"{pre}.self"),
                    mask=causal_mask(steps), dropout_p=config.dropout,
                    rng=rng, training=training), b)
    y = _sublayer(y, a, params, f"{pre}.ln1", config, rng, training)

    hq = split_t(y)
    hk = split_t(enc_out)
    a = merge_t(mha(hq, hk, hk, config.heads_t, params.attn(f"{pre}.cross"),
                    dropout_p=config.dropout, rng=rng, training=training), b)
    y = _sublayer(y, a, params, f"{pre}.ln2", config, rng, training)

    h = split_n(y)
    kv = _spatial_key_valid(loc_valid, steps)
    a = merge_n(mha(h, h, h, config.heads_n, params.attn(f"{pre}.nattn"), key_valid=kv,
                    dropout_p=config.dropout, rng=rng, training=training), b)
    y = _sublayer(y, a, params, f"{pre}.ln3", config, rng, training)

    return _sublayer(y, _ff(y, params, f"{pre}.ff"), params, f"{pre}.ln4", config, rng, training)


def pred(z: Tensor, params: ModelParams) -> Tensor:
    """Affine map D -> P: the point-prediction head."""
    return matmul(z, params.tensors["pred.w"]) + params.tensors["pred.b"]


# ---------------------------------------------------------------------------
# full forward passes

def encode(batch: MaskedBatch, params: ModelParams, config: ModelConfig,
           meas: Tensor | None = None, rng=None, training: bool = False) -> Tensor:
    x = enc_ini(batch, params, config, meas=meas)
    loc_valid = batch.loc_valid
    for layer in range(config.enc_layers):
        x = enc_layer(x, params, layer, config, loc_valid, rng=rng, training=training)
    return x


def decode(dec_x: Tensor, enc_out: Tensor, batch: MaskedBatch, params: ModelParams,
           config: ModelConfig, rng=None, training: bool = False) -> Tensor:
    loc_valid = batch.loc_valid
    y = dec_x
    for layer in range(config.dec_layers):
        y = dec_layer(y, enc_out, params, layer, config, loc_valid, rng=rng, training=training)
    return pred(y, params)


def forward(batch: MaskedBatch, params: ModelParams, config: ModelConfig | None = None,
            mode: str = "teacher_forced", rng=None, training: bool = False,
            meas: Tensor | None = None) -> Tensor:
    """Run the model over a batch.

    teacher_forced: one pass, the decoder reads ground-truth inputs shifted
    right; requires targets present and is the only mode that may train.
    autoregressive: iterate t_tgt times, feeding each newly predicted step
    back as the next decoder input; dropout must be off.
    """
    config = config or params.config
    if mode == "teacher_forced":
        if batch.t_tgt <= 0:
            raise ValueError("teacher forcing requires target steps in the batch")
        enc_out = encode(batch, params, config, meas=meas, rng=rng, training=training)
        dec_x = dec_ini(batch, params, config, meas=meas)
        return decode(dec_x, enc_out, batch, params, config, rng=rng, training=training)
    if mode == "autoregressive":
        if training:
            raise ValueError("autoregressive rollout is an inference mode; dropout must be off")
        return _forward_autoregressive(batch, params, config)
    raise ConfigError(f"unknown forward mode {mode!r}")


def _forward_autoregressive(batch: MaskedBatch, params: ModelParams,
                            config: ModelConfig) -> Tensor:
    b, n, _, p = batch.measurements.shape
    t = batch.t_src
    t_tgt = batch.t_tgt
    enc_out = encode(batch, params, config)
    # Decode on the full-length target grid every iteration: the causal mask
    # makes slots after step i irrelevant to step i, and keeping one shape for
    # all passes keeps step outputs bit-identical to the teacher-forced pass.
    inputs = np.zeros((b, n, t_tgt, p), dtype=batch.measurements.dtype)
    valid = np.zeros((b, n, t_tgt), dtype=bool)
    inputs[:, :, 0, :] = batch.measurements[:, :, t - 1, :]
    valid[:, :, 0] = batch.valid[:, :, t - 1]
    preds = np.zeros((b, n, t_tgt, p), dtype=batch.measurements.dtype)
    for i in range(t_tgt):
        dec_x = dec_ini(batch, params, config, inputs=inputs, input_valid=valid)
        out = decode(dec_x, enc_out, batch, params, config)
        preds[:, :, i, :] = out.data[:, :, i, :]
        if i + 1 < t_tgt:
            inputs[:, :, i + 1, :] = preds[:, :, i, :]
            valid[:, :, i + 1] = True
    return Tensor(preds)
