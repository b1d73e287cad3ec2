"""Structured time-series forecasting with separable spatio-temporal attention.

An encoder-decoder forecaster over (location, instant) event grids that uses
no relational prior between locations, plus the data pipeline, training
recipe, evaluation metrics and experiment protocols around it. Built on a
small numpy tensor core with reverse-mode automatic differentiation.
"""

__version__ = "0.1.0"

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    CalendarSpec,
    DatasetSplits,
    Instance,
    MaskedBatch,
    RawSeries,
    Standardizer,
    batch,
    chronological_split,
    load_raw,
    make_windows,
    prepare_dataset,
    save_raw,
    standardize,
    synth_diffusion,
)
from .errors import (
    AdnError,
    ConfigError,
    DataError,
    DivergenceError,
    EvaluationError,
    ShapeError,
)
from .evaluation import (
    HistoricalAverage,
    MetricsReport,
    evaluate_ha,
    evaluate_model,
    historical_average,
    masked_mae,
    masked_mape,
    masked_rmse,
    predict,
)
from .experiments import (
    ExperimentSpec,
    adapt_domain,
    apply_missing,
    drop_locations,
    partition_transform,
    random_partition,
    run_experiment,
    scarcity_subset,
)
from .model import (
    ModelConfig,
    ModelParams,
    dec_ini,
    dec_layer,
    enc_ini,
    enc_layer,
    forward,
    merge_n,
    merge_t,
    mha,
    pred,
    record_attention_shapes,
    split_n,
    split_t,
)
from .tensor import Tape, Tensor, backward, grad_check
from .training import (
    OptState,
    TrainConfig,
    adam_step,
    clip_gradients,
    global_grad_norm,
    lr_schedule,
    masked_mae_loss,
    train,
)
from .util import derive_seed, seeded_rng
