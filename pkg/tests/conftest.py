"""Shared factories: tiny configurations, random parameters, random batches."""

import numpy as np
import pytest

from adn.data import CalendarSpec, MaskedBatch
from adn.model import ModelConfig, ModelParams
from adn.util import seeded_rng

TINY_CALENDAR = CalendarSpec(slots_per_day=24, slot_minutes=60)


def tiny_config(**overrides) -> ModelConfig:
    base = dict(d_model=4, enc_layers=1, dec_layers=1, heads_t=1, heads_n=1,
                ff_dim=8, dropout=0.0, num_features=1)
    base.update(overrides)
    return ModelConfig(**base)


def make_params(config, seed=0, num_locations=4, calendar=TINY_CALENDAR, dtype=np.float32):
    locations = [f"L{i}" for i in range(num_locations)]
    return ModelParams.create(config, calendar, locations, seeded_rng(seed, "init"), dtype=dtype)


def random_batch(seed=0, b=2, n=3, t_src=3, t_tgt=3, p=1, dtype=np.float32,
                 calendar=TINY_CALENDAR, mask_frac=0.0, pad_last=False):
    """A direct MaskedBatch with random measurements and consistent ids."""
    rng = seeded_rng(seed, "batch")
    t_total = t_src + t_tgt
    meas = rng.normal(size=(b, n, t_total, p)).astype(dtype)
    valid = np.ones((b, n, t_total), dtype=bool)
    if mask_frac > 0:
        valid &= rng.random((b, n, t_total)) >= mask_frac
    loc_rows = np.tile(np.arange(1, n + 1, dtype=np.int64), (b, 1))
    if pad_last:
        valid[:, -1, :] = False
        loc_rows[:, -1] = 0
    meas = np.where(valid[..., None], meas, dtype(0))
    start = rng.integers(0, calendar.slots_per_day)
    slots = (start + np.arange(t_total)) % calendar.slots_per_day
    days = (np.arange(t_total) + start) // calendar.slots_per_day % calendar.days_per_week
    day_ids = np.tile(days.astype(np.int64), (b, 1))
    slot_ids = np.tile(slots.astype(np.int64), (b, 1))
    return MaskedBatch(meas, valid, loc_rows, day_ids, slot_ids, t_src)


@pytest.fixture
def tiny_setup():
    config = tiny_config()
    params = make_params(config, seed=3)
    batch = random_batch(seed=4)
    return config, params, batch
