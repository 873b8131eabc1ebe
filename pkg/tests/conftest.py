import numpy as np
import pytest

import accuquant as aq


@pytest.fixture(scope="session")
def default_schedule():
    return aq.make_schedule("linear", 100, 1e-4, 0.02)


@pytest.fixture(scope="session")
def short_schedule():
    return aq.make_schedule("linear", 10, 1e-3, 0.2)


@pytest.fixture(scope="session")
def linear_model(short_schedule):
    return aq.LinearDenoiser.random(short_schedule.T, 2, aq.Rng(11))


@pytest.fixture(scope="session")
def ring_data():
    return aq.make_dataset("ring", 2048, aq.Rng(5))


@pytest.fixture(scope="session")
def trained_mlp(ring_data, default_schedule):
    cfg = aq.TrainConfig(epochs=60, batch_size=128, lr=1e-3, hidden=64)
    model, losses = aq.train_toy_denoiser(ring_data, default_schedule, cfg, aq.Rng(7))
    assert losses[-1] < losses[0]
    return model


def wide_params(model, bits=16):
    """32-bit-like quantizers: tiny step, huge range, so fake quantization is a no-op
    to ~1e-5 absolute."""
    params = {}
    for site in model.sites():
        params[site.id] = aq.QuantizerParams(s=2.0 ** -(bits - 6), z=2 ** (bits - 1), b=bits)
    return params
