"""Shared test utilities."""

import numpy as np

from aqfusion.model import init_params
from aqfusion.rng import Rng


def live_params(config, seed):
    """He-init weights plus small random biases, so no ReLU path is dead in tiny nets."""
    params = init_params(config, Rng(seed))
    g = np.random.default_rng(seed)
    for t in params.values():
        if t.data.ndim == 1:
            t.data[:] = g.normal(0, 0.1, t.shape) + 0.05
    return params
