"""RMSprop optimiser."""
from __future__ import annotations

import numpy as np

RMS_EPS = 1e-8


def init_state(params):
    """Zeroed squared-gradient accumulators, one per parameter."""
    return {k: np.zeros_like(v) for k, v in params.items()}


def rmsprop_step(params, grads, state, lr, decay=0.9, eps=RMS_EPS):
    """One in-place RMSprop update.

    ``a <- decay * a + (1 - decay) * g**2`` then
    ``p <- p - lr * g / sqrt(a + eps)``. Returns ``params``.
    """
    for k, g in grads.items():
        a = state[k]
        if a.shape != g.shape:
            raise ValueError(f"accumulator for {k} has shape {a.shape}, gradient {g.shape}")
        a *= decay
        a += (1.0 - decay) * g * g
        params[k] -= lr * g / np.sqrt(a + eps)
    return params
