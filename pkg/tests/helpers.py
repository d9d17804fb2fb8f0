"""Shared test fixtures that are plain functions (importable from tests)."""

import numpy as np


class Oracle:
    """Noise predictor that knows the clean image: returns ``x_t - x0``."""

    def __init__(self, x0):
        self.x0 = np.asarray(x0, dtype=np.float64)
        self.calls = []

    def __call__(self, x_cat, t):
        self.calls.append((np.array(x_cat), t))
        x0 = self.x0 if self.x0.ndim == 3 else self.x0[None]
        return (x_cat[..., 0].astype(np.float64) - x0)[..., None]


class Zero:
    def __call__(self, x_cat, t):
        return np.zeros(x_cat.shape[:-1] + (1,), dtype=np.float32)
