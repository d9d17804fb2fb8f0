"""Adam with bias correction, EMA shadow weights and a reduce-on-plateau schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from cpdm.denoiser.net import DenoiserParams
from cpdm.errors import TrainingError


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros_like(cls, params: DenoiserParams) -> "AdamState":
        return cls(np.zeros_like(params.flat, dtype=np.float64), np.zeros_like(params.flat, dtype=np.float64))


@dataclass
class EmaConfig:
    enabled: bool = True
    decay: float = 0.995
    start: int = 300
    interval: int = 1


def ema_update(shadow: np.ndarray, params: np.ndarray, decay: float) -> None:
    """In place: ``shadow <- decay * shadow + (1 - decay) * params``."""
    shadow *= decay
    shadow += (1.0 - decay) * params


def adam_step(params: DenoiserParams, grads: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              ema: EmaConfig | None = None) -> DenoiserParams:
    """One in-place Adam update; returns ``params`` for chaining.

    Moments are kept in float64. When ``ema`` is enabled the shadow copies the
    parameters until ``ema.start`` steps, then tracks them by exponential
    averaging every ``ema.interval`` steps.
    """
    if grads.shape != params.flat.shape:
        raise TrainingError(f"gradient shape {grads.shape} != parameter shape {params.flat.shape}")
    if not np.all(np.isfinite(grads)):
        raise TrainingError(f"non-finite gradients at step {params.step_count}")
    g = grads.astype(np.float64)
    params.step_count += 1
    k = params.step_count
    state.m *= beta1
    state.m += (1.0 - beta1) * g
    state.v *= beta2
    state.v += (1.0 - beta2) * g * g
    m_hat = state.m / (1.0 - beta1 ** k)
    v_hat = state.v / (1.0 - beta2 ** k)
    params.flat -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(params.flat.dtype)

    if ema is not None and ema.enabled:
        if params.ema_shadow is None:
            params.ema_shadow = params.flat.copy()
        elif k <= ema.start:
            params.ema_shadow[...] = params.flat
        elif k % ema.interval == 0:
            ema_update(params.ema_shadow, params.flat, ema.decay)
    return params


@dataclass
class PlateauScheduler:
    """Reduce the learning rate when a minimised metric stops improving.

    An observation improves on the best so far when it is below
    ``best * (1 - threshold)``. After more than ``patience`` consecutive
    non-improving observations the rate is multiplied by ``factor`` (floored
    at ``min_lr``) and the next ``cooldown`` observations are ignored.
    """

    lr: float = 1e-4
    factor: float = 0.5
    patience: int = 3000
    cooldown: int = 2000
    threshold: float = 1e-4
    min_lr: float = 5e-7
    best: float = field(default=math.inf)
    num_bad: int = 0
    cooldown_left: int = 0

    def step(self, metric: float) -> float:
        metric = float(metric)
        if not math.isfinite(metric):
            raise TrainingError(f"non-finite metric {metric}")
        if metric < self.best * (1.0 - self.threshold):
            self.best = metric
            self.num_bad = 0
        else:
            self.num_bad += 1
        if self.cooldown_left > 0:
            self.cooldown_left -= 1
            self.num_bad = 0
        if self.num_bad > self.patience:
            self.lr = max(self.lr * self.factor, self.min_lr)
            self.cooldown_left = self.cooldown
            self.num_bad = 0
        return self.lr


def plateau_scheduler(state: PlateauScheduler, val_metric: float) -> float:
    return state.step(val_metric)
