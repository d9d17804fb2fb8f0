"""Denoiser training loop and batched test-set sampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cpdm.bridge import (Batch, GuidancePair, LossConfig, NetDenoiser, SamplerConfig,
                         _unchecked, c_eps_table, sample, training_loss)
from cpdm.core import Prng, as_tensor
from cpdm.denoiser.net import DenoiserParams, NetConfig, init_params
from cpdm.denoiser.optim import AdamState, EmaConfig, PlateauScheduler, adam_step
from cpdm.errors import ConfigError, TrainingError
from cpdm.schedule import BridgeSchedule


@dataclass
class TrainConfig:
    steps: int = 3000
    batch: int = 16
    lr: float = 1e-4
    loss: LossConfig = field(default_factory=LossConfig)
    ema: EmaConfig = field(default_factory=EmaConfig)
    plateau: bool = True
    log_every: int = 0


@dataclass
class TrainResult:
    params: DenoiserParams
    losses: list[float]
    lrs: list[float]


@dataclass(frozen=True)
class MapSet:
    """Per-image training tensors: target, source and the two guidance maps."""

    x0: np.ndarray
    y: np.ndarray
    attention: np.ndarray
    attenuation: np.ndarray

    def __post_init__(self):
        for name in ("x0", "y", "attention", "attenuation"):
            object.__setattr__(self, name, as_tensor(getattr(self, name)))
        GuidancePair(self.attention, self.attenuation)  # range check once
        if not (self.x0.shape == self.y.shape == self.attention.shape):
            raise ConfigError("map set arrays differ in shape")

    def __len__(self):
        return self.x0.shape[0]

    def batch(self, idx) -> Batch:
        return Batch(self.x0[idx], self.y[idx], self.attention[idx], self.attenuation[idx])

    def without_maps(self, value: float = 0.5) -> "MapSet":
        c = np.full_like(self.attention, value)
        return MapSet(self.x0, self.y, c, c.copy())


def train_denoiser(sched: BridgeSchedule, data: MapSet, prng: Prng, cfg: TrainConfig = TrainConfig(),
                   net_cfg: NetConfig | None = None, params: DenoiserParams | None = None,
                   log=None) -> TrainResult:
    """Adam on the noise-prediction loss with EMA and a plateau-reduced rate.

    The plateau scheduler observes the per-step training loss.
    """
    if len(data) == 0:
        raise ConfigError("empty training set")
    net_cfg = net_cfg or NetConfig(T=sched.T)
    if net_cfg.T != sched.T:
        raise ConfigError(f"network T={net_cfg.T} differs from schedule T={sched.T}")
    if params is None:
        params = init_params(net_cfg, prng.child("init"), ema=cfg.ema.enabled)
    model = NetDenoiser(params)
    state = AdamState.zeros_like(params)
    plateau = PlateauScheduler(lr=cfg.lr) if cfg.plateau else None
    lr = cfg.lr
    weights = c_eps_table(sched) if cfg.loss.weighting == "c_eps" else None
    batches, noise = prng.child("batches"), prng.child("noise")
    losses, lrs = [], []
    for step in range(1, cfg.steps + 1):
        idx = batches.integers(0, len(data), size=cfg.batch)
        res = training_loss(sched, model, data.batch(idx), noise, cfg.loss, weights_table=weights)
        if not np.isfinite(res.loss):
            raise TrainingError(f"non-finite loss at step {step}")
        adam_step(params, res.grads, state, lr, ema=cfg.ema)
        losses.append(res.loss)
        lrs.append(lr)
        if plateau is not None:
            lr = plateau.step(res.loss)
        if log and cfg.log_every and step % cfg.log_every == 0:
            log(f"step {step} loss {np.mean(losses[-cfg.log_every:]):.5f} lr {lr:.2e}")
    return TrainResult(params, losses, lrs)


def sample_set(sched: BridgeSchedule, params: DenoiserParams, y, attention, attenuation,
               cfg: SamplerConfig, prng: Prng, batch: int = 100, use_ema: bool = True) -> np.ndarray:
    """Sample every image of a stack, in fixed-size batches with per-batch streams."""
    p = params.ema_view() if use_ema else params
    model = NetDenoiser(p)
    y = as_tensor(y)
    out = []
    for k, i in enumerate(range(0, y.shape[0], batch)):
        sl = slice(i, i + batch)
        g = _unchecked(as_tensor(attention[sl]), as_tensor(attenuation[sl]))
        out.append(sample(sched, y[sl], g, model, cfg, prng.child(f"batch{k}")))
    return np.concatenate(out) if out else np.zeros_like(y)
