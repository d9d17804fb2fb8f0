"""Desk-scale experiments shared by the acceptance tests and ``scripts/``."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from cpdm.bridge import SamplerConfig
from cpdm.core import Prng
from cpdm.datagen import SplitSpec, gen_dataset, make_split, stack
from cpdm.denoiser.net import NetConfig
from cpdm.guidance import attenuation_map
from cpdm.metrics import denormalize, mae
from cpdm.schedule import build_schedule
from cpdm.training import MapSet, TrainConfig, sample_set, train_denoiser

DESK_LR = 1e-3


@dataclass
class DeskData:
    seed: int
    samples: list
    train: list[int]
    val: list[int]
    test: list[int]
    attenuation: np.ndarray
    seconds: float = 0.0

    def arrays(self, attr) -> np.ndarray:
        return stack(self.samples, attr)

    def map_set(self, idx, no_maps=False) -> MapSet:
        sub = [self.samples[i] for i in idx]
        ms = MapSet(stack(sub, "x0"), stack(sub, "y"), stack(sub, "truth_mask"),
                    self.attenuation[idx])
        return ms.without_maps() if no_maps else ms


def desk_data(seed: int = 1, n_studies: int = 200, pairs_per_study: int = 10,
              size: int = 32) -> DeskData:
    t0 = time.perf_counter()
    samples = gen_dataset(seed, n_studies, pairs_per_study, size)
    tr, va, te = make_split([s.study_id for s in samples], SplitSpec(), Prng(seed, "split"))
    mu = np.stack([attenuation_map(s.raw_ct) for s in samples])
    return DeskData(seed, samples, tr, va, te, mu, time.perf_counter() - t0)


def mean_image_mae(data: DeskData) -> float:
    """MAE (PET units) of predicting the mean training image for every test image."""
    x0 = data.arrays("x0")
    pred = np.broadcast_to(x0[data.train].mean(axis=0), x0[data.test].shape)
    return mae(denormalize(pred), denormalize(x0[data.test]))


@dataclass
class DeskResult:
    losses: list[float]
    lead: float
    trail: float
    test_mae: float
    baseline_mae: float
    train_seconds: float
    sample_seconds: float
    pred: np.ndarray = field(repr=False, default=None)
    params: object = field(repr=False, default=None)

    @property
    def loss_ratio(self) -> float:
        return self.trail / self.lead

    @property
    def improvement(self) -> float:
        return 1.0 - self.test_mae / self.baseline_mae


def run_desk(data: DeskData, T: int = 200, steps: int = 3000, batch: int = 16, lr: float = DESK_LR,
             no_maps: bool = False, sample_steps: int = 50, eta: float = 1.0,
             seed: int | None = None, log=None) -> DeskResult:
    """Train on the training split, sample the test split, score against both references."""
    seed = data.seed if seed is None else seed
    sched = build_schedule(T)
    t0 = time.perf_counter()
    res = train_denoiser(sched, data.map_set(data.train, no_maps), Prng(seed, "train"),
                         TrainConfig(steps=steps, batch=batch, lr=lr, log_every=500),
                         NetConfig(T=T), log=log)
    t1 = time.perf_counter()
    test = data.map_set(data.test, no_maps)
    pred = sample_set(sched, res.params, test.y, test.attention, test.attenuation,
                      SamplerConfig(sample_steps, eta), Prng(seed, "sample"))
    t2 = time.perf_counter()
    n = max(1, len(res.losses) // 10)
    return DeskResult(
        losses=res.losses, lead=float(np.mean(res.losses[:n])), trail=float(np.mean(res.losses[-n:])),
        test_mae=mae(denormalize(pred), denormalize(test.x0)), baseline_mae=mean_image_mae(data),
        train_seconds=t1 - t0, sample_seconds=t2 - t1, pred=pred, params=res.params,
    )
