"""The two conditioning maps: attention (where uptake is expected) and attenuation.

The attenuation map converts raw CT to Hounsfield units, maps HU to a
511 keV linear attenuation coefficient with a piecewise-linear table, and
returns the transmission ``exp(-mu * thickness)``. The attention map is
either a thresholded ground truth or the output of a small Dice-trained
segmenter.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cpdm.core import DTYPE, Prng, as_tensor
from cpdm.denoiser.net import ConvResNet, DenoiserParams, init_params, segmenter_config
from cpdm.denoiser.optim import AdamState, adam_step
from cpdm.errors import ConfigError, RangeError, ShapeError
from cpdm.metrics import iou

HU_MIN, HU_MAX = -1024.0, 3071.0
DICE_EPS = 1e-6


@dataclass(frozen=True)
class LacTable:
    """Piecewise-linear HU -> mu (1/cm), given by its values at ascending breakpoints."""

    breakpoints: tuple[float, ...] = (-1000.0, 0.0, 1000.0, 3071.0)
    mu: tuple[float, ...] = (0.0, 0.096, 0.147, 0.20913)

    def __post_init__(self):
        bp = tuple(float(b) for b in self.breakpoints)
        mu = tuple(float(m) for m in self.mu)
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "mu", mu)
        if len(bp) != len(mu) or len(bp) < 3:
            raise ConfigError("LAC table needs >= 3 breakpoints (2 segments) with one mu each")
        if any(b1 <= b0 for b0, b1 in zip(bp, bp[1:])):
            raise ConfigError("LAC breakpoints must be strictly ascending")
        if min(mu) < 0.0:
            raise ConfigError("LAC values must be non-negative")

    @property
    def segments(self) -> list[tuple[float, float]]:
        """Per-segment ``(alpha, beta)`` with ``mu = alpha * HU + beta``."""
        out = []
        for (h0, h1), (m0, m1) in zip(zip(self.breakpoints, self.breakpoints[1:]),
                                      zip(self.mu, self.mu[1:])):
            alpha = (m1 - m0) / (h1 - h0)
            out.append((alpha, m0 - alpha * h0))
        return out

    def __call__(self, hu) -> np.ndarray:
        hu = np.clip(np.asarray(hu, dtype=np.float64), self.breakpoints[0], self.breakpoints[-1])
        return np.interp(hu, self.breakpoints, self.mu)

    def to_json(self) -> dict:
        return {"breakpoints": list(self.breakpoints), "mu_at_breakpoints": list(self.mu)}

    @classmethod
    def from_json(cls, d, tol=1e-9) -> "LacTable":
        """Accepts ``mu_at_breakpoints`` or per-segment ``alpha``/``beta`` lists."""
        bp = [float(b) for b in d["breakpoints"]]
        if "mu_at_breakpoints" in d:
            return cls(tuple(bp), tuple(d["mu_at_breakpoints"]))
        alpha, beta = d.get("alpha"), d.get("beta")
        if alpha is None or beta is None or len(alpha) != len(bp) - 1 or len(beta) != len(bp) - 1:
            raise ConfigError("LAC JSON needs mu_at_breakpoints or one alpha/beta per segment")
        mu = [alpha[0] * bp[0] + beta[0]]
        for i in range(len(alpha)):
            end = alpha[i] * bp[i + 1] + beta[i]
            if i + 1 < len(alpha):
                nxt = alpha[i + 1] * bp[i + 1] + beta[i + 1]
                if abs(nxt - end) > tol * max(1.0, abs(end)):
                    raise ConfigError(f"LAC table discontinuous at HU {bp[i + 1]}: {end} vs {nxt}")
            mu.append(end)
        return cls(tuple(bp), tuple(mu))

    @classmethod
    def load(cls, path) -> "LacTable":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read LAC table {path}: {e}") from e
        return cls.from_json(d)


def attenuation_map(ct_raw, slope: float = 1.0, intercept: float = -1024.0,
                    table: LacTable = LacTable(), slice_thickness_cm: float = 1.0) -> np.ndarray:
    """Transmission ``exp(-mu(HU) * thickness)`` with ``HU = slope * raw + intercept``."""
    raw = np.asarray(ct_raw, dtype=np.float64)
    if raw.size and raw.min() < 0:
        raise RangeError("raw CT values must be non-negative")
    if slice_thickness_cm <= 0:
        raise ConfigError("slice thickness must be positive")
    hu = slope * raw + intercept
    return as_tensor(np.exp(-table(hu) * slice_thickness_cm))


def attention_truth(pet, threshold: float) -> np.ndarray:
    """Binary mask of ``pet > threshold`` (normalized intensities)."""
    return as_tensor(np.asarray(pet) > threshold)


def default_threshold(pet, q: float = 0.90) -> float:
    """The ``q`` quantile of the pixels above the image floor (-1); -1 when none are."""
    p = np.asarray(pet, dtype=np.float64)
    pos = p[p > -1.0]
    return float(np.quantile(pos, q)) if pos.size else -1.0


@dataclass(frozen=True)
class MaskPair:
    predicted: np.ndarray
    truth: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.predicted, dtype=np.float64)
        t = np.asarray(self.truth, dtype=np.float64)
        if p.shape != t.shape:
            raise ShapeError(f"mask shapes differ: {p.shape} vs {t.shape}")
        for name, a in (("predicted", p), ("truth", t)):
            if a.size and (a.min() < 0.0 or a.max() > 1.0):
                raise RangeError(f"{name} mask must lie in [0, 1]")
        object.__setattr__(self, "predicted", p)
        object.__setattr__(self, "truth", t)


def _dice_terms(p, g):
    axes = tuple(range(p.ndim - 2, p.ndim))
    inter = (p * g).sum(axis=axes)
    total = p.sum(axis=axes) + g.sum(axis=axes)
    return inter, total


def dice_loss(m: MaskPair) -> float:
    """``1 - (2|P & G| + eps) / (|P| + |G| + eps)`` per image, averaged over a batch."""
    inter, total = _dice_terms(m.predicted, m.truth)
    return float(np.mean(1.0 - (2.0 * inter + DICE_EPS) / (total + DICE_EPS)))


def dice_loss_grad(m: MaskPair) -> np.ndarray:
    """Gradient of :func:`dice_loss` with respect to ``m.predicted``."""
    p, g = m.predicted, m.truth
    inter, total = _dice_terms(p, g)
    n = 1 if p.ndim == 2 else p.shape[0]
    num = 2.0 * inter + DICE_EPS
    den = total + DICE_EPS
    num, den = num[..., None, None], den[..., None, None]
    return -(2.0 * g * den - num) / (den * den) / n


@dataclass
class SegmenterConfig:
    steps: int = 600
    batch: int = 16
    lr: float = 1e-3
    eval_every: int = 50


@dataclass
class SegmenterResult:
    params: DenoiserParams
    best_iou: float
    best_step: int
    history: list[tuple[int, float]] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)


def predict_masks(params: DenoiserParams, ct, batch: int = 64) -> np.ndarray:
    """Soft masks in (0, 1) for normalized CT images ``(N, H, W)``."""
    net = ConvResNet(params.config)
    ct = as_tensor(ct)
    out = [net.forward(params, ct[i:i + batch, ..., None])[0][..., 0]
           for i in range(0, ct.shape[0], batch)]
    return as_tensor(np.concatenate(out)) if out else np.zeros_like(ct)


def mean_iou(pred, truth) -> float:
    return float(np.mean([iou(p, t) for p, t in zip(pred, truth)]))


def train_segmenter(train_ct, train_mask, val_ct, val_mask, prng: Prng,
                    cfg: SegmenterConfig = SegmenterConfig(), net_cfg=None,
                    log=None) -> SegmenterResult:
    """Dice-loss training; returns the parameters with the best validation IoU.

    Validation runs every ``cfg.eval_every`` steps and after the last step.
    """
    train_ct, train_mask = as_tensor(train_ct), as_tensor(train_mask)
    val_ct, val_mask = as_tensor(val_ct), as_tensor(val_mask)
    if train_ct.shape[0] == 0 or val_ct.shape[0] == 0:
        raise ConfigError("segmenter needs non-empty training and validation sets")
    if train_ct.shape != train_mask.shape or val_ct.shape != val_mask.shape:
        raise ShapeError("CT and mask arrays differ in shape")
    net_cfg = net_cfg or segmenter_config()
    params = init_params(net_cfg, prng.child("init"), zero_final=False)
    net = ConvResNet(net_cfg)
    state = AdamState.zeros_like(params)
    batches = prng.child("batches")
    best = SegmenterResult(params.copy(), -1.0, 0)
    for step in range(1, cfg.steps + 1):
        idx = batches.integers(0, train_ct.shape[0], size=cfg.batch)
        out, cache = net.forward(params, train_ct[idx, ..., None])
        pair = MaskPair(out[..., 0], train_mask[idx])
        best.losses.append(dice_loss(pair))
        grads = net.backward(params, cache, dice_loss_grad(pair)[..., None])
        adam_step(params, grads, state, cfg.lr)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            score = mean_iou(predict_masks(params, val_ct), val_mask)
            best.history.append((step, score))
            if log:
                log(f"seg step {step} loss {best.losses[-1]:.4f} val_iou {score:.4f}")
            if score > best.best_iou:
                best.params, best.best_iou, best.best_step = params.copy(), score, step
    return best
