"""Image-quality metrics in denormalized pixel space, plus mask IoU."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from cpdm.errors import ConfigError, ShapeError

PET_MAX = 2**15 - 1


def _pair(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def denormalize(x, max_value=PET_MAX) -> np.ndarray:
    """``[-1, 1] -> [0, max_value]``."""
    return (np.asarray(x, dtype=np.float64) + 1.0) / 2.0 * max_value


def mae(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, max_value=PET_MAX) -> float:
    """``10 log10(MAX^2 / MSE)`` in dB; ``inf`` when the images are identical."""
    if max_value <= 0:
        raise ConfigError("max_value must be positive")
    e = mse(a, b)
    if e == 0.0:
        return math.inf
    return float(10.0 * math.log10(max_value * max_value / e))


@dataclass(frozen=True)
class SsimConfig:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter_valid(img, g):
    """Separable valid-mode filtering of a 2-D image."""
    k = g.size
    rows = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def ssim_map(a, b, max_value=PET_MAX, cfg: SsimConfig = SsimConfig()) -> np.ndarray:
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise ShapeError("ssim expects 2-D images")
    if min(a.shape) < cfg.window:
        raise ConfigError(f"image {a.shape} smaller than the {cfg.window}x{cfg.window} window")
    g = gaussian_window(cfg.window, cfg.sigma)
    c1 = (cfg.k1 * max_value) ** 2
    c2 = (cfg.k2 * max_value) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a * mu_a
    sbb = _filter_valid(b * b, g) - mu_b * mu_b
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return num / den


def ssim(a, b, max_value=PET_MAX, cfg: SsimConfig = SsimConfig()) -> float:
    """Mean SSIM over all valid Gaussian-window positions."""
    return float(np.clip(np.mean(ssim_map(a, b, max_value, cfg)), -1.0, 1.0))


def iou(pred_mask, truth_mask, binarize_threshold=0.5) -> float:
    """``|A & B| / |A | B|`` after binarizing both masks; 1 when both are empty."""
    p, t = _pair(pred_mask, truth_mask)
    p, t = p > binarize_threshold, t > binarize_threshold
    union = np.count_nonzero(p | t)
    if union == 0:
        return 1.0
    return float(np.count_nonzero(p & t) / union)


def _num(x):
    """JSON-safe float: infinities become strings."""
    if x is None:
        return None
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


@dataclass
class EvalReport:
    per_image: list[dict] = field(default_factory=list)
    max_value: float = PET_MAX
    perceptual: float | None = None

    def add(self, index, pred, truth, pred_mask=None, truth_mask=None, ssim_cfg=SsimConfig(),
            **extra) -> dict:
        """Score one normalized prediction against its normalized target."""
        a, b = denormalize(pred, self.max_value), denormalize(truth, self.max_value)
        row = {"index": int(index), **extra,
               "mae": mae(a, b), "psnr_db": psnr(a, b, self.max_value),
               "ssim": ssim(a, b, self.max_value, ssim_cfg)}
        if pred_mask is not None and truth_mask is not None:
            row["iou"] = iou(pred_mask, truth_mask)
        self.per_image.append(row)
        return row

    def aggregate(self) -> dict:
        if not self.per_image:
            return {}
        has_iou = all("iou" in r for r in self.per_image)
        keys = ["mae", "psnr_db", "ssim"] + (["iou"] if has_iou else [])
        agg = {k: float(np.mean([r[k] for r in self.per_image])) for k in keys}
        agg["n"] = len(self.per_image)
        return agg

    def to_json(self) -> str:
        def clean(d):
            return {k: _num(v) if isinstance(v, float) else v for k, v in d.items()}
        doc = {"max_value": self.max_value, "perceptual": self.perceptual,
               "aggregate": clean(self.aggregate()),
               "per_image": [clean(r) for r in self.per_image]}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        if not self.per_image:
            return ""
        buf = io.StringIO()
        cols = list(dict.fromkeys(k for r in self.per_image for k in r))
        w = csv.DictWriter(buf, fieldnames=cols, restval="", lineterminator="\n")
        w.writeheader()
        for r in self.per_image:
            w.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in r.items()})
        return buf.getvalue()
