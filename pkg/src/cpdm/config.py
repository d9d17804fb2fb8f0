"""Run configuration: defaults, JSON loading and flag overrides."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from cpdm.errors import ConfigError

CONFIG_ENV = "CPDM_CONFIG"


@dataclass
class EmaSettings:
    enabled: bool = True
    decay: float = 0.995
    start: int = 300
    interval: int = 1


@dataclass
class RunConfig:
    seed: int = 1
    # data
    image_size: int = 32
    n_studies: int = 200
    pairs_per_study: int = 10
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    ct_max: int = 2**11 - 1
    pet_max: int = 2**15 - 1
    # maps
    lac_table: str | None = None
    slope: float = 1.0
    intercept: float = -1024.0
    slice_thickness_cm: float = 1.0
    map_source: str = "truth"          # attention map used at sampling time
    # segmenter
    seg_steps: int = 600
    seg_lr: float = 1e-3
    seg_eval_every: int = 50
    # diffusion
    T: int = 1000
    s_var: float = 1.0
    loss: str = "l1"
    weighting: str = "none"
    lr: float = 1e-4
    batch: int = 16
    train_steps: int = 3000
    plateau: bool = True
    ema: EmaSettings = field(default_factory=EmaSettings)
    no_maps: bool = False              # ablation: constant 0.5 guidance channels
    # sampling
    sample_steps: int = 200
    eta: float = 1.0
    sample_batch: int = 100

    def __post_init__(self):
        if isinstance(self.ema, dict):
            self.ema = EmaSettings(**self.ema)
        self.split = tuple(float(f) for f in self.split)
        self.validate()

    def validate(self):
        if self.T < 2:
            raise ConfigError("T must be >= 2")
        if self.s_var <= 0:
            raise ConfigError("s_var must be positive")
        if self.sample_steps < 1:
            raise ConfigError("sample_steps must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError("eta must be in [0, 1]")
        if self.loss not in ("l1", "l2"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.weighting not in ("none", "c_eps"):
            raise ConfigError(f"unknown weighting {self.weighting!r}")
        if self.map_source not in ("truth", "segmenter"):
            raise ConfigError(f"unknown map_source {self.map_source!r}")
        if self.lr <= 0 or self.batch < 1 or self.train_steps < 1:
            raise ConfigError("lr, batch and train_steps must be positive")
        if self.image_size < 16:
            raise ConfigError("image_size must be >= 16")
        if self.n_studies < 3 or self.pairs_per_study < 1:
            raise ConfigError("need >= 3 studies with >= 1 pair each")
        if len(self.split) != 3:
            raise ConfigError("split needs three fractions")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the JSON file (``path`` or ``$CPDM_CONFIG``), then overrides."""
    path = path or os.environ.get(CONFIG_ENV)
    d: dict = {}
    if path:
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError("config file must hold a JSON object")
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k.startswith("ema."):
            d.setdefault("ema", {})[k[4:]] = v
        else:
            d[k] = v
    return RunConfig.from_dict(d)
