"""Synthetic paired CT/PET-like images with known ground truth.

The source ("CT") is a dark field with 2-4 non-overlapping ellipses of three
tissue classes and a mild linear shading. The target ("PET") is a
deterministic function of the source and the latent ellipse list: a low
physiological background proportional to the blurred source, plus one
Gaussian blob per active ellipse whose half-maximum contour is exactly that
ellipse. The truth mask is the union of the active ellipses.

Raw intensities use scanner-like units: CT in [0, 2^11 - 1] (HU = raw - 1024)
and PET in [0, 2^15 - 1].
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from cpdm.core import DTYPE, Prng, as_tensor, load_tensor, save_tensor
from cpdm.errors import ConfigError, RangeError

CT_MAX = 2**11 - 1
PET_MAX = 2**15 - 1

BACKGROUND_RAW = 24.0                     # HU -1000, air
TISSUE_RAW = (900.0, 1100.0, 1700.0)      # HU -124 (fat), 76 (soft), 676 (bone)
BLOB_AMPLITUDE = (0.0, 0.75, 0.35)        # relative to PET_MAX, per tissue class
ACTIVE_TISSUES = (1, 2)
PET_BACKGROUND_GAIN = 0.12
PET_BLUR_SIGMA = 1.5
MIN_SIZE = 16


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    ax: float
    ay: float
    angle: float
    tissue: int
    active: bool


@dataclass(frozen=True)
class PairSpec:
    size: int
    ellipses: tuple[Ellipse, ...]
    shade_x: float = 0.0
    shade_y: float = 0.0

    def to_json(self) -> dict:
        return {"size": self.size, "shade_x": self.shade_x, "shade_y": self.shade_y,
                "ellipses": [asdict(e) for e in self.ellipses]}

    @classmethod
    def from_json(cls, d) -> "PairSpec":
        return cls(size=int(d["size"]), shade_x=float(d["shade_x"]), shade_y=float(d["shade_y"]),
                   ellipses=tuple(Ellipse(**e) for e in d["ellipses"]))


@dataclass
class PairedSample:
    y: np.ndarray
    x0: np.ndarray
    truth_mask: np.ndarray
    raw_ct: np.ndarray
    raw_pet: np.ndarray
    study_id: str
    spec: PairSpec | None = None


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.8
    val: float = 0.1
    test: float = 0.1

    def __post_init__(self):
        fr = (self.train, self.val, self.test)
        if any(f < 0 for f in fr) or not math.isclose(sum(fr), 1.0, abs_tol=1e-9):
            raise ConfigError(f"split fractions must be non-negative and sum to 1, got {fr}")


def normalize(raw, max_value) -> np.ndarray:
    """Map ``[0, max_value]`` to ``[-1, 1]``."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size and (raw.min() < 0 or raw.max() > max_value):
        raise RangeError(f"raw values must lie in [0, {max_value}]")
    return as_tensor(2.0 * raw / max_value - 1.0)


def denormalize(x, max_value) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) + 1.0) / 2.0 * max_value


def _r2(e: Ellipse, size: int) -> np.ndarray:
    """Squared normalised radius of every pixel centre w.r.t. an ellipse."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - e.cx, yy - e.cy
    c, s = math.cos(e.angle), math.sin(e.angle)
    u = (dx * c + dy * s) / e.ax
    v = (-dx * s + dy * c) / e.ay
    return u * u + v * v


def render_source(spec: PairSpec) -> np.ndarray:
    """Raw CT image (integer-valued float32)."""
    n = spec.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    shade = 1.0 + spec.shade_x * (xx / n - 0.5) + spec.shade_y * (yy / n - 0.5)
    img = np.full((n, n), BACKGROUND_RAW)
    for e in spec.ellipses:
        inside = _r2(e, n) <= 1.0
        img[inside] = TISSUE_RAW[e.tissue] * shade[inside]
    return as_tensor(np.clip(np.rint(img), 0, CT_MAX))


def render_mask(spec: PairSpec) -> np.ndarray:
    mask = np.zeros((spec.size, spec.size), dtype=bool)
    for e in spec.ellipses:
        if e.active:
            mask |= _r2(e, spec.size) <= 1.0
    return as_tensor(mask)


def render_target(raw_ct, spec: PairSpec) -> np.ndarray:
    """Raw PET image from the raw CT and the latent ellipse list."""
    src = np.asarray(raw_ct, dtype=np.float64) / CT_MAX
    pet = PET_BACKGROUND_GAIN * gaussian_filter(src, PET_BLUR_SIGMA, mode="nearest")
    for e in spec.ellipses:
        if e.active:
            # half maximum exactly on the ellipse boundary (r2 == 1)
            pet += BLOB_AMPLITUDE[e.tissue] * np.exp(-math.log(2.0) * _r2(e, spec.size))
    return as_tensor(np.clip(np.rint(pet * PET_MAX), 0, PET_MAX))


def draw_spec(prng: Prng, size: int, shade=(0.0, 0.0)) -> PairSpec:
    if size < MIN_SIZE:
        raise ConfigError(f"image size must be >= {MIN_SIZE}, got {size}")
    n_ell = int(prng.integers(2, 5))
    amin, amax = 0.08 * size, 0.2 * size
    ellipses: list[Ellipse] = []
    for _ in range(100):
        if len(ellipses) == n_ell:
            break
        ax, ay = prng.uniform(amin, amax, 2)
        r = max(ax, ay)
        cx, cy = prng.uniform(r + 1.0, size - 1.0 - r, 2)
        angle = float(prng.uniform(0.0, math.pi))
        tissue = int(prng.integers(0, 3))
        if all(math.hypot(cx - e.cx, cy - e.cy) > r + max(e.ax, e.ay) + 1.0 for e in ellipses):
            ellipses.append(Ellipse(float(cx), float(cy), float(ax), float(ay), angle,
                                    tissue, tissue in ACTIVE_TISSUES))
    return PairSpec(size=size, ellipses=tuple(ellipses), shade_x=float(shade[0]), shade_y=float(shade[1]))


def render_pair(spec: PairSpec, study_id: str = "") -> PairedSample:
    raw_ct = render_source(spec)
    raw_pet = render_target(raw_ct, spec)
    return PairedSample(
        y=normalize(raw_ct, CT_MAX), x0=normalize(raw_pet, PET_MAX),
        truth_mask=render_mask(spec), raw_ct=raw_ct, raw_pet=raw_pet,
        study_id=study_id, spec=spec,
    )


def gen_pair(prng: Prng, size: int = 32, study_id: str = "", shade=None) -> PairedSample:
    if shade is None:
        shade = prng.uniform(-0.1, 0.1, 2)
    return render_pair(draw_spec(prng, size, shade), study_id)


def gen_dataset(seed: int, n_studies: int = 200, pairs_per_study: int = 10,
                size: int = 32) -> list[PairedSample]:
    """Studies share a shading profile; every study and pair has its own stream."""
    root = Prng(seed, "datagen")
    out = []
    for k in range(n_studies):
        sid = f"study{k:04d}"
        sp = root.child(sid)
        shade = sp.uniform(-0.1, 0.1, 2)
        for j in range(pairs_per_study):
            out.append(gen_pair(sp.child(f"pair{j}"), size, sid, shade))
    return out


def make_split(study_ids, spec: SplitSpec, prng: Prng) -> tuple[list[int], list[int], list[int]]:
    """Shuffle studies, cut by fraction, and return sample indices per split."""
    studies = sorted(set(study_ids))
    n = len(studies)
    if n < 3:
        raise ConfigError(f"need at least 3 studies to split, got {n}")
    n_train = int(round(spec.train * n))
    n_val = int(round(spec.val * n))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise ConfigError(f"{n} studies cannot fill every split with fractions {spec}")
    order = [studies[i] for i in prng.permutation(n)]
    which = {sid: 0 for sid in order[:n_train]}
    which.update({sid: 1 for sid in order[n_train:n_train + n_val]})
    which.update({sid: 2 for sid in order[n_train + n_val:]})
    parts: tuple[list[int], list[int], list[int]] = ([], [], [])
    for i, sid in enumerate(study_ids):
        parts[which[sid]].append(i)
    return parts


def stack(samples, attr) -> np.ndarray:
    return np.stack([getattr(s, attr) for s in samples]).astype(DTYPE)


# dataset directory ---------------------------------------------------------

def save_dataset(samples, root) -> None:
    root = Path(root)
    studies: dict[str, list] = {}
    for s in samples:
        studies.setdefault(s.study_id, [])
    for s in samples:
        pairs = studies[s.study_id]
        j = len(pairs)
        rel = Path("studies") / s.study_id
        (root / rel).mkdir(parents=True, exist_ok=True)
        entry = {"ct": str(rel / f"{j:04d}_ct.cpdt"), "pet": str(rel / f"{j:04d}_pet.cpdt"),
                 "mask": str(rel / f"{j:04d}_mask.cpdt")}
        save_tensor(s.raw_ct, root / entry["ct"])
        save_tensor(s.raw_pet, root / entry["pet"])
        save_tensor(s.truth_mask, root / entry["mask"])
        if s.spec is not None:
            entry["spec"] = s.spec.to_json()
        pairs.append(entry)
    index = {"ct_max": CT_MAX, "pet_max": PET_MAX,
             "studies": [{"id": sid, "pairs": pairs} for sid, pairs in studies.items()]}
    (root / "index.json").write_text(json.dumps(index, indent=1))


def load_dataset(root) -> list[PairedSample]:
    root = Path(root)
    index = json.loads((root / "index.json").read_text())
    ct_max, pet_max = index.get("ct_max", CT_MAX), index.get("pet_max", PET_MAX)
    out = []
    for st in index["studies"]:
        for p in st["pairs"]:
            raw_ct = load_tensor(root / p["ct"])
            raw_pet = load_tensor(root / p["pet"])
            spec = PairSpec.from_json(p["spec"]) if "spec" in p else None
            out.append(PairedSample(
                y=normalize(raw_ct, ct_max), x0=normalize(raw_pet, pet_max),
                truth_mask=load_tensor(root / p["mask"]), raw_ct=raw_ct, raw_pet=raw_pet,
                study_id=st["id"], spec=spec))
    return out


def write_pgm(t, path, lo=-1.0, hi=1.0) -> None:
    """8-bit binary PGM (P5) of a 2-D tensor, linearly mapped from [lo, hi] and clipped."""
    a = np.asarray(t, dtype=np.float64)
    if a.ndim != 2:
        raise ConfigError("PGM export needs a 2-D tensor")
    img = np.clip(np.rint((a - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())
