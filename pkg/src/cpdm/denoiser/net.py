"""Small conditional convolutional residual network with manual backprop.

Architecture (defaults): 3x3 input conv to 16 channels, then residual blocks
16->16, 16->32, 32->32, 32->16, then GroupNorm/SiLU and a zero-initialised 1x1
output conv. Each block is

    GN -> SiLU -> conv3x3 -> GN -> FiLM(time) -> SiLU -> conv3x3  (+ skip)

where the skip is a 1x1 conv when the width changes. The same backbone with a
sigmoid head and no time input serves as the mask segmenter.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from cpdm.core import Prng, load_tensor, save_tensor
from cpdm.denoiser import layers as L
from cpdm.errors import ConfigError, FormatError, ShapeError

MAX_PARAMS = 200_000


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 3
    out_channels: int = 1
    widths: tuple[int, ...] = (16, 32, 32, 16)
    groups: int = 4
    emb_dim: int = 32
    use_time: bool = True
    head: str = "linear"  # or "sigmoid"
    T: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if any(w % self.groups for w in self.widths):
            raise ConfigError(f"widths {self.widths} not divisible by groups={self.groups}")
        if self.head not in ("linear", "sigmoid"):
            raise ConfigError(f"unknown head {self.head!r}")

    def blocks(self):
        w = self.widths
        return [(w[i - 1] if i else w[0], w[i]) for i in range(len(w))]


def segmenter_config(**kw) -> NetConfig:
    kw = {"in_channels": 1, "use_time": False, "head": "sigmoid", **kw}
    return NetConfig(**kw)


def build_layout(cfg: NetConfig) -> list[tuple[str, tuple[int, ...]]]:
    lay = [("in.w", (3, 3, cfg.in_channels, cfg.widths[0])), ("in.b", (cfg.widths[0],))]
    for i, (ci, co) in enumerate(cfg.blocks()):
        p = f"block{i}."
        lay += [
            (p + "gn1.g", (ci,)), (p + "gn1.b", (ci,)),
            (p + "conv1.w", (3, 3, ci, co)), (p + "conv1.b", (co,)),
            (p + "gn2.g", (co,)), (p + "gn2.b", (co,)),
        ]
        if cfg.use_time:
            lay += [(p + "film.w", (cfg.emb_dim, 2 * co)), (p + "film.b", (2 * co,))]
        lay += [(p + "conv2.w", (3, 3, co, co)), (p + "conv2.b", (co,))]
        if ci != co:
            lay += [(p + "skip.w", (1, 1, ci, co)), (p + "skip.b", (co,))]
    wl = cfg.widths[-1]
    lay += [
        ("out.gn.g", (wl,)), ("out.gn.b", (wl,)),
        ("out.w", (1, 1, wl, cfg.out_channels)), ("out.b", (cfg.out_channels,)),
    ]
    return lay


def param_count(layout) -> int:
    return sum(int(np.prod(s)) for _, s in layout)


def views(flat, layout) -> dict[str, np.ndarray]:
    out, off = {}, 0
    for name, shape in layout:
        n = int(np.prod(shape))
        out[name] = flat[off:off + n].reshape(shape)
        off += n
    if off != flat.size:
        raise ShapeError(f"flat vector has {flat.size} entries, layout needs {off}")
    return out


@dataclass
class DenoiserParams:
    config: NetConfig
    flat: np.ndarray
    ema_shadow: np.ndarray | None = None
    step_count: int = 0
    layout: list = field(init=False)

    def __post_init__(self):
        self.layout = build_layout(self.config)
        if self.flat.size != param_count(self.layout):
            raise ShapeError("parameter vector does not match layout")
        if self.ema_shadow is not None and self.ema_shadow.shape != self.flat.shape:
            raise ShapeError("EMA shadow layout differs from parameters")

    def copy(self) -> "DenoiserParams":
        shadow = None if self.ema_shadow is None else self.ema_shadow.copy()
        return DenoiserParams(self.config, self.flat.copy(), shadow, self.step_count)

    def astype(self, dtype) -> "DenoiserParams":
        shadow = None if self.ema_shadow is None else self.ema_shadow.astype(dtype)
        return DenoiserParams(self.config, self.flat.astype(dtype), shadow, self.step_count)

    def ema_view(self) -> "DenoiserParams":
        """Parameters with the EMA shadow swapped in (or self when absent)."""
        if self.ema_shadow is None:
            return self
        return DenoiserParams(self.config, self.ema_shadow, None, self.step_count)


def init_params(cfg: NetConfig, prng: Prng, zero_final: bool = True, ema: bool = False) -> DenoiserParams:
    layout = build_layout(cfg)
    n = param_count(layout)
    if n >= MAX_PARAMS:
        raise ConfigError(f"{n} parameters exceeds the desk-scale limit {MAX_PARAMS}")
    flat = np.zeros(n, dtype=np.float32)
    P = views(flat, layout)
    for name, shape in layout:
        if name.endswith(".g"):
            P[name][...] = 1.0
        elif name.endswith(".w") and not name.endswith("film.w"):
            if name == "out.w" and zero_final:
                continue
            fan_in = int(np.prod(shape[:-1]))
            P[name][...] = prng.gaussian(shape) / np.float32(np.sqrt(fan_in))
    return DenoiserParams(cfg, flat, flat.copy() if ema else None, 0)


class ConvResNet:
    """Stateless forward/backward over a :class:`DenoiserParams`."""

    def __init__(self, config: NetConfig):
        self.config = config
        self.layout = build_layout(config)

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[-1] != self.config.in_channels:
            raise ShapeError(
                f"expected input (N, H, W, {self.config.in_channels}), got {x.shape}")

    def forward(self, params: DenoiserParams, x, t=None):
        cfg = self.config
        self._check_input(x)
        P = views(params.flat, self.layout)
        dtype = params.flat.dtype
        x = x.astype(dtype, copy=False)
        emb = None
        if cfg.use_time:
            if t is None:
                raise ConfigError("time-conditioned network needs t")
            t = np.broadcast_to(np.asarray(t), (x.shape[0],))
            emb = L.time_embedding(t, cfg.T, cfg.emb_dim).astype(dtype)

        caches = {}
        h, caches["in"] = L.conv2d_forward(x, P["in.w"], P["in.b"])
        for i, (ci, co) in enumerate(cfg.blocks()):
            p = f"block{i}."
            c = {}
            a, c["gn1"] = L.groupnorm_forward(h, P[p + "gn1.g"], P[p + "gn1.b"], cfg.groups)
            a, c["act1"] = L.silu_forward(a)
            a, c["conv1"] = L.conv2d_forward(a, P[p + "conv1.w"], P[p + "conv1.b"])
            a, c["gn2"] = L.groupnorm_forward(a, P[p + "gn2.g"], P[p + "gn2.b"], cfg.groups)
            if cfg.use_time:
                ss, c["lin"] = L.linear_forward(emb, P[p + "film.w"], P[p + "film.b"])
                a, c["film"] = L.film_forward(a, ss[:, :co], ss[:, co:])
            a, c["act2"] = L.silu_forward(a)
            a, c["conv2"] = L.conv2d_forward(a, P[p + "conv2.w"], P[p + "conv2.b"])
            if ci != co:
                s, c["skip"] = L.conv2d_forward(h, P[p + "skip.w"], P[p + "skip.b"])
            else:
                s = h
            h = s + a
            caches[p] = c
        a, caches["out.gn"] = L.groupnorm_forward(h, P["out.gn.g"], P["out.gn.b"], cfg.groups)
        a, caches["out.act"] = L.silu_forward(a)
        out, caches["out.conv"] = L.conv2d_forward(a, P["out.w"], P["out.b"])
        if cfg.head == "sigmoid":
            out, caches["head"] = L.sigmoid_forward(out)
        return out, caches

    def backward(self, params: DenoiserParams, caches, dout) -> np.ndarray:
        cfg = self.config
        grad = np.zeros_like(params.flat)
        G = views(grad, self.layout)
        dout = dout.astype(params.flat.dtype, copy=False)
        if cfg.head == "sigmoid":
            dout = L.sigmoid_backward(caches["head"], dout)
        da, G["out.w"][...], G["out.b"][...] = L.conv2d_backward(caches["out.conv"], dout)
        da = L.silu_backward(caches["out.act"], da)
        dh, G["out.gn.g"][...], G["out.gn.b"][...] = L.groupnorm_backward(caches["out.gn"], da)
        for i in reversed(range(len(cfg.widths))):
            ci, co = cfg.blocks()[i]
            p = f"block{i}."
            c = caches[p]
            if ci != co:
                ds, G[p + "skip.w"][...], G[p + "skip.b"][...] = L.conv2d_backward(c["skip"], dh)
            else:
                ds = dh
            da, G[p + "conv2.w"][...], G[p + "conv2.b"][...] = L.conv2d_backward(c["conv2"], dh)
            da = L.silu_backward(c["act2"], da)
            if cfg.use_time:
                da, dsc, dsh = L.film_backward(c["film"], da)
                _, G[p + "film.w"][...], G[p + "film.b"][...] = L.linear_backward(
                    c["lin"], np.concatenate([dsc, dsh], axis=1))
            da, G[p + "gn2.g"][...], G[p + "gn2.b"][...] = L.groupnorm_backward(c["gn2"], da)
            da, G[p + "conv1.w"][...], G[p + "conv1.b"][...] = L.conv2d_backward(c["conv1"], da)
            da = L.silu_backward(c["act1"], da)
            da, G[p + "gn1.g"][...], G[p + "gn1.b"][...] = L.groupnorm_backward(c["gn1"], da)
            dh = ds + da
        _, G["in.w"][...], G["in.b"][...] = L.conv2d_backward(caches["in"], dh)
        return grad


def _batched(x):
    x = np.asarray(x)
    return (x[None], True) if x.ndim == 3 else (x, False)


def denoise(params: DenoiserParams, x_cat, t=None) -> np.ndarray:
    """Evaluate the network on ``(H, W, C)`` or ``(N, H, W, C)`` input."""
    xb, single = _batched(x_cat)
    out, _ = ConvResNet(params.config).forward(params, xb, t)
    return out[0] if single else out


def backprop(params: DenoiserParams, x_cat, t, upstream) -> np.ndarray:
    """Gradient of ``sum(upstream * denoise(params, x_cat, t))`` w.r.t. the flat parameters."""
    xb, single = _batched(x_cat)
    up = np.asarray(upstream)[None] if single else np.asarray(upstream)
    net = ConvResNet(params.config)
    out, caches = net.forward(params, xb, t)
    if up.shape != out.shape:
        raise ShapeError(f"upstream shape {up.shape} != output shape {out.shape}")
    return net.backward(params, caches, up)


def save_checkpoint(params: DenoiserParams, path, lr: float | None = None) -> None:
    """Write ``<path>.cpdt`` (flat vector), optional ``<path>.ema.cpdt`` and ``<path>.json``."""
    path = Path(path)
    save_tensor(params.flat, path.with_suffix(".cpdt"))
    if params.ema_shadow is not None:
        save_tensor(params.ema_shadow, path.with_suffix(".ema.cpdt"))
    meta = {
        "layout": [[name, list(shape)] for name, shape in params.layout],
        "step_count": params.step_count,
        "lr": lr,
        "ema": params.ema_shadow is not None,
        "config": {**asdict(params.config), "widths": list(params.config.widths)},
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_checkpoint(path) -> tuple[DenoiserParams, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    cfg = NetConfig(**{**meta["config"], "widths": tuple(meta["config"]["widths"])})
    flat = load_tensor(path.with_suffix(".cpdt"))
    if flat.ndim != 1:
        raise FormatError("checkpoint parameters must be a flat vector", 7)
    layout = build_layout(cfg)
    if [[n, list(s)] for n, s in layout] != meta["layout"]:
        raise ShapeError("checkpoint layout does not match its network config")
    shadow = load_tensor(path.with_suffix(".ema.cpdt")) if meta["ema"] else None
    return DenoiserParams(cfg, flat, shadow, int(meta["step_count"])), meta
