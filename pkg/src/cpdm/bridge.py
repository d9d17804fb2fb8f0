"""Guided Brownian-bridge diffusion: forward noising, training loss, reverse sampling.

Images are float32 arrays of shape ``(H, W)`` or batches ``(N, H, W)``. The
noise predictor always sees the channel-wise concatenation
``(x_t, attention, attenuation)`` and returns one channel.

A *model* is anything callable as ``model(x_cat, t) -> eps_hat`` with
``x_cat`` of shape ``(N, H, W, 3)`` and output ``(N, H, W, 1)``. For training
it must also provide ``forward(x_cat, t) -> (out, cache)`` and
``backward(cache, dout) -> flat gradient``; :class:`NetDenoiser` does both.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cpdm.core import DTYPE, Prng, as_tensor
from cpdm.denoiser.net import ConvResNet, DenoiserParams
from cpdm.errors import ConfigError, RangeError, ShapeError
from cpdm.schedule import BridgeSchedule, PairParams, pair_params


@dataclass(frozen=True)
class GuidancePair:
    attention: np.ndarray
    attenuation: np.ndarray

    def __post_init__(self):
        att, mu = as_tensor(self.attention), as_tensor(self.attenuation)
        if att.shape != mu.shape:
            raise ShapeError(f"guidance maps differ in shape: {att.shape} vs {mu.shape}")
        if att.min() < 0.0 or att.max() > 1.0:
            raise RangeError("attention map must lie in [0, 1]")
        if mu.min() <= 0.0 or mu.max() > 1.0:
            raise RangeError("attenuation map must lie in (0, 1]")
        object.__setattr__(self, "attention", att)
        object.__setattr__(self, "attenuation", mu)

    @classmethod
    def constant(cls, shape, value=0.5) -> "GuidancePair":
        """Uninformative maps, used for the no-guidance ablation."""
        c = np.full(shape, value, dtype=DTYPE)
        return cls(c, c.copy())


def make_grid(T: int, steps: int) -> list[int]:
    """Descending step indices ``T = tau_K > ... > tau_1 >= 1``.

    Rounded from ``linspace(T, 1, steps)`` and deduplicated; the final hop to
    step 0 is implicit.
    """
    if not 1 <= steps <= T:
        raise ConfigError(f"sampler steps must be in [1, {T}], got {steps}")
    raw = np.rint(np.linspace(T, 1, steps)).astype(int)
    grid = sorted(set(raw.tolist()) | {T} | ({1} if steps > 1 else set()), reverse=True)
    return grid


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 200
    eta: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must be in [0, 1], got {self.eta}")

    def grid(self, T: int) -> list[int]:
        return make_grid(T, self.steps)


def check_grid(grid, T):
    g = list(grid)
    if not g or g[0] != T or g[-1] < 1 or any(a <= b for a, b in zip(g, g[1:])):
        raise ConfigError(f"grid must be strictly decreasing from T={T} to >= 1: {g[:5]}...")
    return g


def _per_item(values, t, ndim):
    """Look up ``values[t]`` and shape it to broadcast against an ndim-array."""
    v = np.asarray(values, dtype=np.float64)[np.asarray(t)]
    return v.reshape(v.shape + (1,) * (ndim - v.ndim))


def _check_same(*arrays):
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise ShapeError(f"shape mismatch: {shape} vs {a.shape}")


def _check_t(sched, t):
    t = np.asarray(t)
    if t.size and (t.min() < 0 or t.max() > sched.T):
        raise IndexError(f"t out of range [0, {sched.T}]")


def forward_sample(sched: BridgeSchedule, x0, y, t, eps) -> np.ndarray:
    """``x_t = (1 - m_t) x0 + m_t y + sqrt(delta_t) eps``; ``t`` may be per item."""
    x0, y, eps = as_tensor(x0), as_tensor(y), as_tensor(eps)
    _check_same(x0, y, eps)
    _check_t(sched, t)
    m = _per_item(sched.m, t, x0.ndim)
    sd = _per_item(np.sqrt(sched.delta), t, x0.ndim)
    # float64 arithmetic regardless of whether t is a scalar or per item
    return as_tensor((1.0 - m) * x0.astype(np.float64) + m * y + sd * eps)


def noise_target(sched: BridgeSchedule, x0, y, t, eps) -> np.ndarray:
    """Regression target ``m_t (y - x0) + sqrt(delta_t) eps`` (equals ``x_t - x0``)."""
    x0, y, eps = as_tensor(x0), as_tensor(y), as_tensor(eps)
    _check_same(x0, y, eps)
    _check_t(sched, t)
    m = _per_item(sched.m, t, x0.ndim)
    sd = _per_item(np.sqrt(sched.delta), t, x0.ndim)
    return as_tensor(m * (y.astype(np.float64) - x0) + sd * eps)


def concat_input(x_t, guidance: GuidancePair) -> np.ndarray:
    """Stack ``(x_t, attention, attenuation)`` on a trailing channel axis."""
    att = np.broadcast_to(guidance.attention, x_t.shape)
    mu = np.broadcast_to(guidance.attenuation, x_t.shape)
    return np.stack([x_t, att, mu], axis=-1).astype(DTYPE)


class NetDenoiser:
    """Adapter exposing a :class:`ConvResNet` through the model protocol."""

    def __init__(self, params: DenoiserParams):
        self.params = params
        self.net = ConvResNet(params.config)

    def __call__(self, x_cat, t):
        out, _ = self.net.forward(self.params, x_cat, t)
        return out

    def forward(self, x_cat, t):
        return self.net.forward(self.params, x_cat, t)

    def backward(self, cache, dout):
        return self.net.backward(self.params, cache, dout)


def _unchecked(attention, attenuation) -> GuidancePair:
    # range checks happen once per dataset, not on every step
    g = GuidancePair.__new__(GuidancePair)
    object.__setattr__(g, "attention", attention)
    object.__setattr__(g, "attenuation", attenuation)
    return g


def predict_noise(model, x_t, guidance: GuidancePair, t) -> np.ndarray:
    x_t = as_tensor(x_t)
    single = x_t.ndim == 2
    xb = x_t[None] if single else x_t
    att, mu = guidance.attention, guidance.attenuation
    if single:
        att, mu = att[None], mu[None]
    eps = np.asarray(model(concat_input(xb, _unchecked(att, mu)), t))[..., 0]
    return eps[0] if single else eps


@dataclass(frozen=True)
class LossConfig:
    kind: str = "l1"          # "l1" (training algorithm) or "l2" (simplified ELBO)
    weighting: str = "none"   # "none" or "c_eps"

    def __post_init__(self):
        if self.kind not in ("l1", "l2"):
            raise ConfigError(f"unknown loss {self.kind!r}")
        if self.weighting not in ("none", "c_eps"):
            raise ConfigError(f"unknown weighting {self.weighting!r}")


@dataclass(frozen=True)
class Batch:
    x0: np.ndarray
    y: np.ndarray
    attention: np.ndarray
    attenuation: np.ndarray

    def __len__(self):
        return self.x0.shape[0]


@dataclass
class LossResult:
    loss: float
    grads: np.ndarray | None
    t: np.ndarray


def c_eps_table(sched: BridgeSchedule) -> np.ndarray:
    """``c_eps`` of the consecutive hop ``t-1 <- t`` for each t (entry 0 unused)."""
    out = np.zeros(sched.T + 1)
    for t in range(1, sched.T + 1):
        out[t] = pair_params(sched, t - 1, t).c_eps
    return out


def training_loss(sched: BridgeSchedule, model, batch: Batch, prng: Prng | None,
                  cfg: LossConfig = LossConfig(), *, t=None, eps=None,
                  weights_table=None) -> LossResult:
    """Noise-prediction loss on one batch, with gradients when the model supports them.

    ``t`` ~ Uniform{1..T} and ``eps`` ~ N(0, I) are drawn from ``prng`` unless
    given. The loss is the mean over items and pixels of ``|target - eps_hat|``
    (or its square), optionally weighted per item by ``c_eps(t)``.
    """
    n = len(batch)
    if n == 0:
        raise ConfigError("empty batch")
    _check_same(batch.x0, batch.y, batch.attention, batch.attenuation)
    if t is None:
        t = prng.integers(1, sched.T + 1, size=n)
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,))
    if eps is None:
        eps = prng.gaussian(batch.x0.shape)
    x_t = forward_sample(sched, batch.x0, batch.y, t, eps)
    target = noise_target(sched, batch.x0, batch.y, t, eps)
    x_cat = concat_input(x_t, _unchecked(batch.attention, batch.attenuation))

    has_grad = hasattr(model, "forward") and hasattr(model, "backward")
    if has_grad:
        out, cache = model.forward(x_cat, t)
    else:
        out, cache = np.asarray(model(x_cat, t)), None
    resid = target.astype(np.float64) - out[..., 0].astype(np.float64)

    if cfg.weighting == "c_eps":
        table = c_eps_table(sched) if weights_table is None else weights_table
        w = table[t].reshape((n,) + (1,) * (resid.ndim - 1))
    else:
        w = np.ones((n,) + (1,) * (resid.ndim - 1))
    count = resid.size
    if cfg.kind == "l1":
        loss = float(np.sum(w * np.abs(resid)) / count)
        dout = -w * np.sign(resid) / count
    else:
        loss = float(np.sum(w * resid * resid) / count)
        dout = -2.0 * w * resid / count

    grads = model.backward(cache, dout[..., None]) if has_grad else None
    return LossResult(loss=loss, grads=grads, t=np.asarray(t))


def reverse_step(sched: BridgeSchedule, params: PairParams, x_t, y, guidance: GuidancePair,
                 model, z, eta: float) -> np.ndarray:
    """One hop ``x_t -> x_s``: ``c_x x_t + c_y y - c_eps eps_hat + eta sqrt(tilde_delta) z``.

    At the terminal step the coefficients already encode
    ``(1 - m_s) x0_hat + m_s y`` with ``x0_hat = x_t - eps_hat``.
    """
    x_t, y = as_tensor(x_t), as_tensor(y)
    _check_same(x_t, y)
    if z is not None:
        z = as_tensor(z)
        _check_same(x_t, z)
    ref = pair_params(sched, params.s, params.t)
    if ref != params:
        raise ConfigError("pair parameters were not derived from this schedule")
    eps_hat = predict_noise(model, x_t, guidance, params.t)
    out = params.c_x * x_t + params.c_y * y - params.c_eps * eps_hat
    if eta > 0.0 and params.tilde_delta > 0.0 and z is not None:
        out = out + eta * np.sqrt(params.tilde_delta) * z
    return as_tensor(out)


def sample(sched: BridgeSchedule, y, guidance: GuidancePair, model, cfg: SamplerConfig,
           prng: Prng | None = None, grid=None, callback=None) -> np.ndarray:
    """Run the reverse bridge from ``x_T = y`` down to step 0.

    One model evaluation per grid index: hops ``tau_k -> tau_{k-1}`` and a
    final ``tau_1 -> 0``.
    """
    y = as_tensor(y)
    grid = check_grid(cfg.grid(sched.T) if grid is None else grid, sched.T)
    if cfg.eta > 0.0 and prng is None:
        raise ConfigError("stochastic sampling (eta > 0) needs a prng")
    x = y.copy()
    targets = grid[1:] + [0]
    for t, s in zip(grid, targets):
        p = pair_params(sched, s, t)
        z = prng.gaussian(x.shape) if cfg.eta > 0.0 and p.tilde_delta > 0.0 else None
        x = reverse_step(sched, p, x, y, guidance, model, z, cfg.eta)
        if callback is not None:
            callback(t, s, x)
    return x
