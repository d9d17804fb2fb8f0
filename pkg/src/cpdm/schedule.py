"""Brownian-bridge schedule grids and per-step-pair coefficients.

The bridge runs from the target image ``x0`` (step 0) to the source image
``y`` (step T). With ``m_t = t / T`` and variance ``delta_t``, the marginal is

    x_t ~ N((1 - m_t) x0 + m_t y, delta_t I).

For any ordered pair ``s < t`` the forward kernel ``x_t | x_s, y`` and the
posterior ``x_s | x_t, x0, y`` are Gaussian; :func:`pair_params` returns both
in closed form. With ``s = t - 1`` these are the usual single-step formulas.
All quantities are float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cpdm.errors import ConfigError


@dataclass(frozen=True)
class BridgeSchedule:
    T: int
    s_var: float
    m: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        self.m.setflags(write=False)
        self.delta.setflags(write=False)


@dataclass(frozen=True)
class PairParams:
    """Coefficients for the hop ``t -> s``.

    The posterior mean is ``A x_t + B x0 + C y`` and, after substituting
    ``x0 = x_t - target``, ``c_x x_t + c_y y - c_eps target``.
    """

    s: int
    t: int
    a: float
    b: float
    delta_cond: float
    A: float
    B: float
    C: float
    c_x: float
    c_y: float
    c_eps: float
    tilde_delta: float
    terminal: bool


def build_schedule(T: int, s_var: float = 1.0) -> BridgeSchedule:
    """``m_t = t/T`` and ``delta_t = 2 s_var m_t (1 - m_t)`` for t = 0..T."""
    if int(T) != T or T < 2:
        raise ConfigError(f"T must be an integer >= 2, got {T}")
    if not s_var > 0:
        raise ConfigError(f"s_var must be > 0, got {s_var}")
    T = int(T)
    m = np.arange(T + 1, dtype=np.float64) / T
    delta = 2.0 * s_var * m * (1.0 - m)
    # pin the endpoints exactly
    m[0], m[T] = 0.0, 1.0
    delta[0] = delta[T] = 0.0
    return BridgeSchedule(T=T, s_var=float(s_var), m=m, delta=delta)


def pair_params(sched: BridgeSchedule, s: int, t: int) -> PairParams:
    if not (0 <= s < t <= sched.T):
        raise IndexError(f"need 0 <= s < t <= T={sched.T}, got s={s}, t={t}")
    m_s, m_t = float(sched.m[s]), float(sched.m[t])
    d_s, d_t = float(sched.delta[s]), float(sched.delta[t])

    if m_t == 1.0:
        # x_T = y deterministically, so conditioning on it is vacuous and the
        # posterior falls back to the bridge marginal at s given (x0, y).
        A, B, C = 0.0, 1.0 - m_s, m_s
        return PairParams(
            s=s, t=t, a=0.0, b=1.0, delta_cond=d_t,
            A=A, B=B, C=C, c_x=A + B, c_y=C, c_eps=B,
            tilde_delta=d_s, terminal=True,
        )

    assert d_t > 0.0, "delta_t vanishes before the terminal step"
    a = (1.0 - m_t) / (1.0 - m_s)
    b = m_t - a * m_s
    d_ts = d_t - a * a * d_s
    A = d_s / d_t * a
    B = (1.0 - m_s) * d_ts / d_t
    C = m_s - m_t * a * d_s / d_t
    tilde = d_ts * d_s / d_t
    return PairParams(
        s=s, t=t, a=a, b=b, delta_cond=d_ts,
        A=A, B=B, C=C, c_x=A + B, c_y=C, c_eps=B,
        tilde_delta=max(tilde, 0.0), terminal=False,
    )


def consecutive_table(sched: BridgeSchedule) -> list[dict]:
    """One row per step: grid values and the coefficients of the hop t -> t-1.

    Row 0 has no incoming hop and carries NaN coefficients.
    """
    rows = []
    for t in range(sched.T + 1):
        row = {"t": t, "m_t": float(sched.m[t]), "delta_t": float(sched.delta[t])}
        if t == 0:
            row.update(c_x=float("nan"), c_y=float("nan"), c_eps=float("nan"), tilde_delta=float("nan"))
        else:
            p = pair_params(sched, t - 1, t)
            row.update(c_x=p.c_x, c_y=p.c_y, c_eps=p.c_eps, tilde_delta=p.tilde_delta)
        rows.append(row)
    return rows
