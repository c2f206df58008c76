"""Concrete block SDEs: stochastic Lorenz 96 and an Ornstein-Uhlenbeck oracle.

Lorenz 96 (one coordinate per block, multiplicative noise)::

    dX^i = ((X^{i+1} - X^{i-2}) X^{i-1} - X^i + F) dt + sigma X^i dW^i

with indices taken modulo ``d_x``. The Ornstein-Uhlenbeck model
``dX^i = -theta X^i dt + sigma_ou dW^i`` has closed-form moments and an exact
discrete-time transition, which makes it the reference for weak-order and
filtering checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .core import (BlockSde, ConfigurationError, StepKernels, TimeGrid,
                   exploded_rows)

STANDARD = "standard"
PAPER_LITERAL = "paper_literal"


@numba.njit(cache=True, inline="always")
def _l96_f(x, b, i, d, F, literal):
    ip1 = i + 1 if i + 1 < d else 0
    im1 = i - 1 if i >= 1 else d - 1
    im2 = i - 2 if i >= 2 else i - 2 + d
    if literal:
        return -x[b, im1] * x[b, im2] - x[b, ip1] - x[b, i] + F
    return (x[b, ip1] - x[b, im2]) * x[b, im1] - x[b, i] + F


@numba.njit(cache=True)
def _l96_em(x, F, sigma, h, v, literal):
    B, d = x.shape
    out = np.empty_like(x)
    for b in range(B):
        for i in range(d):
            f = _l96_f(x, b, i, d, F, literal)
            out[b, i] = x[b, i] + h * f + (sigma * x[b, i]) * v[b, i]
    return out


@numba.njit(cache=True)
def _l96_predict(x, F, h, literal):
    B, d = x.shape
    out = np.empty_like(x)
    for b in range(B):
        for i in range(d):
            out[b, i] = x[b, i] + h * _l96_f(x, b, i, d, F, literal)
    return out


@numba.njit(cache=True)
def _l96_correct(x_prev, mixed, F, sigma, h, v, start, stop, literal):
    B, d = x_prev.shape
    for b in range(B):
        for i in range(start, stop):
            f = _l96_f(mixed, b, i, d, F, literal)
            mixed[b, i] = x_prev[b, i] + h * f + (sigma * x_prev[b, i]) * v[b, i]


@numba.njit(cache=True)
def _l96_steps(x, alive, F, sigma, h, noise, sub, bound, stop_all, seq,
               literal):
    """Run ``noise.shape[0] // sub`` outer steps, checking the bound after each.

    Returns ``(x, bad, done)``: ``bad[b]`` is the 0-based outer step at which
    row ``b`` exploded (or -1) and ``done`` the number of outer steps taken.
    Dead rows stay at zero. Arithmetic matches the single-step kernels.
    """
    B, d = x.shape
    nouter = noise.shape[0] // sub
    cur = x.copy()
    nxt = np.zeros_like(cur)
    bad = np.full(B, -1, dtype=np.int64)
    for j in range(nouter):
        for s in range(sub):
            v = noise[j * sub + s]
            for b in range(B):
                if not alive[b]:
                    continue
                if seq:
                    for i in range(d):
                        nxt[b, i] = cur[b, i] + h * _l96_f(cur, b, i, d, F, literal)
                    for i in range(d):
                        f = _l96_f(nxt, b, i, d, F, literal)
                        nxt[b, i] = cur[b, i] + h * f + (sigma * cur[b, i]) * v[b, i]
                else:
                    for i in range(d):
                        f = _l96_f(cur, b, i, d, F, literal)
                        nxt[b, i] = cur[b, i] + h * f + (sigma * cur[b, i]) * v[b, i]
            cur, nxt = nxt, cur
        any_bad = False
        for b in range(B):
            if not alive[b]:
                continue
            for i in range(d):
                if not abs(cur[b, i]) <= bound:
                    bad[b] = j
                    alive[b] = False
                    any_bad = True
                    break
            if not alive[b]:
                for i in range(d):
                    cur[b, i] = 0.0
                    nxt[b, i] = 0.0
        if any_bad and stop_all:
            return cur, bad, j + 1
    return cur, bad, nouter


@numba.njit(cache=True)
def _l96_deterministic_path(x0, F, h, nsteps, pick):
    """Explicit Euler for sigma = 0; returns states at sorted grid indices ``pick``."""
    d = x0.shape[0]
    x = x0.reshape(1, d).copy()
    out = np.empty((pick.shape[0], d))
    j = 0
    while j < pick.shape[0] and pick[j] == 0:
        out[j] = x[0]
        j += 1
    for n in range(1, nsteps + 1):
        x = _l96_predict(x, F, h, False)
        while j < pick.shape[0] and pick[j] == n:
            out[j] = x[0]
            j += 1
    return out


def lorenz96_drift(x: np.ndarray, F: float = 8.0) -> np.ndarray:
    """Standard Lorenz 96 drift ``(x^{i+1} - x^{i-2}) x^{i-1} - x^i + F``."""
    x = np.asarray(x, dtype=np.float64)
    return ((np.roll(x, -1, axis=-1) - np.roll(x, 2, axis=-1))
            * np.roll(x, 1, axis=-1) - x + F)


def lorenz96_drift_literal(x: np.ndarray, F: float = 8.0) -> np.ndarray:
    """The drift exactly as typeset: ``-x^{i-1} x^{i-2} - x^{i+1} - x^i + F``."""
    x = np.asarray(x, dtype=np.float64)
    return (-np.roll(x, 1, axis=-1) * np.roll(x, 2, axis=-1)
            - np.roll(x, -1, axis=-1) - x + F)


def lorenz96_diffusion_block(i: int, x: np.ndarray, sigma: float) -> np.ndarray:
    """The 1x1 block ``sigma * x^i`` (batched over leading axes)."""
    x = np.asarray(x, dtype=np.float64)
    return (sigma * x[..., i])[..., None, None]


@dataclass(frozen=True)
class Lorenz96Params:
    d_x: int = 200
    F: float = 8.0
    sigma: float = math.sqrt(0.5)
    drift: str = STANDARD

    def __post_init__(self):
        if self.d_x < 4:
            raise ConfigurationError("Lorenz 96 needs d_x >= 4")
        if self.sigma < 0:
            raise ConfigurationError("sigma must be non-negative")
        if self.drift not in (STANDARD, PAPER_LITERAL):
            raise ConfigurationError(f"unknown Lorenz 96 drift {self.drift!r}")

    def sde(self) -> BlockSde:
        F, sigma, d = float(self.F), float(self.sigma), self.d_x
        literal = self.drift == PAPER_LITERAL
        full = lorenz96_drift_literal if literal else lorenz96_drift

        def drift(x, t):
            return full(x, F)

        def drift_block(i, x, t):
            x = np.asarray(x)
            a, b, c, e = (x[..., (i + 1) % d], x[..., i - 2],
                          x[..., i - 1], x[..., i])
            if literal:
                return (-c * b - a - e + F)[..., None]
            return ((a - b) * c - e + F)[..., None]

        def diffusion_block(i, x, t):
            return lorenz96_diffusion_block(i, x, sigma)

        def steps(seq, x, alive, h, noise, sub, bound, stop_all):
            return _l96_steps(x, alive, F, sigma, h, noise, sub, bound,
                              stop_all, seq, literal)

        kernels = StepKernels(
            em=lambda x, t, h, v: _l96_em(x, F, sigma, h, v, literal),
            predict=lambda x, t, h: _l96_predict(x, F, h, literal),
            correct=lambda xp, mixed, tp, tn, h, v, start, stop: _l96_correct(
                xp, mixed, F, sigma, h, v, start, stop, literal),
            steps=steps,
        )
        return BlockSde(d_x=d, q=d, drift=drift, diffusion_block=diffusion_block,
                        drift_block=drift_block, kernels=kernels,
                        name="lorenz96")


SPINUP_STEP = 1e-4
SPINUP_HORIZON = 10.0
SPINUP_KICK = 0.01


def spinup_index_count() -> int:
    """Number of grid points on the spin-up path (initial point included)."""
    return int(round(SPINUP_HORIZON / SPINUP_STEP)) + 1


def spinup_states(indices: np.ndarray, d_x: int, F: float = 8.0) -> np.ndarray:
    """States of the deterministic spin-up path at the given grid indices.

    The path starts at ``F`` in every coordinate with ``0.01`` added to
    coordinate 0 and runs explicit Euler with step 1e-4 over ``[0, 10]``.
    One pass serves all indices, so no trajectory is stored. Rows follow
    the order of ``indices``.
    """
    idx = np.asarray(indices, dtype=np.int64).ravel()
    nsteps = spinup_index_count() - 1
    if idx.size and (idx.min() < 0 or idx.max() > nsteps):
        raise ConfigurationError("spin-up index out of range")
    order = np.argsort(idx, kind="stable")
    x0 = np.full(d_x, float(F))
    x0[0] += SPINUP_KICK
    states = _l96_deterministic_path(x0, float(F), SPINUP_STEP, nsteps,
                                     idx[order])
    if exploded_rows(states).any():
        raise ConfigurationError("Lorenz 96 spin-up diverged")
    out = np.empty_like(states)
    out[order] = states
    return out


def spinup_initial_conditions(rng: np.random.Generator, d_x: int,
                              F: float = 8.0, count: int = 1) -> np.ndarray:
    """``count`` states drawn uniformly from the spin-up path grid."""
    return spinup_states(rng.integers(0, spinup_index_count(), size=count),
                         d_x, F)


def spinup_initial_condition(rng: np.random.Generator, d_x: int,
                             F: float = 8.0) -> np.ndarray:
    return spinup_initial_conditions(rng, d_x, F, 1)[0]


def spinup_time_mean(d_x: int, F: float = 8.0, horizon: float = 50.0,
                     burn_in: float = 10.0, stride: int = 100) -> float:
    """Time-and-coordinate average of the deterministic path after ``burn_in``.

    Uses the spin-up start and step. The first time unit or so stays near the
    fixed point ``F``, so averaging over the spin-up window itself is biased
    towards ``F``; the burn-in removes that.
    """
    nsteps = int(round(horizon / SPINUP_STEP))
    x0 = np.full(d_x, float(F))
    x0[0] += SPINUP_KICK
    first = int(round(burn_in / SPINUP_STEP))
    pick = np.arange(first, nsteps + 1, stride, dtype=np.int64)
    return float(_l96_deterministic_path(x0, float(F), SPINUP_STEP, nsteps,
                                         pick).mean())


@dataclass(frozen=True)
class OuParams:
    d_x: int = 1
    theta: float = 1.0
    sigma_ou: float = 0.5

    def __post_init__(self):
        if self.d_x < 1:
            raise ConfigurationError("d_x must be positive")
        if not self.theta > 0:
            raise ConfigurationError("theta must be positive")
        if self.sigma_ou < 0:
            raise ConfigurationError("sigma_ou must be non-negative")

    def sde(self) -> BlockSde:
        theta, sigma = float(self.theta), float(self.sigma_ou)

        def drift(x, t):
            return -theta * np.asarray(x, dtype=np.float64)

        def drift_block(i, x, t):
            return -theta * np.asarray(x)[..., i:i + 1]

        def diffusion_block(i, x, t):
            return np.full(np.shape(x)[:-1] + (1, 1), sigma)

        return BlockSde(d_x=self.d_x, q=self.d_x, drift=drift,
                        diffusion_block=diffusion_block,
                        drift_block=drift_block, name="ou")

    def stationary_variance(self) -> float:
        return self.sigma_ou ** 2 / (2 * self.theta)


def ou_exact_moments(params: OuParams, x0: np.ndarray,
                     t: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate mean and variance of ``X(t)`` given ``X(0) = x0``."""
    x0 = np.broadcast_to(np.asarray(x0, dtype=np.float64), (params.d_x,))
    decay = math.exp(-params.theta * t)
    var = params.sigma_ou ** 2 * -math.expm1(-2 * params.theta * t) / (2 * params.theta)
    return x0 * decay, np.full(params.d_x, var)


def ou_exact_second_moment(params: OuParams, x0: np.ndarray,
                           t: float) -> np.ndarray:
    mean, var = ou_exact_moments(params, x0, t)
    return mean ** 2 + var


def ou_transition(params: OuParams, interval: float) -> tuple[float, float]:
    """Exact scalar transition ``(a, q)``: ``X(t+interval) = a X(t) + N(0, q)``."""
    a = math.exp(-params.theta * interval)
    q = params.sigma_ou ** 2 * -math.expm1(-2 * params.theta * interval) / (2 * params.theta)
    return a, q


def ou_scheme_transition(params: OuParams, kind: str, h: float,
                         interval: float) -> tuple[float, float]:
    """Scalar transition ``(a, q)`` induced by ``interval / h`` steps of a scheme.

    One Euler step multiplies by ``1 - theta h``; one sequential step gives
    ``x - theta h (x - theta h x) = (1 - theta h + theta^2 h^2) x``. Both add
    ``sigma_ou * dW`` with ``Var dW = h``.
    """
    from .schemes import EULER, SEQ_EULER
    from .core import steps_per_interval

    n = steps_per_interval(interval, h)
    th = params.theta * h
    if kind == EULER:
        a1 = 1.0 - th
    elif kind == SEQ_EULER:
        a1 = 1.0 - th + th * th
    else:
        raise ConfigurationError(f"no closed form for scheme {kind!r}")
    q1 = params.sigma_ou ** 2 * h
    q = q1 * sum(a1 ** (2 * j) for j in range(n))
    return a1 ** n, q


def ou_scheme_moments(params: OuParams, kind: str, x0: np.ndarray,
                      grid: TimeGrid) -> tuple[np.ndarray, np.ndarray]:
    """Exact mean and variance of the scheme's endpoint ``X_N`` on OU."""
    a, q = ou_scheme_transition(params, kind, grid.h, grid.T)
    x0 = np.broadcast_to(np.asarray(x0, dtype=np.float64), (params.d_x,))
    return a * x0, np.full(params.d_x, q)
