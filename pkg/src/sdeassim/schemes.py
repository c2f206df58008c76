"""Euler-Maruyama and sequential predictor-corrector Euler time stepping.

Every step function accepts a single state ``(d_x,)`` or a batch ``(B, d_x)``.
The increment ``v`` passed to a step is a Wiener increment with variance
``h`` per coordinate, i.e. it already carries the ``sqrt(h)`` factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .core import (DEFAULT_BOUND, BlockSde, ConfigurationError, RunOutcome,
                   RunStatus, TimeGrid, exploded_rows, steps_per_interval)

EULER = "euler"
SEQ_EULER = "seq-euler"
REFERENCE = "reference"


@dataclass(frozen=True)
class Scheme:
    """Scheme selector: ``euler``, ``seq-euler`` or ``reference`` (Euler at ``h_o``)."""

    kind: str
    h_o: Optional[float] = None

    def __post_init__(self):
        if self.kind not in (EULER, SEQ_EULER, REFERENCE):
            raise ConfigurationError(f"unknown scheme {self.kind!r}")
        if (self.kind == REFERENCE) != (self.h_o is not None):
            raise ConfigurationError("h_o is required for, and only for, reference")
        if self.h_o is not None and not self.h_o > 0:
            raise ConfigurationError("h_o must be positive")

    @classmethod
    def parse(cls, text: str) -> "Scheme":
        """``euler`` | ``seq-euler`` | ``reference:<h_o>``."""
        text = text.strip()
        if text.startswith(REFERENCE):
            _, _, h_o = text.partition(":")
            if not h_o:
                raise ConfigurationError("reference scheme needs ':h_o'")
            return cls(REFERENCE, float(h_o))
        return cls(text)

    def __str__(self) -> str:
        return f"{REFERENCE}:{self.h_o:g}" if self.kind == REFERENCE else self.kind


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def em_step(model: BlockSde, x: np.ndarray, t: float, h: float,
            v: np.ndarray) -> np.ndarray:
    """``x + h f(x, t) + S(x, t) v``."""
    if model.kernels is not None:
        xb, single = _as_batch(x)
        out = model.kernels.em(xb, t, h, _as_batch(v)[0])
        return out[0] if single else out
    return x + h * model.drift(x, t) + model.noise_term(x, t, v)


def spc_predictor(model: BlockSde, x: np.ndarray, t_prev: float,
                  h: float) -> np.ndarray:
    """Noise-free Euler extrapolation ``x + h f(x, t_prev)``."""
    if model.kernels is not None:
        xb, single = _as_batch(x)
        out = model.kernels.predict(xb, t_prev, h)
        return out[0] if single else out
    return x + h * model.drift(x, t_prev)


def correct_blocks(model: BlockSde, x_prev: np.ndarray, mixed: np.ndarray,
                   t_prev: float, t_n: float, h: float, v: np.ndarray,
                   start: int = 0, stop: Optional[int] = None) -> None:
    """Overwrite blocks ``start..stop-1`` of ``mixed`` with corrected values.

    Block ``i`` becomes ``x_prev_i + h f_i(mixed, t_n) + s_i(x_prev, t_prev) v_i``,
    evaluated after blocks ``< i`` have been overwritten, so ``mixed`` must
    hold already-corrected (or updated) blocks below ``start`` and predictor
    values from ``start`` upwards. Works in place on 2-d batches.
    """
    stop = model.q if stop is None else stop
    if not 0 <= start <= stop <= model.q:
        raise ValueError(f"bad block range [{start}, {stop})")
    if start == stop:
        return
    if model.kernels is not None:
        if mixed.ndim == 1:
            x_prev, mixed, v = x_prev[None], mixed[None], v[None]
        model.kernels.correct(x_prev, mixed, t_prev, t_n, h, v, start, stop)
        return
    for i in range(start, stop):
        sl = model.block_slice(i)
        f_i = model.eval_drift_block(i, mixed, t_n)
        mixed[..., sl] = (x_prev[..., sl] + h * f_i
                          + model.block_noise(i, x_prev, t_prev, v))


def spc_corrector(model: BlockSde, x_prev: np.ndarray, x_hat: np.ndarray,
                  t_n: float, t_prev: float, h: float,
                  v: np.ndarray) -> np.ndarray:
    """Sequential corrector sweep over all blocks in order ``0..q-1``."""
    mixed = np.array(x_hat, dtype=np.float64, copy=True)
    x_prev = np.asarray(x_prev, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    correct_blocks(model, x_prev, mixed, t_prev, t_n, h, v)
    return mixed


def spc_step(model: BlockSde, x: np.ndarray, t: float, h: float,
             v: np.ndarray) -> np.ndarray:
    """One full sequential predictor-corrector Euler step from ``t`` to ``t + h``."""
    x_hat = spc_predictor(model, x, t, h)
    return spc_corrector(model, x, x_hat, t + h, t, h, v)


def step(model: BlockSde, kind: str, x: np.ndarray, t: float, h: float,
         v: np.ndarray) -> np.ndarray:
    if kind == SEQ_EULER:
        return spc_step(model, x, t, h, v)
    return em_step(model, x, t, h, v)


NoiseDraw = Callable[[int], np.ndarray]
"""``draw(n)`` returns ``n`` steps of standard normals, shape ``(n, B, d_x)``."""


def generator_noise(rng: np.random.Generator, batch: int, d_x: int) -> NoiseDraw:
    """Noise for a batch driven by one stream (e.g. ensemble members of one run)."""
    def draw(n: int) -> np.ndarray:
        return rng.standard_normal((n, batch, d_x))
    return draw


def per_row_noise(rngs: Sequence[np.random.Generator], d_x: int) -> NoiseDraw:
    """Noise for a batch where row ``b`` owns stream ``rngs[b]``."""
    def draw(n: int) -> np.ndarray:
        out = np.empty((len(rngs), n, d_x))
        for b, g in enumerate(rngs):
            g.standard_normal(out=out[b])
        return np.ascontiguousarray(out.transpose(1, 0, 2))
    return draw


_CHUNK_VALUES = 1 << 21


def advance(model: BlockSde, scheme: Scheme, x: np.ndarray, n0: int,
            nsteps: int, h: float, draw: NoiseDraw,
            bound: float = DEFAULT_BOUND, stop_on_explosion: bool = False,
            on_step: Optional[Callable[[int, np.ndarray], None]] = None,
            t0: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Step a batch ``x`` (B, d_x) from grid index ``n0`` over ``nsteps`` steps.

    Returns ``(x, explosion_step)`` where ``explosion_step[b]`` is the grid
    index at which row ``b`` first failed the bound check, or -1. Exploded
    rows are zeroed and no longer tracked. With ``stop_on_explosion`` the
    loop ends at the first explosion in any row. ``on_step(n, x)`` is called
    after every completed step ``n`` (not for exploded rows).
    """
    x = np.array(x, dtype=np.float64, copy=True)
    B, d = x.shape
    exploded_at = np.full(B, -1, dtype=np.int64)
    sub = 1
    h_eff = h
    if scheme.kind == REFERENCE:
        sub = steps_per_interval(h, scheme.h_o)
        h_eff = h / sub
    sqrt_h = math.sqrt(h_eff)
    chunk = max(1, _CHUNK_VALUES // max(1, B * d * sub))
    n = n0
    remaining = nsteps
    alive = np.ones(B, dtype=bool)
    fused = (model.kernels is not None and model.kernels.steps is not None
             and on_step is None)
    with np.errstate(over="ignore", invalid="ignore"):
        while fused and remaining > 0:
            c = min(chunk, remaining)
            noise = draw(c * sub)
            noise *= sqrt_h
            x, bad, done = model.kernels.steps(scheme.kind == SEQ_EULER, x,
                                               alive, h_eff, noise, sub,
                                               bound, stop_on_explosion)
            hit = bad >= 0
            exploded_at[hit] = n + bad[hit] + 1
            if hit.any() and stop_on_explosion:
                return x, exploded_at
            n += done
            remaining -= c
        while remaining > 0:
            c = min(chunk, remaining)
            noise = draw(c * sub)
            noise *= sqrt_h
            for j in range(c):
                t = t0 + n * h
                for s in range(sub):
                    v = noise[j * sub + s]
                    x = step(model, scheme.kind, x, t + s * h_eff, h_eff, v)
                n += 1
                bad = exploded_rows(x, bound) & alive
                if bad.any():
                    exploded_at[bad] = n
                    alive &= ~bad
                    x[bad] = 0.0
                    if stop_on_explosion:
                        return x, exploded_at
                if on_step is not None:
                    on_step(n, x)
            remaining -= c
    return x, exploded_at


def integrate_batch(model: BlockSde, scheme: Scheme, x0: np.ndarray,
                    grid: TimeGrid, rngs: Sequence[np.random.Generator],
                    bound: float = DEFAULT_BOUND,
                    sample_steps: Iterable[int] = ()) -> list[RunOutcome]:
    """Integrate ``B`` independent trajectories, row ``b`` driven by ``rngs[b]``.

    Results for a row depend only on its initial state and stream, not on the
    rest of the batch.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if x0.shape[1] != model.d_x:
        raise ConfigurationError("x0 does not match model dimension")
    if len(rngs) != x0.shape[0]:
        raise ConfigurationError("one stream per trajectory is required")
    if not np.all(np.isfinite(x0)):
        raise ConfigurationError("x0 must be finite")
    samples = sorted(set(int(s) for s in sample_steps))
    if samples and (samples[0] < 0 or samples[-1] > grid.N):
        raise ConfigurationError(f"sample steps must lie in [0, {grid.N}]")
    wanted = set(samples)
    recorded: dict[int, np.ndarray] = {}
    if 0 in wanted:
        recorded[0] = x0.copy()

    def on_step(n, x):
        if n in wanted:
            recorded[n] = x.copy()

    x, exploded_at = advance(model, scheme, x0, 0, grid.N, grid.h,
                             per_row_noise(rngs, model.d_x), bound,
                             on_step=on_step if wanted else None,
                             t0=grid.t0)
    outcomes = []
    for b in range(x0.shape[0]):
        if exploded_at[b] >= 0:
            stop = exploded_at[b]
            sampled = {n: v[b].copy() for n, v in recorded.items() if n < stop}
            outcomes.append(RunOutcome(RunStatus.EXPLODED,
                                       explosion_step=int(stop),
                                       sampled_states=sampled))
        else:
            sampled = {n: v[b].copy() for n, v in recorded.items()}
            outcomes.append(RunOutcome(RunStatus.COMPLETED,
                                       final_state=x[b].copy(),
                                       sampled_states=sampled))
    return outcomes


def integrate(model: BlockSde, scheme: Scheme, x0: np.ndarray, grid: TimeGrid,
              rng: np.random.Generator, bound: float = DEFAULT_BOUND,
              sample_steps: Iterable[int] = ()) -> RunOutcome:
    """Integrate one trajectory over ``grid`` and report completion or explosion."""
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 1:
        raise ConfigurationError("integrate takes a single state; "
                                 "use integrate_batch for batches")
    return integrate_batch(model, scheme, x0[None], grid, [rng], bound,
                           sample_steps)[0]
