"""Block-structured SDE models, time grids, random streams and explosion checks.

All state arrays are float64 with the state dimension on the last axis, so a
single state has shape ``(d_x,)`` and a batch of states (ensemble members or
independent replicates) has shape ``(B, d_x)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

DEFAULT_BOUND = 1e10


class ConfigurationError(ValueError):
    """Raised for invalid model, grid or experiment parameters."""


DriftFn = Callable[[np.ndarray, float], np.ndarray]
DriftBlockFn = Callable[[int, np.ndarray, float], np.ndarray]
DiffusionBlockFn = Callable[[int, np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class BlockSde:
    """Ito SDE ``dX = f(X,t) dt + s(X,t) dW`` with block-diagonal ``s``.

    ``drift(x, t)`` maps ``(..., d_x)`` to ``(..., d_x)`` and
    ``diffusion_block(i, x, t)`` returns the ``(..., m_x, m_x)`` block ``s_i``.

    ``drift_block`` optionally evaluates only ``f_i``; without it the full
    drift is computed and sliced. ``kernels`` optionally supplies fused,
    compiled step routines (see :class:`StepKernels`) that must agree with
    the generic path.
    """

    d_x: int
    q: int
    drift: DriftFn
    diffusion_block: DiffusionBlockFn
    drift_block: Optional[DriftBlockFn] = None
    kernels: Optional["StepKernels"] = field(default=None, compare=False)
    name: str = "sde"

    def __post_init__(self):
        if self.d_x < 1 or self.q < 1:
            raise ConfigurationError("d_x and q must be positive")
        if self.d_x % self.q != 0:
            raise ConfigurationError(
                f"q={self.q} blocks do not tile d_x={self.d_x}")

    @property
    def m_x(self) -> int:
        return self.d_x // self.q

    def block_slice(self, i: int) -> slice:
        return slice(i * self.m_x, (i + 1) * self.m_x)

    def eval_drift_block(self, i: int, x: np.ndarray, t: float) -> np.ndarray:
        if self.drift_block is not None:
            return self.drift_block(i, x, t)
        return self.drift(x, t)[..., self.block_slice(i)]

    def block_noise(self, i: int, x: np.ndarray, t: float,
                    v: np.ndarray) -> np.ndarray:
        """``s_i(x, t) @ v_i`` for block ``i``; ``v`` is the full increment."""
        s = self.diffusion_block(i, x, t)
        return np.einsum("...ij,...j->...i", s, v[..., self.block_slice(i)])

    def noise_term(self, x: np.ndarray, t: float, v: np.ndarray) -> np.ndarray:
        """``S(x, t) @ v`` with ``S`` the assembled block-diagonal diffusion."""
        out = np.empty(np.broadcast_shapes(np.shape(x), np.shape(v)))
        for i in range(self.q):
            out[..., self.block_slice(i)] = self.block_noise(i, x, t, v)
        return out

    def diffusion_matrix(self, x: np.ndarray, t: float) -> np.ndarray:
        """Dense ``(d_x, d_x)`` diffusion for a single state ``x``."""
        s = np.zeros((self.d_x, self.d_x))
        for i in range(self.q):
            sl = self.block_slice(i)
            s[sl, sl] = self.diffusion_block(i, x, t)
        return s


@dataclass(frozen=True)
class StepKernels:
    """Fused step routines for a specific model, operating on ``(B, d_x)``.

    ``em(x, t, h, v)`` returns the Euler-Maruyama update.
    ``predict(x, t, h)`` returns ``x + h f(x, t)``.
    ``correct(x_prev, mixed, t_prev, t_n, h, v, start, stop)`` overwrites
    blocks ``start..stop-1`` of ``mixed`` in order with the corrector update.
    ``steps(seq, x, alive, h, noise, sub, bound, stop_all)``, if given, runs
    many steps in one call for autonomous models; see ``advance``.
    """

    em: Callable
    predict: Callable
    correct: Callable
    steps: Optional[Callable] = None


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_n = t0 + n h`` with ``h = T / N``."""

    T: float
    N: int
    t0: float = 0.0

    def __post_init__(self):
        if not self.T > 0:
            raise ConfigurationError("horizon T must be positive")
        if self.N < 1:
            raise ConfigurationError("number of steps N must be positive")

    @classmethod
    def from_step(cls, T: float, h: float) -> "TimeGrid":
        if not h > 0:
            raise ConfigurationError("time step h must be positive")
        N = int(round(T / h))
        if N < 1 or not math.isclose(N * h, T, rel_tol=1e-9, abs_tol=0.0):
            raise ConfigurationError(f"h={h} does not divide T={T}")
        return cls(T=T, N=N)

    @property
    def h(self) -> float:
        return self.T / self.N

    def t(self, n: int) -> float:
        return self.t0 + n * self.h


def steps_per_interval(interval: float, h: float) -> int:
    """Integer ``interval / h``; raises if ``h`` does not divide ``interval``."""
    k = int(round(interval / h))
    if k < 1 or not math.isclose(k * h, interval, rel_tol=1e-9):
        raise ConfigurationError(f"step {h} does not divide interval {interval}")
    return k


class Purpose(enum.IntEnum):
    """Stream purposes; part of every derived stream key."""

    INITIAL_CONDITION = 0
    TRUTH = 1
    OBSERVATION_INDICES = 2
    OBSERVATION_NOISE = 3
    ENSEMBLE_INIT = 4
    PROPAGATION = 5
    UPDATE = 6
    REFERENCE = 7


def derive_rng(master_seed: int, run_id: int, purpose: int,
               *extra: int) -> np.random.Generator:
    """Independent Philox stream keyed by ``(master_seed, run_id, purpose, *extra)``.

    The key goes through :class:`numpy.random.SeedSequence`, which hashes the
    spawn key, so distinct tuples give distinct, independent streams and the
    same tuple always reproduces the same stream.
    """
    key = tuple(int(k) for k in (run_id, purpose, *extra))
    if any(k < 0 for k in key) or master_seed < 0:
        raise ConfigurationError("stream keys must be non-negative integers")
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(seq))


def wiener_increments(rng: np.random.Generator, d_x: int, h: float,
                      size: tuple[int, ...] = ()) -> np.ndarray:
    """Draw ``N(0, h I)`` increments of shape ``size + (d_x,)``."""
    return math.sqrt(h) * rng.standard_normal(size + (d_x,))


class StateCheck(enum.Enum):
    FINITE = "finite"
    EXPLODED = "exploded"


def exploded_rows(x: np.ndarray, bound: float = DEFAULT_BOUND) -> np.ndarray:
    """Boolean mask over leading axes: True where any coordinate is bad."""
    with np.errstate(invalid="ignore"):
        bad = ~(np.abs(x) <= bound)
    return bad.any(axis=-1)


def check_state(x: np.ndarray, bound: float = DEFAULT_BOUND) -> StateCheck:
    if not bound > 0:
        raise ConfigurationError("explosion bound must be positive")
    return StateCheck.EXPLODED if bool(np.any(exploded_rows(x, bound))) \
        else StateCheck.FINITE


class RunStatus(str, enum.Enum):
    COMPLETED = "completed"
    EXPLODED = "exploded"
    FAILED_UPDATE = "failed-update"


@dataclass
class RunOutcome:
    status: RunStatus
    final_state: Optional[np.ndarray] = None
    explosion_step: Optional[int] = None
    sampled_states: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if (self.final_state is None) == (self.explosion_step is None):
            raise ValueError("exactly one of final_state / explosion_step")

    @property
    def completed(self) -> bool:
        return self.status is RunStatus.COMPLETED
