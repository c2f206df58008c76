"""Ensemble Kalman filters driven by the SDE schemes, plus an exact Kalman oracle.

An ensemble is a ``(M, d_x)`` float array, one member per row. Observations
select coordinates of the state and add ``sigma_y`` times standard normal
noise. The Kalman gain follows the perturbed-observation EnKF in which the
predicted observations carry no noise, so by default the innovation
covariance is the ensemble covariance of ``A x`` alone; ``add_obs_cov=True``
adds ``sigma_y^2 I`` to it (the textbook variant).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from .core import (DEFAULT_BOUND, BlockSde, ConfigurationError, RunStatus,
                   TimeGrid, exploded_rows)
from .schemes import (EULER, SEQ_EULER, Scheme, advance, correct_blocks,
                      em_step, generator_noise, spc_predictor)

log = logging.getLogger(__name__)

DEFAULT_JITTER = 1e-9

ENKF_EULER = "euler-enkf"
SENKF_EULER = "euler-senkf"
ENKF_SEQ = "seq-euler-enkf"
SENKF_SEQ = "seq-euler-senkf"
FILTERS = (ENKF_EULER, SENKF_EULER, ENKF_SEQ, SENKF_SEQ)


class UpdateFailure(RuntimeError):
    """The innovation covariance could not be factorised, even with jitter."""


@dataclass(frozen=True)
class ObservationOperator:
    """Coordinate selection ``A x = x[indices]`` with noise scale ``sigma_y``."""

    indices: np.ndarray
    sigma_y: float

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1 or idx.size == 0:
            raise ConfigurationError("need a non-empty 1-d index list")
        if np.any(np.diff(idx) <= 0):
            raise ConfigurationError("observation indices must be strictly increasing")
        if idx[0] < 0:
            raise ConfigurationError("observation indices must be non-negative")
        if self.sigma_y < 0:
            raise ConfigurationError("sigma_y must be non-negative")
        object.__setattr__(self, "indices", idx)

    @property
    def d_y(self) -> int:
        return int(self.indices.size)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x)[..., self.indices]

    def matrix(self, d_x: int) -> np.ndarray:
        a = np.zeros((self.d_y, d_x))
        a[np.arange(self.d_y), self.indices] = 1.0
        return a


@dataclass(frozen=True)
class ObservationEvent:
    """Observation number ``k`` taken at filter grid index ``n_k``."""

    k: int
    n_k: int
    operator: ObservationOperator
    y: np.ndarray


@dataclass
class FilterEstimate:
    filter: str
    status: RunStatus
    means: np.ndarray
    covariances: Optional[np.ndarray] = None
    failed_k: Optional[int] = None
    jitters: list[float] = field(default_factory=list)

    @property
    def completed(self) -> bool:
        return self.status is RunStatus.COMPLETED


def draw_observation_indices(rng: np.random.Generator, d_x: int,
                             d_y: int) -> np.ndarray:
    """``d_y`` distinct coordinates, uniform without replacement, sorted."""
    if not 1 <= d_y <= d_x:
        raise ConfigurationError(f"need 1 <= d_y <= d_x, got d_y={d_y}, d_x={d_x}")
    return np.sort(rng.choice(d_x, size=d_y, replace=False))


def synthesize_observation(x_truth: np.ndarray, op: ObservationOperator,
                           rng: np.random.Generator) -> np.ndarray:
    """``A x_truth + sigma_y u`` with ``u`` standard normal."""
    return op.apply(x_truth) + op.sigma_y * rng.standard_normal(op.d_y)


def ensemble_stats(ens: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and covariance (divisor ``M - 1``)."""
    ens = np.asarray(ens, dtype=np.float64)
    M = ens.shape[0]
    if M < 2:
        raise ConfigurationError("ensemble statistics need M >= 2")
    mean = ens.mean(axis=0)
    anom = ens - mean
    return mean, anom.T @ anom / (M - 1)


def _gain(anom_x: np.ndarray, anom_y: np.ndarray, obs_var: float,
          add_obs_cov: bool, jitter: float) -> tuple[Optional[np.ndarray], float]:
    """Gain ``C_xy (C_y + lambda I)^{-1}`` as a ``(d_y, n)`` transpose, and lambda.

    Returns ``(None, 0)`` when the cross-covariance vanishes identically.
    """
    M = anom_x.shape[0]
    c_xy = anom_x.T @ anom_y / (M - 1)
    if not np.any(c_xy):
        return None, 0.0
    c_y = anom_y.T @ anom_y / (M - 1)
    if add_obs_cov:
        c_y[np.diag_indices_from(c_y)] += obs_var
    lam = jitter * np.trace(c_y) / c_y.shape[0]
    if lam:
        c_y[np.diag_indices_from(c_y)] += lam
    try:
        factor = scipy.linalg.cho_factor(c_y, lower=True, check_finite=True)
        gain_t = scipy.linalg.cho_solve(factor, c_xy.T, check_finite=False)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise UpdateFailure(str(exc)) from exc
    if not np.all(np.isfinite(gain_t)):
        raise UpdateFailure("non-finite Kalman gain")
    return gain_t, float(lam)


def kalman_update(ens: np.ndarray, obs: ObservationEvent,
                  rng: Optional[np.random.Generator] = None, *,
                  add_obs_cov: bool = False, jitter: float = DEFAULT_JITTER,
                  perturbations: Optional[np.ndarray] = None
                  ) -> tuple[np.ndarray, float]:
    """Perturbed-observation EnKF analysis of ``ens`` against ``obs``.

    Each member moves by ``G (y - A x_i + sigma_y u_i)`` where ``u_i`` is row
    ``i`` of ``perturbations`` or, if that is None, a fresh ``(M, d_y)``
    standard normal draw from ``rng``. Returns the updated ensemble and the
    jitter added to the innovation covariance diagonal.

    Raises:
        UpdateFailure: if the innovation covariance is not positive definite.
    """
    ens = np.asarray(ens, dtype=np.float64)
    op = obs.operator
    M = ens.shape[0]
    if M < 2:
        raise ConfigurationError("the Kalman update needs M >= 2")
    if perturbations is None:
        if rng is None:
            raise ValueError("either rng or perturbations is required")
        perturbations = rng.standard_normal((M, op.d_y))
    pred = op.apply(ens)
    anom_x = ens - ens.mean(axis=0)
    anom_y = pred - pred.mean(axis=0)
    gain_t, lam = _gain(anom_x, anom_y, op.sigma_y ** 2, add_obs_cov, jitter)
    if gain_t is None:
        return ens.copy(), 0.0
    innov = obs.y - pred + op.sigma_y * perturbations
    return ens + innov @ gain_t, lam


def _check_obs_seq(obs_seq: Sequence[ObservationEvent], grid: TimeGrid) -> None:
    last = 0
    for ev in obs_seq:
        if ev.n_k <= last or ev.n_k > grid.N:
            raise ConfigurationError("observation steps must increase within the grid")
        last = ev.n_k


class _Recorder:
    def __init__(self, keep_cov: bool):
        self.keep_cov = keep_cov
        self.means: list[np.ndarray] = []
        self.covs: list[np.ndarray] = []
        self.jitters: list[float] = []

    def record(self, ens: np.ndarray, lam: float) -> None:
        self.jitters.append(lam)
        if self.keep_cov:
            mean, cov = ensemble_stats(ens)
            self.covs.append(cov)
        else:
            mean = ens.mean(axis=0)
        self.means.append(mean)

    def estimate(self, name: str, status: RunStatus,
                 failed_k: Optional[int] = None) -> FilterEstimate:
        d = self.means[0].size if self.means else 0
        means = np.array(self.means).reshape(len(self.means), d)
        covs = np.array(self.covs) if self.keep_cov else None
        return FilterEstimate(name, status, means, covs, failed_k, self.jitters)


def enkf_run(model: BlockSde, scheme: Scheme, grid: TimeGrid,
             obs_seq: Sequence[ObservationEvent], ens0: np.ndarray,
             rng: np.random.Generator, *, bound: float = DEFAULT_BOUND,
             add_obs_cov: bool = False, jitter: float = DEFAULT_JITTER,
             keep_cov: bool = False) -> FilterEstimate:
    """Standard EnKF: propagate all members with ``scheme``, then update.

    Per observation interval the stream supplies the propagation increments
    (one ``(M, d_x)`` draw per step) followed by the ``(M, d_y)`` observation
    perturbations.
    """
    _check_obs_seq(obs_seq, grid)
    ens = np.array(ens0, dtype=np.float64, copy=True)
    M, d = ens.shape
    draw = generator_noise(rng, M, d)
    rec = _Recorder(keep_cov)
    name = ENKF_SEQ if scheme.kind == SEQ_EULER else ENKF_EULER
    n_prev = 0
    for ev in obs_seq:
        ens, exploded = advance(model, scheme, ens, n_prev, ev.n_k - n_prev,
                                grid.h, draw, bound, stop_on_explosion=True,
                                t0=grid.t0)
        if np.any(exploded >= 0):
            return rec.estimate(name, RunStatus.EXPLODED, ev.k)
        try:
            ens, lam = kalman_update(ens, ev, rng, add_obs_cov=add_obs_cov,
                                     jitter=jitter)
        except UpdateFailure as exc:
            log.debug("update failed at k=%d: %s", ev.k, exc)
            return rec.estimate(name, RunStatus.FAILED_UPDATE, ev.k)
        if exploded_rows(ens, bound).any():
            return rec.estimate(name, RunStatus.EXPLODED, ev.k)
        rec.record(ens, lam)
        n_prev = ev.n_k
    return rec.estimate(name, RunStatus.COMPLETED)


def _sequential_updates(model: BlockSde, x_prev: np.ndarray, state: np.ndarray,
                        ev: ObservationEvent, t_prev: float, t_n: float,
                        h: float, v: np.ndarray, u: np.ndarray,
                        correct: bool, add_obs_cov: bool,
                        jitter: float) -> float:
    """Assimilate the scalar observations of ``ev`` one at a time, in place.

    ``state`` holds predictor values (``correct=True``) or the finished
    Euler prediction (``correct=False``). Before observation ``l`` of
    coordinate ``c`` in block ``j``, blocks up to ``j`` are corrected using
    the already updated prefix; the update then touches coordinates
    ``0..end of block j`` only. Remaining blocks are corrected at the end.
    Returns the largest jitter used.
    """
    op = ev.operator
    m_x = model.m_x
    sigma_y = op.sigma_y
    done = 0
    lam_max = 0.0
    for l, c in enumerate(op.indices):
        j = int(c) // m_x
        if correct and j + 1 > done:
            correct_blocks(model, x_prev, state, t_prev, t_n, h, v, done, j + 1)
        done = max(done, j + 1)
        p = done * m_x
        pred = state[:, c]
        anom_y = (pred - pred.mean())[:, None]
        prefix = state[:, :p]
        anom_x = prefix - prefix.mean(axis=0)
        gain_t, lam = _gain(anom_x, anom_y, sigma_y ** 2, add_obs_cov, jitter)
        lam_max = max(lam_max, lam)
        if gain_t is None:
            continue
        innov = ev.y[l] - pred + sigma_y * u[:, l]
        state[:, :p] += innov[:, None] * gain_t[0]
    if correct and done < model.q:
        correct_blocks(model, x_prev, state, t_prev, t_n, h, v, done, model.q)
    return lam_max


def _senkf_run(model, kind, grid, obs_seq, ens0, rng, bound, add_obs_cov,
               jitter, keep_cov, name) -> FilterEstimate:
    _check_obs_seq(obs_seq, grid)
    ens = np.array(ens0, dtype=np.float64, copy=True)
    M, d = ens.shape
    if M < 2:
        raise ConfigurationError("the Kalman update needs M >= 2")
    draw = generator_noise(rng, M, d)
    scheme = Scheme(kind)
    h = grid.h
    sqrt_h = np.sqrt(h)
    rec = _Recorder(keep_cov)
    n_prev = 0
    for ev in obs_seq:
        ens, exploded = advance(model, scheme, ens, n_prev, ev.n_k - n_prev - 1,
                                h, draw, bound, stop_on_explosion=True,
                                t0=grid.t0)
        if np.any(exploded >= 0):
            return rec.estimate(name, RunStatus.EXPLODED, ev.k)
        t_prev = grid.t(ev.n_k - 1)
        t_n = grid.t(ev.n_k)
        v = draw(1)[0] * sqrt_h
        u = rng.standard_normal((M, ev.operator.d_y))
        with np.errstate(over="ignore", invalid="ignore"):
            if kind == SEQ_EULER:
                state = spc_predictor(model, ens, t_prev, h)
            else:
                state = em_step(model, ens, t_prev, h, v)
            state = np.array(state, dtype=np.float64, copy=True)
            try:
                lam = _sequential_updates(model, ens, state, ev, t_prev, t_n, h,
                                          v, u, kind == SEQ_EULER, add_obs_cov,
                                          jitter)
            except UpdateFailure as exc:
                log.debug("update failed at k=%d: %s", ev.k, exc)
                return rec.estimate(name, RunStatus.FAILED_UPDATE, ev.k)
        if exploded_rows(state, bound).any():
            return rec.estimate(name, RunStatus.EXPLODED, ev.k)
        ens = state
        rec.record(ens, lam)
        n_prev = ev.n_k
    return rec.estimate(name, RunStatus.COMPLETED)


def senkf_seq_run(model: BlockSde, grid: TimeGrid,
                  obs_seq: Sequence[ObservationEvent], ens0: np.ndarray,
                  rng: np.random.Generator, *, bound: float = DEFAULT_BOUND,
                  add_obs_cov: bool = False, jitter: float = DEFAULT_JITTER,
                  keep_cov: bool = False) -> FilterEstimate:
    """Sequential EnKF built into the last sequential Euler step of each interval."""
    return _senkf_run(model, SEQ_EULER, grid, obs_seq, ens0, rng, bound,
                      add_obs_cov, jitter, keep_cov, SENKF_SEQ)


def senkf_em_run(model: BlockSde, grid: TimeGrid,
                 obs_seq: Sequence[ObservationEvent], ens0: np.ndarray,
                 rng: np.random.Generator, *, bound: float = DEFAULT_BOUND,
                 add_obs_cov: bool = False, jitter: float = DEFAULT_JITTER,
                 keep_cov: bool = False) -> FilterEstimate:
    """Sequential EnKF with Euler-Maruyama propagation."""
    return _senkf_run(model, EULER, grid, obs_seq, ens0, rng, bound,
                      add_obs_cov, jitter, keep_cov, SENKF_EULER)


def run_filter(name: str, model: BlockSde, grid: TimeGrid,
               obs_seq: Sequence[ObservationEvent], ens0: np.ndarray,
               rng: np.random.Generator, **kwargs) -> FilterEstimate:
    """Dispatch on one of :data:`FILTERS`."""
    if name == ENKF_EULER:
        return enkf_run(model, Scheme(EULER), grid, obs_seq, ens0, rng, **kwargs)
    if name == ENKF_SEQ:
        return enkf_run(model, Scheme(SEQ_EULER), grid, obs_seq, ens0, rng, **kwargs)
    if name == SENKF_EULER:
        return senkf_em_run(model, grid, obs_seq, ens0, rng, **kwargs)
    if name == SENKF_SEQ:
        return senkf_seq_run(model, grid, obs_seq, ens0, rng, **kwargs)
    raise ConfigurationError(f"unknown filter {name!r}")


def _check_psd(name: str, c: np.ndarray) -> None:
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1] or not np.allclose(c, c.T):
        raise ConfigurationError(f"{name} must be a symmetric square matrix")
    scale = max(1.0, float(np.abs(c).max()))
    if np.linalg.eigvalsh(c).min() < -1e-10 * scale:
        raise ConfigurationError(f"{name} is not positive semidefinite")


def exact_kalman(transition, process_cov, obs_seq: Sequence[ObservationEvent],
                 prior_mean: np.ndarray, prior_cov: np.ndarray, *,
                 include_obs_cov_in_gain: bool = True
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Kalman filter for ``x_k = F_k x_{k-1} + N(0, Q_k)``, ``y_k = A_k x_k + N(0, R)``.

    ``transition`` and ``process_cov`` are either single matrices or one per
    observation interval. With ``include_obs_cov_in_gain=False`` the gain is
    ``P A^T (A P A^T)^{-1}``, matching the default ensemble update, and the
    covariance follows the Joseph form so it stays the true error covariance
    of that gain.
    """
    m = np.atleast_1d(np.asarray(prior_mean, dtype=np.float64)).copy()
    d = m.size
    P = np.atleast_2d(np.asarray(prior_cov, dtype=np.float64)).copy()
    _check_psd("prior covariance", P)
    K = len(obs_seq)

    def per_interval(arg, k):
        arr = np.asarray(arg, dtype=np.float64)
        if arr.ndim == 3:
            return arr[k]
        if arr.ndim <= 1 and d == 1:
            return arr.reshape(1, 1)
        if arr.ndim == 2:
            return arr
        return np.asarray(arg[k], dtype=np.float64).reshape(d, d)

    for k in range(K):
        _check_psd("process covariance", per_interval(process_cov, k))
    means = np.empty((K, d))
    covs = np.empty((K, d, d))
    eye = np.eye(d)
    for k, ev in enumerate(obs_seq):
        F = per_interval(transition, k)
        Q = per_interval(process_cov, k)
        m = F @ m
        P = F @ P @ F.T + Q
        A = ev.operator.matrix(d)
        R = ev.operator.sigma_y ** 2 * np.eye(ev.operator.d_y)
        S = A @ P @ A.T
        if include_obs_cov_in_gain:
            S = S + R
        G = np.linalg.solve(S, A @ P).T
        m = m + G @ (ev.y - A @ m)
        IGA = eye - G @ A
        P = IGA @ P @ IGA.T + G @ R @ G.T
        P = 0.5 * (P + P.T)
        means[k] = m
        covs[k] = P
    return means, covs
