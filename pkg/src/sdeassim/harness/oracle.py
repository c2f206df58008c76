"""Linear-Gaussian twin experiments on the OU model with exact Kalman references."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..core import Purpose, TimeGrid, derive_rng, steps_per_interval
from ..filters import (FilterEstimate, ObservationEvent, ObservationOperator,
                       enkf_run, exact_kalman)
from ..models import OuParams, ou_scheme_transition, ou_transition
from ..schemes import Scheme


@dataclass
class OuTwin:
    params: OuParams
    delta: float
    truth: np.ndarray          # (K, d_x)
    y: np.ndarray              # (K, d_x), every coordinate observed
    sigma_y: float

    @property
    def K(self) -> int:
        return self.truth.shape[0]

    def events(self, h: float) -> list[ObservationEvent]:
        steps = steps_per_interval(self.delta, h)
        op = ObservationOperator(np.arange(self.params.d_x), self.sigma_y)
        return [ObservationEvent(k + 1, (k + 1) * steps, op, self.y[k])
                for k in range(self.K)]

    def prior(self) -> tuple[np.ndarray, np.ndarray]:
        """Stationary law, used both for the truth's start and the ensemble."""
        d = self.params.d_x
        return np.zeros(d), self.params.stationary_variance() * np.eye(d)


def make_ou_twin(params: OuParams, K: int, delta: float, sigma_y: float,
                 seed: int, run_id: int) -> OuTwin:
    """Truth sampled exactly from the OU transition; full noisy observations."""
    rng = derive_rng(seed, run_id, Purpose.TRUTH)
    a, q = ou_transition(params, delta)
    d = params.d_x
    x = np.sqrt(params.stationary_variance()) * rng.standard_normal(d)
    truth = np.empty((K, d))
    for k in range(K):
        x = a * x + np.sqrt(q) * rng.standard_normal(d)
        truth[k] = x
    noise = derive_rng(seed, run_id, Purpose.OBSERVATION_NOISE).standard_normal((K, d))
    return OuTwin(params, delta, truth, truth + sigma_y * noise, sigma_y)


def ou_kalman(twin: OuTwin, *, kind: Optional[str] = None, h: Optional[float] = None,
              include_obs_cov_in_gain: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Exact Kalman posterior for the continuous model (``kind=None``) or for
    the discrete transition a scheme induces at step ``h``."""
    if kind is None:
        a, q = ou_transition(twin.params, twin.delta)
    else:
        a, q = ou_scheme_transition(twin.params, kind, h, twin.delta)
    d = twin.params.d_x
    m0, P0 = twin.prior()
    return exact_kalman(a * np.eye(d), q * np.eye(d), twin.events(twin.delta),
                        m0, P0, include_obs_cov_in_gain=include_obs_cov_in_gain)


def ou_enkf(twin: OuTwin, kind: str, h: float, M: int, seed: int, run_id: int,
            *, add_obs_cov: bool = False) -> FilterEstimate:
    """EnKF on the twin with the stationary prior ensemble."""
    d = twin.params.d_x
    ens0 = (np.sqrt(twin.params.stationary_variance())
            * derive_rng(seed, run_id, Purpose.ENSEMBLE_INIT).standard_normal((M, d)))
    grid = TimeGrid.from_step(twin.K * twin.delta, h)
    return enkf_run(twin.params.sde(), Scheme(kind), grid, twin.events(h), ens0,
                    derive_rng(seed, run_id, Purpose.PROPAGATION),
                    add_obs_cov=add_obs_cov)
