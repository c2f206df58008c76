"""Scalar metrics computed from run outcomes and filter estimates."""

from __future__ import annotations

import math
import warnings
from typing import Iterable, Sequence

import numpy as np

from ..core import ConfigurationError, RunStatus

NORM = "norm"
NORM_SQ = "norm_sq"


def phi(states: np.ndarray, kind: str = NORM) -> np.ndarray:
    """Test function over the last axis: Euclidean norm or its square."""
    states = np.asarray(states, dtype=np.float64)
    sq = np.einsum("...i,...i->...", states, states)
    if kind == NORM:
        return np.sqrt(sq)
    if kind == NORM_SQ:
        return sq
    raise ConfigurationError(f"unknown test function {kind!r}")


def ell(states: np.ndarray, kind: str = NORM) -> float:
    """Sample average of ``phi`` over a set of final states ``(J, d_x)``."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if states.shape[0] == 0:
        raise ConfigurationError("no completed runs to average")
    return float(phi(states, kind).mean())


def weak_error(ref_runs: np.ndarray, test_runs: np.ndarray,
               kind: str = NORM) -> float:
    """Normalised weak error ``|l(ref) - l(test)| / l(ref)``."""
    ref_runs = np.asarray(ref_runs, dtype=np.float64)
    if ref_runs.size == 0:
        raise ConfigurationError("empty reference set")
    ref = ell(ref_runs, kind)
    if ref == 0:
        raise ConfigurationError("reference average is zero")
    return abs(ref - ell(test_runs, kind)) / ref


def weak_error_from_values(ref_value: float, test_value: float) -> float:
    if ref_value == 0:
        raise ConfigurationError("reference average is zero")
    return abs(ref_value - test_value) / abs(ref_value)


def fit_weak_order(h_list: Sequence[float], error_list: Sequence[float]) -> float:
    """Least-squares slope of ``log(error)`` against ``log(h)``.

    Non-positive (or non-finite) errors are dropped with a warning.
    """
    h = np.asarray(h_list, dtype=np.float64)
    err = np.asarray(error_list, dtype=np.float64)
    if h.shape != err.shape:
        raise ValueError("h_list and error_list differ in length")
    keep = np.isfinite(err) & (err > 0) & (h > 0)
    if not keep.all():
        warnings.warn(f"dropping {int((~keep).sum())} non-positive errors "
                      "from the order fit", RuntimeWarning, stacklevel=2)
    if keep.sum() < 3:
        raise ConfigurationError("need at least 3 positive errors to fit an order")
    slope, _ = np.polyfit(np.log(h[keep]), np.log(err[keep]), 1)
    return float(slope)


def nmse(truth: np.ndarray, estimates: np.ndarray) -> float:
    """Summed squared error over summed squared truth norm."""
    truth = np.asarray(truth, dtype=np.float64)
    estimates = np.asarray(estimates, dtype=np.float64)
    if truth.shape != estimates.shape or truth.shape[0] < 1:
        raise ConfigurationError("truth and estimates must have equal, non-zero length")
    den = float(np.sum(truth ** 2))
    if den == 0:
        raise ConfigurationError("truth is identically zero")
    return float(np.sum((truth - estimates) ** 2)) / den


def completion_rate(outcomes: Iterable) -> float:
    """Percentage of completed entries; accepts statuses or objects with ``status``."""
    statuses = [getattr(o, "status", o) for o in outcomes]
    if not statuses:
        raise ConfigurationError("completion rate of an empty set")
    done = sum(RunStatus(s) is RunStatus.COMPLETED for s in statuses)
    return 100.0 * done / len(statuses)


def folded_normal_mean(mean: float, var: float) -> float:
    """``E|X|`` for ``X ~ N(mean, var)``."""
    if var <= 0:
        return abs(mean)
    sd = math.sqrt(var)
    z = mean / sd
    return (sd * math.sqrt(2 / math.pi) * math.exp(-0.5 * z * z)
            + mean * math.erf(z / math.sqrt(2)))
