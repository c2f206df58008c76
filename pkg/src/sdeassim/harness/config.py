"""Experiment configuration: INI-style files, ``key=value`` overrides, validation.

A config file holds one section per experiment kind, e.g.::

    [robustness]
    sigma2 = 1/4, 1/2, 1
    h = 1e-3, 5e-3, 1e-2
    replicates = 100

Keys in a ``[common]`` section apply to every experiment. Lists are
comma-separated; numbers may be written as fractions (``1/4``).
"""

from __future__ import annotations

import configparser
import dataclasses
import math
import os
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

from ..core import DEFAULT_BOUND, ConfigurationError, steps_per_interval
from ..filters import FILTERS
from ..schemes import EULER, SEQ_EULER, Scheme
from .metrics import NORM, NORM_SQ

KINDS = ("simulate", "weak-error", "order-check", "robustness", "filter-bench")
WORKERS_ENV = "SDEASSIM_WORKERS"

# Filter time steps per (sigma^2, sigma_y^2) scenario, in FILTERS order.
TABLE_STEPS = {
    (0.25, 0.25): (1e-2, 1e-2, 1e-2, 1e-2),
    (0.5, 0.25): (1e-3, 1e-3, 1e-2, 1e-2),
    (1.0, 1.0): (1e-4, 1e-4, 5e-3, 5e-3),
}


def parse_number(text: str) -> float:
    text = text.strip()
    try:
        return float(text)
    except ValueError:
        try:
            return float(Fraction(text))
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigurationError(f"not a number: {text!r}") from exc


def parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"not a boolean: {text!r}")


def _split(text: str, sep: str = ",") -> list[str]:
    return [p.strip() for p in text.split(sep) if p.strip()]


def parse_scenarios(text: str) -> list[tuple[float, float]]:
    """``1/4:1/4, 1/2:1/4`` -> ``[(0.25, 0.25), (0.5, 0.25)]``."""
    out = []
    for item in _split(text):
        a, sep, b = item.partition(":")
        if not sep:
            raise ConfigurationError(f"scenario {item!r} is not 'sigma2:sigma_y2'")
        out.append((parse_number(a), parse_number(b)))
    return out


def parse_step_table(text: str) -> dict[tuple[float, float], tuple[float, ...]]:
    """``1/2:1/4 = 1e-3 1e-3 1e-2 1e-2; ...`` (steps in filter order)."""
    table = {}
    for entry in _split(text, ";"):
        key, sep, steps = entry.partition("=")
        if not sep:
            raise ConfigurationError(f"step table entry {entry!r} lacks '='")
        (scenario,) = parse_scenarios(key)
        hs = tuple(parse_number(s) for s in steps.split())
        if len(hs) != len(FILTERS):
            raise ConfigurationError(f"need {len(FILTERS)} steps per scenario")
        table[scenario] = hs
    return table


@dataclass
class ExperimentConfig:
    kind: str
    model: str = "lorenz96"
    d_x: int = 200
    F: float = 8.0
    drift: str = "standard"
    sigma2: list[float] = field(default_factory=lambda: [0.5])
    theta: float = 1.0
    sigma_ou: float = 0.5
    x0: float = 1.0
    schemes: list[str] = field(default_factory=lambda: [EULER, SEQ_EULER])
    h: list[float] = field(default_factory=lambda: [1e-2])
    h_o: float = 1e-5
    T: float = 2.0
    delta: float = 0.1
    d_y: Optional[int] = None
    sigma_y2: list[float] = field(default_factory=lambda: [0.25])
    M: list[int] = field(default_factory=lambda: [200])
    filters: list[str] = field(default_factory=lambda: list(FILTERS))
    scenarios: list[tuple[float, float]] = field(default_factory=list)
    step_table: dict = field(default_factory=lambda: dict(TABLE_STEPS))
    replicates: int = 100
    chunk: int = 1000
    seed: int = 0
    bound: float = DEFAULT_BOUND
    phi: str = NORM
    oracle: str = "reference"
    add_obs_cov: bool = False
    jitter: float = 1e-9
    timing: bool = False
    workers: int = 1
    out: Optional[str] = None

    @property
    def schemes_parsed(self) -> list[Scheme]:
        return [Scheme.parse(s) for s in self.schemes]

    @property
    def obs_dim(self) -> int:
        return self.d_y if self.d_y is not None else max(1, self.d_x // 2)

    def steps_for(self, scenario: tuple[float, float]) -> dict[str, float]:
        for key, hs in self.step_table.items():
            if all(math.isclose(a, b) for a, b in zip(key, scenario)):
                return dict(zip(FILTERS, hs))
        raise ConfigurationError(f"no time steps configured for scenario {scenario}")

    def validate(self) -> "ExperimentConfig":
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown experiment {self.kind!r}")
        if self.model not in ("lorenz96", "ou"):
            raise ConfigurationError(f"unknown model {self.model!r}")
        if self.replicates < 1 or self.workers < 1 or self.chunk < 1:
            raise ConfigurationError("replicates, workers and chunk must be positive")
        if self.seed < 0:
            raise ConfigurationError("seed must be non-negative")
        if not self.bound > 0:
            raise ConfigurationError("bound must be positive")
        if self.phi not in (NORM, NORM_SQ):
            raise ConfigurationError(f"phi must be {NORM} or {NORM_SQ}")
        if self.oracle not in ("reference", "analytic"):
            raise ConfigurationError("oracle must be 'reference' or 'analytic'")
        if not self.h or any(not h > 0 for h in self.h):
            raise ConfigurationError("h list must be non-empty and positive")
        if any(s < 0 for s in self.sigma2 + self.sigma_y2):
            raise ConfigurationError("variances must be non-negative")
        if any(m < 2 for m in self.M):
            raise ConfigurationError("ensemble sizes must be >= 2")
        for f in self.filters:
            if f not in FILTERS:
                raise ConfigurationError(f"unknown filter {f!r}")
        self.schemes_parsed
        for h in self.h:
            steps_per_interval(self.T, h)
        if self.kind in ("robustness", "filter-bench"):
            if self.model != "lorenz96":
                raise ConfigurationError(f"{self.kind} runs on lorenz96")
            steps_per_interval(self.T, self.delta)
            steps_per_interval(self.delta, self.h_o)
            hs = list(self.h)
            if self.kind == "filter-bench":
                hs = [h for sc in self.scenarios for h in self.steps_for(sc).values()]
            for h in hs:
                steps_per_interval(self.delta, h)
            if not 1 <= self.obs_dim <= self.d_x:
                raise ConfigurationError("need 1 <= d_y <= d_x")
        if self.kind == "weak-error" and self.oracle == "reference":
            for h in self.h:
                steps_per_interval(h, self.h_o)
        if self.kind == "order-check" and self.model != "ou":
            raise ConfigurationError("order-check runs on the ou model")
        return self


DEFAULTS = {
    "simulate": dict(T=2.0, h=[1e-2], replicates=100),
    "weak-error": dict(T=2.0, sigma2=[0.25, 1.0], h=[1e-4, 1e-3, 1e-2, 5e-2, 1e-1],
                       h_o=1e-5, replicates=1000),
    "order-check": dict(model="ou", d_x=4, T=1.0, h=[0.2, 0.1, 0.05, 0.025],
                        schemes=[EULER, SEQ_EULER], replicates=200_000),
    "robustness": dict(T=5.0, h=[1e-3, 5e-3, 1e-2], sigma2=[0.25, 0.5, 1.0],
                       sigma_y2=[0.25], M=[200], replicates=100),
    "filter-bench": dict(T=10.0, M=[50, 100, 200, 300, 400], replicates=10,
                         scenarios=[(0.25, 0.25), (0.5, 0.25), (1.0, 1.0)]),
}


def _convert(name: str, raw: str, cfg: ExperimentConfig):
    f = {fl.name: fl for fl in dataclasses.fields(ExperimentConfig)}.get(name)
    if f is None or name == "kind":
        raise ConfigurationError(f"unknown config key {name!r}")
    current = getattr(cfg, name)
    if name == "scenarios":
        return parse_scenarios(raw)
    if name == "step_table":
        return parse_step_table(raw)
    if name in ("schemes", "filters"):
        return _split(raw)
    if name == "M":
        return [int(parse_number(v)) for v in _split(raw)]
    if name in ("h", "sigma2", "sigma_y2"):
        return [parse_number(v) for v in _split(raw)]
    if name in ("out",):
        return raw.strip() or None
    if name == "d_y":
        return None if raw.strip().lower() in ("", "none") else int(parse_number(raw))
    if isinstance(current, bool):
        return parse_bool(raw)
    if isinstance(current, int):
        val = parse_number(raw)
        if val != int(val):
            raise ConfigurationError(f"{name} must be an integer")
        return int(val)
    if isinstance(current, float):
        return parse_number(raw)
    return raw.strip()


def apply_overrides(cfg: ExperimentConfig, pairs: dict[str, str]) -> ExperimentConfig:
    for key, raw in pairs.items():
        setattr(cfg, key, _convert(key, raw, cfg))
    return cfg


def parse_set_args(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, val = item.partition("=")
        if not sep or not key.strip():
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = val
    return out


def load_config(kind: str, path: Optional[str] = None,
                overrides: Optional[dict[str, str]] = None) -> ExperimentConfig:
    """Defaults for ``kind``, then ``[common]`` and ``[kind]`` file keys, then overrides."""
    if kind not in KINDS:
        raise ConfigurationError(f"unknown experiment {kind!r}")
    cfg = ExperimentConfig(kind=kind, **DEFAULTS[kind])
    env = os.environ.get(WORKERS_ENV)
    if env:
        cfg.workers = int(parse_number(env))
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigurationError(f"bad config file {path}: {exc}") from exc
        for section in ("common", kind):
            if parser.has_section(section):
                apply_overrides(cfg, dict(parser.items(section)))
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg.validate()
