"""Experiment runners. Each returns a list of :class:`MetricRow`.

Work is split into tasks whose random streams depend only on the master seed
and replicate (or chunk) ids, never on the worker that runs them, so the CSV
is the same for any worker count.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from ..core import (ConfigurationError, Purpose, RunStatus, TimeGrid,
                    derive_rng, steps_per_interval)
from ..filters import (FILTERS, ObservationEvent, ObservationOperator,
                       draw_observation_indices, run_filter)
from ..models import (Lorenz96Params, OuParams, ou_exact_moments,
                      spinup_index_count, spinup_states)
from ..schemes import (EULER, REFERENCE, SEQ_EULER, Scheme, advance,
                       generator_noise, integrate_batch)
from .config import ExperimentConfig
from .metrics import (NORM_SQ, completion_rate, fit_weak_order,
                      folded_normal_mean, nmse, phi, weak_error_from_values)

log = logging.getLogger(__name__)

AGGREGATE = -1
REPLICATE_BLOCK = 50


@dataclass
class MetricRow:
    experiment: str
    scheme: str = ""
    filter: str = ""
    h: Optional[float] = None
    sigma: Optional[float] = None
    sigma_y: Optional[float] = None
    M: Optional[int] = None
    replicate: int = AGGREGATE
    status: str = ""
    metric: str = ""
    value: Optional[float] = None
    seconds: Optional[float] = None


FIELDS = list(MetricRow.__dataclass_fields__)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.17g}"
    return str(v)


def rows_to_csv(rows: Sequence[MetricRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FIELDS)
    for r in rows:
        w.writerow([_fmt(getattr(r, f)) for f in FIELDS])
    return buf.getvalue()


def write_csv(rows: Sequence[MetricRow], path: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(rows_to_csv(rows))


def aggregates(rows: Sequence[MetricRow]) -> list[dict]:
    return [asdict(r) for r in rows if r.replicate == AGGREGATE]


def run_tasks(fn: Callable, tasks: list, workers: int) -> list:
    """``[fn(t) for t in tasks]``, optionally over a process pool; order kept."""
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
        return list(pool.map(fn, tasks, chunksize=1))


def _order(rows: list[MetricRow]) -> list[MetricRow]:
    """Stable sort by replicate id with aggregate rows last."""
    return sorted(rows, key=lambda r: (r.replicate == AGGREGATE, r.replicate))


def _l96(cfg: ExperimentConfig, sigma2: float):
    return Lorenz96Params(d_x=cfg.d_x, F=cfg.F, sigma=math.sqrt(sigma2),
                          drift=cfg.drift).sde()


def _ou(cfg: ExperimentConfig) -> OuParams:
    return OuParams(d_x=cfg.d_x, theta=cfg.theta, sigma_ou=cfg.sigma_ou)


def _sigma_axis(cfg: ExperimentConfig) -> list[float]:
    return [cfg.sigma_ou] if cfg.model == "ou" else cfg.sigma2


def _model(cfg: ExperimentConfig, sigma_val: float):
    return _ou(cfg).sde() if cfg.model == "ou" else _l96(cfg, sigma_val)


def _sigma_std(cfg: ExperimentConfig, sigma_val: float) -> float:
    return sigma_val if cfg.model == "ou" else math.sqrt(sigma_val)


def initial_states(cfg: ExperimentConfig, reps: Sequence[int]) -> np.ndarray:
    """Per-replicate initial states: spin-up draws (Lorenz 96) or ``x0`` (OU)."""
    if cfg.model == "ou":
        return np.full((len(reps), cfg.d_x), float(cfg.x0))
    n = spinup_index_count()
    idx = [int(derive_rng(cfg.seed, r, Purpose.INITIAL_CONDITION).integers(0, n))
           for r in reps]
    return spinup_states(np.array(idx), cfg.d_x, cfg.F)


def _blocks(n: int, size: int) -> list[tuple[int, int]]:
    return [(a, min(a + size, n)) for a in range(0, n, size)]


# simulate / weak-error

def _trajectory_task(args) -> list[MetricRow]:
    cfg, (lo, hi), with_reference = args
    reps = list(range(lo, hi))
    x0 = initial_states(cfg, reps)
    rows = []
    for si, sv in enumerate(_sigma_axis(cfg)):
        model = _model(cfg, sv)
        sig = _sigma_std(cfg, sv)
        runs = []
        if with_reference and cfg.oracle == "reference":
            runs.append((Scheme(EULER), TimeGrid.from_step(cfg.T, cfg.h_o),
                         f"{REFERENCE}:{cfg.h_o:g}", None,
                         lambda r: derive_rng(cfg.seed, r, Purpose.REFERENCE, si)))
        for ci, scheme in enumerate(cfg.schemes_parsed):
            for hi_, h in enumerate(cfg.h):
                runs.append((scheme, TimeGrid.from_step(cfg.T, h), str(scheme), h,
                             lambda r, ci=ci, hi_=hi_: derive_rng(
                                 cfg.seed, r, Purpose.PROPAGATION, si, ci, hi_)))
        for scheme, grid, label, h, stream in runs:
            t0 = time.perf_counter()
            outs = integrate_batch(model, scheme, x0, grid,
                                   [stream(r) for r in reps], cfg.bound)
            per = (time.perf_counter() - t0) / len(reps) if cfg.timing else None
            for r, out in zip(reps, outs):
                base = dict(experiment=cfg.kind, scheme=label, h=h, sigma=sig,
                            replicate=r, status=out.status.value)
                rows.append(MetricRow(metric="status", seconds=per, **base))
                if out.completed:
                    rows.append(MetricRow(metric="phi", **base,
                                          value=float(phi(out.final_state, cfg.phi))))
                else:
                    rows.append(MetricRow(metric="explosion_step", **base,
                                          value=float(out.explosion_step)))
    return rows


def _analytic_reference(cfg: ExperimentConfig) -> float:
    if cfg.model != "ou":
        raise ConfigurationError("the analytic oracle needs the ou model")
    mean, var = ou_exact_moments(_ou(cfg), cfg.x0, cfg.T)
    if cfg.phi == NORM_SQ:
        return float(np.sum(mean ** 2 + var))
    if cfg.d_x != 1:
        raise ConfigurationError("analytic E|X| is only available for d_x = 1")
    return folded_normal_mean(float(mean[0]), float(var[0]))


def _trajectory_study(cfg: ExperimentConfig, with_reference: bool) -> list[MetricRow]:
    tasks = [(cfg, b, with_reference)
             for b in _blocks(cfg.replicates, REPLICATE_BLOCK)]
    rows = [r for part in run_tasks(_trajectory_task, tasks, cfg.workers)
            for r in part]
    agg = []
    for sv in _sigma_axis(cfg):
        sig = _sigma_std(cfg, sv)
        cell = [r for r in rows if r.sigma == sig]
        ref_value = None
        if with_reference:
            if cfg.oracle == "analytic":
                ref_value = _analytic_reference(cfg)
            else:
                label = f"{REFERENCE}:{cfg.h_o:g}"
                vals = [r.value for r in cell if r.scheme == label and r.metric == "phi"]
                if not vals:
                    raise ConfigurationError("no completed reference runs")
                ref_value = float(np.mean(vals))
                agg.append(MetricRow(cfg.kind, scheme=label, h=cfg.h_o, sigma=sig,
                                     metric="ell", value=ref_value))
        for scheme in cfg.schemes_parsed:
            for h in cfg.h:
                sel = [r for r in cell if r.scheme == str(scheme) and r.h == h]
                statuses = [r.status for r in sel if r.metric == "status"]
                common = dict(scheme=str(scheme), h=h, sigma=sig)
                agg.append(MetricRow(cfg.kind, **common, metric="completion_rate",
                                     value=completion_rate(statuses)))
                vals = [r.value for r in sel if r.metric == "phi"]
                if vals:
                    value = float(np.mean(vals))
                    agg.append(MetricRow(cfg.kind, **common, metric="ell", value=value))
                    if ref_value is not None:
                        agg.append(MetricRow(cfg.kind, **common, metric="weak_error",
                                             value=weak_error_from_values(ref_value, value)))
                if cfg.timing:
                    secs = [r.seconds for r in sel if r.metric == "status"
                            and r.status == RunStatus.COMPLETED.value]
                    if secs:
                        agg.append(MetricRow(cfg.kind, **common, metric="median_seconds",
                                             value=float(np.median(secs))))
    return _order(rows) + agg


def run_simulate(cfg: ExperimentConfig) -> list[MetricRow]:
    return _trajectory_study(cfg, with_reference=False)


def run_weak_error_study(cfg: ExperimentConfig) -> list[MetricRow]:
    return _trajectory_study(cfg, with_reference=True)


# order-check

_MOMENTS = (("x", 1), ("x2", 2))


def _order_task(args) -> list[MetricRow]:
    cfg, chunk_id, lo, hi = args
    params = _ou(cfg)
    model = params.sde()
    B = hi - lo
    rows = []
    for ci, scheme in enumerate(cfg.schemes_parsed):
        for hi_, h in enumerate(cfg.h):
            rng = derive_rng(cfg.seed, chunk_id, Purpose.PROPAGATION, ci, hi_)
            grid = TimeGrid.from_step(cfg.T, h)
            x0 = np.full((B, cfg.d_x), float(cfg.x0))
            x, exploded = advance(model, scheme, x0, 0, grid.N, h,
                                  generator_noise(rng, B, cfg.d_x), cfg.bound)
            ok = exploded < 0
            status = (RunStatus.COMPLETED if ok.all() else RunStatus.EXPLODED).value
            base = dict(experiment=cfg.kind, scheme=str(scheme), h=h,
                        sigma=cfg.sigma_ou, replicate=chunk_id, status=status)
            rows.append(MetricRow(metric="status", **base))
            rows.append(MetricRow(metric="count", value=float(ok.sum()), **base))
            for name, p in _MOMENTS:
                vals = (x[ok] ** p).mean(axis=1)
                rows.append(MetricRow(metric=f"sum_{name}", value=float(vals.sum()), **base))
                rows.append(MetricRow(metric=f"sumsq_{name}",
                                      value=float((vals ** 2).sum()), **base))
    return rows


def order_check_summary(rows: Sequence[MetricRow], cfg: ExperimentConfig
                        ) -> dict[tuple[str, str], dict]:
    """Per (scheme, phi): errors, standard errors and fitted slope."""
    mean, var = ou_exact_moments(_ou(cfg), cfg.x0, cfg.T)
    exact = {"x": float(mean.mean()), "x2": float((mean ** 2 + var).mean())}
    out = {}
    for scheme in cfg.schemes_parsed:
        for name, _ in _MOMENTS:
            errs, ses = [], []
            for h in cfg.h:
                sel = [r for r in rows if r.scheme == str(scheme) and r.h == h]
                n = sum(r.value for r in sel if r.metric == "count")
                s1 = sum(r.value for r in sel if r.metric == f"sum_{name}")
                s2 = sum(r.value for r in sel if r.metric == f"sumsq_{name}")
                est = s1 / n
                sd = math.sqrt(max(s2 / n - est * est, 0.0) * n / max(n - 1, 1))
                errs.append(abs(est - exact[name]))
                ses.append(sd / math.sqrt(n))
            try:
                slope = fit_weak_order(cfg.h, errs)
            except ConfigurationError:
                slope = float("nan")
            out[(str(scheme), name)] = dict(errors=errs, stderr=ses, slope=slope)
    return out


def run_order_check(cfg: ExperimentConfig) -> list[MetricRow]:
    tasks = [(cfg, i, lo, hi)
             for i, (lo, hi) in enumerate(_blocks(cfg.replicates, cfg.chunk))]
    rows = [r for part in run_tasks(_order_task, tasks, cfg.workers) for r in part]
    agg = []
    for (scheme, name), res in order_check_summary(rows, cfg).items():
        for h, err, se in zip(cfg.h, res["errors"], res["stderr"]):
            common = dict(scheme=scheme, h=h, sigma=cfg.sigma_ou)
            agg.append(MetricRow(cfg.kind, **common, metric=f"error_{name}", value=err))
            agg.append(MetricRow(cfg.kind, **common, metric=f"stderr_{name}", value=se))
        for (h1, e1), (_, e2) in zip(zip(cfg.h, res["errors"]),
                                     zip(cfg.h[1:], res["errors"][1:])):
            agg.append(MetricRow(cfg.kind, scheme=scheme, h=h1, sigma=cfg.sigma_ou,
                                 metric=f"ratio_{name}",
                                 value=e1 / e2 if e2 else float("nan")))
        agg.append(MetricRow(cfg.kind, scheme=scheme, sigma=cfg.sigma_ou,
                             metric=f"slope_{name}", value=res["slope"]))
    return _order(rows) + agg


# twin experiments

@dataclass
class Twin:
    x0: np.ndarray
    truth: np.ndarray          # (K, d_x) states at observation times
    indices: list[np.ndarray]  # observed coordinates per k
    noise: np.ndarray          # (K, d_y) standard normal observation noise

    def events(self, sigma_y: float, steps: int) -> list[ObservationEvent]:
        evs = []
        for k, (idx, u) in enumerate(zip(self.indices, self.noise)):
            op = ObservationOperator(idx, sigma_y)
            evs.append(ObservationEvent(k + 1, (k + 1) * steps, op,
                                        op.apply(self.truth[k]) + sigma_y * u))
        return evs


def make_twin(cfg: ExperimentConfig, rep: int, sigma_idx: int,
              sigma2: float) -> Twin:
    """Ground truth at step ``h_o`` and observation ingredients for one replicate."""
    model = _l96(cfg, sigma2)
    x0 = initial_states(cfg, [rep])[0]
    K = steps_per_interval(cfg.T, cfg.delta)
    per = steps_per_interval(cfg.delta, cfg.h_o)
    draw = generator_noise(derive_rng(cfg.seed, rep, Purpose.TRUTH, sigma_idx),
                           1, cfg.d_x)
    x = x0[None].copy()
    truth = np.empty((K, cfg.d_x))
    for k in range(K):
        x, exploded = advance(model, Scheme(EULER), x, k * per, per, cfg.h_o,
                              draw, cfg.bound, stop_on_explosion=True)
        if exploded[0] >= 0:
            raise RuntimeError(f"ground truth exploded (replicate {rep})")
        truth[k] = x[0]
    irng = derive_rng(cfg.seed, rep, Purpose.OBSERVATION_INDICES)
    indices = [draw_observation_indices(irng, cfg.d_x, cfg.obs_dim) for _ in range(K)]
    noise = derive_rng(cfg.seed, rep, Purpose.OBSERVATION_NOISE,
                       sigma_idx).standard_normal((K, cfg.obs_dim))
    return Twin(x0, truth, indices, noise)


def initial_ensemble(cfg: ExperimentConfig, twin: Twin, rep: int, M: int) -> np.ndarray:
    rng = derive_rng(cfg.seed, rep, Purpose.ENSEMBLE_INIT, M)
    return twin.x0 + rng.standard_normal((M, cfg.d_x))


def _filter_once(cfg, model, twin, name, h, sigma_y, ens0, rng):
    grid = TimeGrid.from_step(cfg.T, h)
    evs = twin.events(sigma_y, steps_per_interval(cfg.delta, h))
    t0 = time.perf_counter()
    est = run_filter(name, model, grid, evs, ens0, rng, bound=cfg.bound,
                     add_obs_cov=cfg.add_obs_cov, jitter=cfg.jitter)
    return est, time.perf_counter() - t0


def _robustness_task(args) -> list[MetricRow]:
    cfg, rep, si, s2 = args
    twin = make_twin(cfg, rep, si, s2)
    model = _l96(cfg, s2)
    rows = []
    for yi, sy2 in enumerate(cfg.sigma_y2):
        sigma_y = math.sqrt(sy2)
        for M in cfg.M:
            ens0 = initial_ensemble(cfg, twin, rep, M)
            for fi, name in enumerate(cfg.filters):
                for hi_, h in enumerate(cfg.h):
                    rng = derive_rng(cfg.seed, rep, Purpose.PROPAGATION, si, yi,
                                     FILTERS.index(name), hi_, M)
                    est, secs = _filter_once(cfg, model, twin, name, h, sigma_y,
                                             ens0, rng)
                    base = dict(experiment=cfg.kind, filter=name, h=h,
                                sigma=math.sqrt(s2), sigma_y=sigma_y, M=M,
                                replicate=rep, status=est.status.value)
                    rows.append(MetricRow(metric="status", **base,
                                          seconds=secs if cfg.timing else None))
                    if est.completed:
                        rows.append(MetricRow(metric="nmse", **base,
                                              value=nmse(twin.truth, est.means)))
                    else:
                        rows.append(MetricRow(metric="failed_k", **base,
                                              value=float(est.failed_k)))
    return rows


def run_robustness_study(cfg: ExperimentConfig) -> list[MetricRow]:
    tasks = [(cfg, rep, si, s2) for rep in range(cfg.replicates)
             for si, s2 in enumerate(cfg.sigma2)]
    rows = [r for part in run_tasks(_robustness_task, tasks, cfg.workers) for r in part]
    agg = []
    for s2 in cfg.sigma2:
        for sy2 in cfg.sigma_y2:
            for M in cfg.M:
                for name in cfg.filters:
                    for h in cfg.h:
                        key = dict(filter=name, h=h, sigma=math.sqrt(s2),
                                   sigma_y=math.sqrt(sy2), M=M)
                        st = [r.status for r in rows if r.metric == "status"
                              and all(getattr(r, k) == v for k, v in key.items())]
                        agg.append(MetricRow(cfg.kind, **key, metric="completion_rate",
                                             value=completion_rate(st)))
    return _order(rows) + agg


def _bench_task(args) -> list[MetricRow]:
    cfg, rep, si, (s2, sy2) = args
    twin = make_twin(cfg, rep, si, s2)
    model = _l96(cfg, s2)
    steps = cfg.steps_for((s2, sy2))
    sigma_y = math.sqrt(sy2)
    rows = []
    for M in cfg.M:
        ens0 = initial_ensemble(cfg, twin, rep, M)
        for name in cfg.filters:
            h = steps[name]
            rng = derive_rng(cfg.seed, rep, Purpose.PROPAGATION, si,
                             FILTERS.index(name), M)
            est, secs = _filter_once(cfg, model, twin, name, h, sigma_y, ens0, rng)
            base = dict(experiment=cfg.kind, filter=name, h=h, sigma=math.sqrt(s2),
                        sigma_y=sigma_y, M=M, replicate=rep, status=est.status.value)
            rows.append(MetricRow(metric="status", **base,
                                  seconds=secs if cfg.timing else None))
            if est.completed:
                rows.append(MetricRow(metric="nmse", **base,
                                      value=nmse(twin.truth, est.means)))
    return rows


def run_filter_bench(cfg: ExperimentConfig) -> list[MetricRow]:
    tasks = [(cfg, rep, si, sc) for rep in range(cfg.replicates)
             for si, sc in enumerate(cfg.scenarios)]
    rows = [r for part in run_tasks(_bench_task, tasks, cfg.workers) for r in part]
    agg = []
    for s2, sy2 in cfg.scenarios:
        steps = cfg.steps_for((s2, sy2))
        for name in cfg.filters:
            for M in cfg.M:
                key = dict(filter=name, h=steps[name], sigma=math.sqrt(s2),
                           sigma_y=math.sqrt(sy2), M=M)
                sel = [r for r in rows
                       if all(getattr(r, k) == v for k, v in key.items())]
                st = [r for r in sel if r.metric == "status"]
                vals = [r.value for r in sel if r.metric == "nmse"]
                agg.append(MetricRow(cfg.kind, **key, metric="mean_nmse",
                                     value=float(np.mean(vals)) if vals else None))
                agg.append(MetricRow(cfg.kind, **key, metric="failures",
                                     value=float(len(st) - len(vals))))
                agg.append(MetricRow(cfg.kind, **key, metric="completion_rate",
                                     value=completion_rate([r.status for r in st])))
                if cfg.timing:
                    agg.append(MetricRow(cfg.kind, **key, metric="mean_seconds",
                                         value=float(np.mean([r.seconds for r in st]))))
    return _order(rows) + agg


RUNNERS = {
    "simulate": run_simulate,
    "weak-error": run_weak_error_study,
    "order-check": run_order_check,
    "robustness": run_robustness_study,
    "filter-bench": run_filter_bench,
}


def run_experiment(cfg: ExperimentConfig) -> list[MetricRow]:
    return RUNNERS[cfg.kind](cfg)


def oracle_checks(cfg: ExperimentConfig, rows: Sequence[MetricRow]
                  ) -> list[tuple[str, bool, str]]:
    """Checks against analytic oracles, used by ``--check``."""
    checks = []
    if cfg.kind == "order-check":
        for (scheme, name), res in order_check_summary(rows, cfg).items():
            slope = res["slope"]
            checks.append((f"slope {scheme} phi={name}", 0.8 <= slope <= 1.2,
                           f"{slope:.4f}"))
    elif cfg.kind == "weak-error" and cfg.oracle == "analytic":
        for r in rows:
            if r.replicate == AGGREGATE and r.metric == "weak_error":
                checks.append((f"weak error {r.scheme} h={r.h:g} finite",
                               math.isfinite(r.value), f"{r.value:.4g}"))
    return checks
