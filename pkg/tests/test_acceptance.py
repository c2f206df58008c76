"""Acceptance criteria, each run at its stated scale and tolerance.

Every test prints one ``CRITERION <n> PASS|FAIL`` line before asserting.
Criteria 6 and 7 are marked ``slow``: on a single core they take about an
hour each. Skip them with ``-m "not slow"``.
"""

import math

import numpy as np
import pytest

from sdeassim.core import BlockSde, Purpose, TimeGrid, derive_rng
from sdeassim.filters import ENKF_EULER, ENKF_SEQ, SENKF_EULER, SENKF_SEQ
from sdeassim.harness.config import load_config
from sdeassim.harness.experiments import rows_to_csv, run_experiment
from sdeassim.harness.oracle import make_ou_twin, ou_enkf, ou_kalman
from sdeassim.models import OuParams
from sdeassim.schemes import EULER, SEQ_EULER, Scheme, integrate


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


def pick(rows, metric, **key):
    return [r for r in rows if r.metric == metric
            and all(getattr(r, k) == v for k, v in key.items())]


def test_criterion_1_weak_order_on_ou(report):
    cfg = load_config("order-check", None, {"replicates": "200000"})
    rows = run_experiment(cfg)
    slopes = {m: pick(rows, m, scheme=SEQ_EULER)[0].value for m in ("slope_x", "slope_x2")}
    ok = all(0.8 <= s <= 1.2 for s in slopes.values())
    report(1, ok, "seq-euler slopes "
           + ", ".join(f"{k}={v:.3f}" for k, v in slopes.items()) + " (band [0.8, 1.2])")


def test_criterion_2_noise_equivalence(report):
    d, n, h = 10, 1000, 1e-3

    def block(i, x, t):
        return (1.0 + 0.5 * np.sin(x[..., i:i + 1]))[..., :, None]

    model = BlockSde(d_x=d, q=d, drift=lambda x, t: np.zeros_like(x),
                     diffusion_block=block)
    grid = TimeGrid.from_step(n * h, h)
    x0 = np.linspace(-1.0, 1.0, d)
    steps = range(n + 1)
    out = {kind: integrate(model, Scheme(kind), x0, grid,
                           derive_rng(11, 0, Purpose.PROPAGATION), sample_steps=steps)
           for kind in (EULER, SEQ_EULER)}
    same = all(np.array_equal(out[EULER].sampled_states[k], out[SEQ_EULER].sampled_states[k])
               for k in steps)
    moved = not np.array_equal(out[EULER].final_state, x0)
    report(2, same and moved, f"bitwise identical over {n} steps: {same}")


def test_criterion_3_scheme_robustness(report):
    cfg = load_config("simulate", None, {"d_x": "200", "sigma2": "1/2", "T": "2",
                                         "h": "5e-2, 1e-3", "replicates": "100"})
    rows = run_experiment(cfg)
    rate = {(r.scheme, r.h): r.value for r in pick(rows, "completion_rate")}
    ok = (rate[(SEQ_EULER, 5e-2)] >= 95 and rate[(EULER, 5e-2)] <= 20
          and rate[(SEQ_EULER, 1e-3)] == 100 and rate[(EULER, 1e-3)] == 100)
    report(3, ok, "completion % " + ", ".join(f"{s}@{h:g}={v:g}"
                                              for (s, h), v in sorted(rate.items())))


OU = OuParams(d_x=1, theta=1.0, sigma_ou=0.5)


def test_criterion_4_enkf_matches_kalman(report):
    sq, sd = [], []
    for seed in range(20):
        twin = make_ou_twin(OU, 50, 0.1, 0.5, seed, 0)
        mean, cov = ou_kalman(twin, include_obs_cov_in_gain=False)
        est = ou_enkf(twin, SEQ_EULER, 1e-3, 10_000, seed, 0)
        sq.append(np.mean((est.means - mean) ** 2))
        sd.append(np.mean(np.sqrt(cov[:, 0, 0])))
    rms, std = math.sqrt(np.mean(sq)), float(np.mean(sd))
    report(4, rms < 0.1 * std, f"RMS {rms:.5f} vs 0.1 x oracle std {0.1 * std:.5f}")


def test_criterion_5_filter_h_convergence(report):
    # bias of the EnKF mean against the continuous-time Kalman mean, measured
    # along the deterministic offset the h = 0.02 discretisation induces
    ratios = {}
    for kind in (SEQ_EULER, EULER):
        num = {0.02: 0.0, 0.01: 0.0}
        for seed in range(50):
            twin = make_ou_twin(OU, 50, 0.1, 0.5, seed, 0)
            exact, _ = ou_kalman(twin)
            direction = ou_kalman(twin, kind=kind, h=0.02)[0] - exact
            for h in num:
                est = ou_enkf(twin, kind, h, 10_000, seed, 1, add_obs_cov=True)
                num[h] += float(np.sum((est.means - exact) * direction))
        ratios[kind] = num[0.02] / num[0.01]
    ok = 1.5 <= ratios[SEQ_EULER] <= 3.0
    report(5, ok, f"bias ratio seq-euler {ratios[SEQ_EULER]:.3f} (band [1.5, 3.0]); "
           f"euler {ratios[EULER]:.3f}")


@pytest.mark.slow
def test_criterion_6_filter_robustness(report):
    # observation noise follows the scenario pairs (1/4, 1/4), (1/2, 1/4), (1, 1)
    fine = run_experiment(load_config("robustness", None, {"h": "1e-3",
                                                           "sigma2": "1/4, 1/2",
                                                           "sigma_y2": "1/4"}))
    coarse = run_experiment(load_config("robustness", None, {"h": "5e-3, 1e-2",
                                                             "sigma2": "1",
                                                             "sigma_y2": "1"}))
    rate = {(r.filter, r.h, round(r.sigma ** 2, 6)): r.value
            for r in pick(fine + coarse, "completion_rate")}
    seq, eul = (ENKF_SEQ, SENKF_SEQ), (ENKF_EULER, SENKF_EULER)
    a = all(rate[(f, 1e-3, s2)] >= 99 for f in seq + eul for s2 in (0.25, 0.5))
    b = (all(rate[(f, 5e-3, 1.0)] >= 95 for f in seq)
         and all(rate[(f, 5e-3, 1.0)] <= 20 for f in eul))
    c = all(70 <= rate[(f, 1e-2, 1.0)] <= 95 for f in seq)
    detail = ", ".join(f"{f}@h={h:g},s2={s2:g}:{v:g}%"
                       for (f, h, s2), v in sorted(rate.items()))
    report(6, a and b and c, f"(a) {a} (b) {b} (c) {c}; {detail}")


@pytest.mark.slow
def test_criterion_7_nmse_study(report):
    cfg = load_config("filter-bench", None, {"scenarios": "1/2:1/4",
                                             "M": "50, 100, 200, 400",
                                             "replicates": "10"})
    rows = run_experiment(cfg)
    mean = {(r.filter, r.M): r.value for r in pick(rows, "mean_nmse")}
    done = {(r.filter, r.M): r.value for r in pick(rows, "completion_rate")}
    # a (filter, M) cell completes when all of its replicates complete; a
    # filter with no completed run at M = 100 counts as infinitely inaccurate
    full = {key for key, v in done.items() if v == 100}
    monotone = all(mean[(f, a)] >= mean[(f, b)] for f in cfg.filters
                   for a, b in zip(cfg.M, cfg.M[1:]) if {(f, a), (f, b)} <= full)
    at100 = {f: math.inf if mean[(f, 100)] is None else mean[(f, 100)]
             for f in (SENKF_SEQ, ENKF_SEQ)}
    ordered = at100[SENKF_SEQ] <= at100[ENKF_SEQ]
    large = [mean[key] for key in full if key[1] >= 200]
    agree = bool(large) and max(large) <= 1.5 * min(large)

    def fmt(f, M):
        v = mean[(f, M)]
        return f"{'-' if v is None else f'{v:.4f}'}({done[(f, M)]:g}%)"

    detail = "; ".join(f"{f}: " + " ".join(fmt(f, M) for M in cfg.M) for f in cfg.filters)
    report(7, monotone and ordered and agree,
           f"non-increasing {monotone}, SEnKF<=EnKF at M=100 {ordered}, "
           f"factor-1.5 agreement {agree}; mean NMSE (completion) over M={cfg.M}: {detail}")


def test_criterion_8_determinism(report):
    def study(kind, workers, **extra):
        return rows_to_csv(run_experiment(load_config(kind, None, dict(extra,
                                                                       workers=str(workers)))))
    sim = dict(d_x="10", T="1", h="1e-2, 1e-3", sigma2="1/4, 1", replicates="60", seed="4")
    bench = dict(d_x="12", T="0.3", M="10", h_o="1e-3", replicates="3",
                 scenarios="1/4:1/4", seed="4")
    same = [len({study("simulate", w, **sim) for w in (1, 2, 3, 1)}) == 1,
            len({study("filter-bench", w, **bench) for w in (1, 2)}) == 1,
            len({study("order-check", w, replicates="4000") for w in (1, 4)}) == 1]
    report(8, all(same), f"byte-identical CSV (simulate, filter-bench, order-check): {same}")
