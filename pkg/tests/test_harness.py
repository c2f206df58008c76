import csv
import io
import json
import math

import numpy as np
import pytest

from sdeassim.core import ConfigurationError, TimeGrid
from sdeassim.harness.cli import main
from sdeassim.harness.config import (TABLE_STEPS, load_config, parse_number,
                                     parse_scenarios, parse_set_args,
                                     parse_step_table)
from sdeassim.harness.experiments import (AGGREGATE, make_twin, rows_to_csv,
                                          run_experiment)
from sdeassim.harness.metrics import folded_normal_mean
from sdeassim.models import OuParams, ou_exact_moments, ou_scheme_moments
from sdeassim.schemes import EULER, SEQ_EULER


def parse_csv(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_number_and_list_parsing():
    assert parse_number("1/4") == 0.25
    assert parse_number("5e-3") == 0.005
    with pytest.raises(ConfigurationError):
        parse_number("abc")
    assert parse_scenarios("1/4:1/4, 1:1") == [(0.25, 0.25), (1.0, 1.0)]
    table = parse_step_table("1/2:1/4 = 1e-3 1e-3 1e-2 1e-2")
    assert table[(0.5, 0.25)] == (1e-3, 1e-3, 1e-2, 1e-2)
    assert parse_set_args(["a=1", "b = x"]) == {"a": "1", "b": " x"}
    with pytest.raises(ConfigurationError):
        parse_set_args(["novalue"])


def test_config_layers(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text("[common]\nseed = 9\n\n[simulate]\nh = 1e-2, 5e-2\nsigma2 = 1/4\n"
                    "replicates = 7\n")
    cfg = load_config("simulate", str(path), {"replicates": "3"})
    assert cfg.seed == 9 and cfg.h == [1e-2, 5e-2] and cfg.sigma2 == [0.25]
    assert cfg.replicates == 3
    with pytest.raises(ConfigurationError):
        load_config("simulate", None, {"no_such_key": "1"})
    with pytest.raises(ConfigurationError):
        load_config("simulate", None, {"h": "0.3"})          # does not divide T
    with pytest.raises(ConfigurationError):
        load_config("robustness", None, {"h": "0.03"})       # does not divide delta
    with pytest.raises(ConfigurationError):
        load_config("simulate", str(tmp_path / "missing.ini"))


def test_workers_env(monkeypatch):
    monkeypatch.setenv("SDEASSIM_WORKERS", "3")
    assert load_config("simulate").workers == 3


def test_table_steps():
    cfg = load_config("filter-bench")
    assert set(cfg.steps_for((0.25, 0.25)).values()) == {1e-2}
    steps = cfg.steps_for((1.0, 1.0))
    assert steps["euler-enkf"] == steps["euler-senkf"] == 1e-4
    assert steps["seq-euler-enkf"] == steps["seq-euler-senkf"] == 5e-3
    assert TABLE_STEPS[(0.5, 0.25)] == (1e-3, 1e-3, 1e-2, 1e-2)


def small_simulate(workers):
    cfg = load_config("simulate", None, {"d_x": "12", "T": "0.5", "h": "0.05, 0.01",
                                         "sigma2": "1/2", "replicates": "60",
                                         "seed": "5", "workers": str(workers)})
    return rows_to_csv(run_experiment(cfg))


def test_every_replicate_has_one_status_row():
    rows = parse_csv(small_simulate(1))
    reps = [r for r in rows if r["replicate"] != str(AGGREGATE)]
    keys = {(r["scheme"], r["h"], r["replicate"]) for r in reps}
    status = [r for r in reps if r["metric"] == "status"]
    assert len(status) == len(keys) == 2 * 2 * 60
    agg = [r for r in rows if r["metric"] == "completion_rate"]
    assert len(agg) == 4


def test_csv_independent_of_worker_count():
    assert small_simulate(1) == small_simulate(2)


def test_order_check_independent_of_worker_count():
    def go(workers):
        cfg = load_config("order-check", None, {"replicates": "5000", "chunk": "1000",
                                                "workers": str(workers)})
        return rows_to_csv(run_experiment(cfg))
    assert go(1) == go(3)


def test_order_check_deterministic_limit():
    cfg = load_config("order-check", None, {"sigma_ou": "0", "replicates": "10"})
    rows = run_experiment(cfg)
    slope = {r.scheme: r.value for r in rows if r.metric == "slope_x"}
    assert 0.95 <= slope[EULER] <= 1.05
    assert slope[SEQ_EULER] >= 1.0
    ratios = [r.value for r in rows if r.metric.startswith("ratio_")]
    assert all(1.6 <= v <= 2.5 for v in ratios)


def test_order_check_errors_match_scheme_moments():
    cfg = load_config("order-check", None, {"replicates": "40000"})
    rows = run_experiment(cfg)
    p = OuParams(4, 1.0, 0.5)
    m, _ = ou_exact_moments(p, np.ones(4), 1.0)
    for kind in (EULER, SEQ_EULER):
        for h in cfg.h:
            mm, _ = ou_scheme_moments(p, kind, np.ones(4), TimeGrid.from_step(1.0, h))
            (err,) = [r.value for r in rows if r.metric == "error_x" and r.scheme == kind
                      and r.h == h]
            (se,) = [r.value for r in rows if r.metric == "stderr_x" and r.scheme == kind
                     and r.h == h]
            assert abs(err - abs(mm[0] - m[0])) < 4 * se


def test_ou_weak_error_against_analytic_reference():
    # closed-form weak errors of the two schemes at h = 0.1 (folded normal means)
    frozen = {EULER: 0.021175, SEQ_EULER: 0.061930}
    cfg = load_config("weak-error", None, {"model": "ou", "d_x": "1", "T": "1",
                                           "h": "0.1", "oracle": "analytic",
                                           "replicates": "20000"})
    rows = run_experiment(cfg)
    p = OuParams(1, 1.0, 0.5)
    m, v = ou_exact_moments(p, np.ones(1), 1.0)
    ref = folded_normal_mean(m[0], v[0])
    for kind, value in frozen.items():
        mm, vv = ou_scheme_moments(p, kind, np.ones(1), TimeGrid.from_step(1.0, 0.1))
        assert abs(ref - folded_normal_mean(mm[0], vv[0])) / ref == pytest.approx(value, abs=1e-6)
        (err,) = [r.value for r in rows if r.metric == "weak_error" and r.scheme == kind]
        se = math.sqrt(vv[0] / 20000) / ref
        assert abs(err - value) < 3 * se


def test_weak_error_with_reference_runs():
    cfg = load_config("weak-error", None, {"d_x": "8", "T": "0.2", "h": "0.05, 0.01",
                                           "h_o": "1e-4", "sigma2": "1/4",
                                           "replicates": "20"})
    rows = run_experiment(cfg)
    ref = [r for r in rows if r.scheme.startswith("reference") and r.metric == "ell"]
    assert len(ref) == 1
    errs = [r for r in rows if r.metric == "weak_error"]
    assert len(errs) == 4 and all(e.value >= 0 for e in errs)


def test_twin_observation_alignment():
    cfg = load_config("robustness", None, {"d_x": "10", "T": "0.3", "replicates": "1",
                                           "h_o": "1e-3"})
    twin = make_twin(cfg, 0, 0, 0.25)
    for h in (1e-3, 5e-3, 1e-2):
        steps = round(cfg.delta / h)
        for ev in twin.events(0.5, steps):
            assert ev.n_k == ev.k * steps
            assert ev.n_k * h == pytest.approx(ev.k * cfg.delta, rel=1e-12)
    assert twin.truth.shape == (3, 10)
    assert all(len(i) == 5 for i in twin.indices)


def test_robustness_study_small():
    cfg = load_config("robustness", None, {"d_x": "12", "T": "0.3", "h": "1e-2",
                                           "sigma2": "1/4", "M": "12", "h_o": "1e-3",
                                           "replicates": "3"})
    rows = run_experiment(cfg)
    rates = [r for r in rows if r.metric == "completion_rate"]
    assert len(rates) == 4 and all(r.value == 100.0 for r in rates)
    nmse = [r for r in rows if r.metric == "nmse"]
    assert len(nmse) == 12 and all(0 < r.value < 1 for r in nmse)


def test_filter_bench_small():
    cfg = load_config("filter-bench", None, {
        "d_x": "12", "T": "0.2", "M": "10, 20", "h_o": "1e-3", "replicates": "2",
        "scenarios": "1/4:1/4", "timing": "true"})
    rows = run_experiment(cfg)
    mean = [r for r in rows if r.metric == "mean_nmse"]
    assert len(mean) == 8
    assert {r.h for r in mean} == {1e-2}
    assert all(r.seconds is not None for r in rows if r.metric == "status")


def test_cost_grows_as_step_shrinks():
    cfg = load_config("simulate", None, {"d_x": "40", "T": "1", "h": "0.01, 0.001",
                                         "sigma2": "1/4", "replicates": "20",
                                         "timing": "true"})
    rows = run_experiment(cfg)
    med = {(r.scheme, r.h): r.value for r in rows if r.metric == "median_seconds"}
    for kind in (EULER, SEQ_EULER):
        assert med[(kind, 0.001)] >= med[(kind, 0.01)]


def test_cli_success_and_outputs(tmp_path, capsys):
    out = tmp_path / "r.csv"
    summary = tmp_path / "s.json"
    code = main(["order-check", "--seed", "3", "--set", "replicates=200000",
                 "--out", str(out), "--json-summary", str(summary), "--check"])
    assert code == 0
    text = out.read_text()
    assert text.splitlines()[0].startswith("experiment,scheme,filter,h")
    data = json.loads(summary.read_text())
    assert data["seed"] == 3 and data["checks"]
    assert "PASS" in capsys.readouterr().err


def test_cli_configuration_error(capsys):
    assert main(["simulate", "--set", "h=0.3"]) == 2
    assert "configuration error" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["nonsense"])
    assert exc.value.code == 2


def test_cli_check_failure(tmp_path):
    # with no noise and x0 = 0 every error is zero, so no order can be fitted
    code = main(["order-check", "--set", "sigma_ou=0", "--set", "x0=0",
                 "--set", "replicates=10", "--out", str(tmp_path / "o.csv"), "--check"])
    assert code == 3
