from dataclasses import replace
import os

import numpy as np
import pytest

from fobmaml import inner as inner_mod
from fobmaml.errors import ConfigError, FitError
from fobmaml.estimators import HyperParams, batch_estimate
from fobmaml.experiment import (
    CSV_FIELDS,
    HVP_COST,
    RunRecord,
    SweepConfig,
    config_from_dict,
    config_to_dict,
    apply_overrides,
    fit_loglog_slope,
    normalized_cost,
    read_config,
    read_records,
    records_to_csv,
    run_bias_sweep,
    run_training,
    smoothness_probe,
    solve_budget,
    sort_records,
    train_once,
    write_effective_config,
    write_records,
)
from fobmaml.tasks import TaskFamily, sample_family

CONFIGS = os.path.join(os.path.dirname(__file__), "..", "configs")
SMALL = TaskFamily(d=6, M=3, eig_min=0.1, eig_max=1.0)


def small_config(**kw):
    return SweepConfig(lam=2.0, family=SMALL, **kw)


def _blank_wall(text):
    col = CSV_FIELDS.index("wall_ms")
    lines = []
    for line in text.splitlines():
        cells = line.split(",")
        cells[col] = ""
        lines.append(",".join(cells))
    return lines


# -- sweeps ---------------------------------------------------------------------------


def test_sweep_shape_and_infeasible_points():
    config = small_config(seeds=(0, 1), budgets=(5, 10, 20))
    records = run_bias_sweep(config)
    counts = {}
    for r in records:
        counts[(r.method, r.cg_steps)] = counts.get((r.method, r.cg_steps), 0) + 1
    assert counts[("imaml", 2)] == 2 * 2  # budget 5 < 4*2
    assert counts[("imaml", 5)] == 2 * 1  # only budget 20 fits 4*5
    assert counts[("fobmaml_forward", None)] == 2 * 3
    assert len(records) == 2 * (4 * 3 + 2 + 1)
    assert all(not r.error for r in records)


def test_linear_task_zero_bias():
    config = SweepConfig(lam=2.0, family=TaskFamily(d=1, M=1, linear=True),
                         methods=("fobmaml_forward", "fobmaml_symmetric", "fomaml"))
    for r in run_bias_sweep(config):
        assert r.bias_abs <= 1e-10


def test_bias_shapes_on_ill_conditioned_family():
    config = SweepConfig(lam=2.0, family=TaskFamily(d=20, M=2, eig_min=1e-4), methods=("fobmaml_symmetric", "fomaml"))
    records = run_bias_sweep(config)
    fb = [r.bias_abs for r in records if r.method == "fobmaml_symmetric"]
    fo = [r.bias_abs for r in records if r.method == "fomaml"]
    assert all(a > b for a, b in zip(fb, fb[1:]))
    assert max(fo[2:]) / min(fo[2:]) < 1.1


def test_imaml_full_cg_is_exact():
    config = small_config(methods=("imaml",), cg_steps=(6,), budgets=(2000,), imaml_budget="raw")
    (rec,) = run_bias_sweep(config)
    assert rec.bias_abs <= 1e-6


def test_estimator_failure_is_recorded():
    config = small_config(methods=("reptile", "fomaml"), budgets=(0, 5))
    records = run_bias_sweep(config)
    bad = [r for r in records if r.error]
    assert [(r.method, r.inner_iters) for r in bad] == [("reptile", 0)]
    assert len(records) == 4


def test_delta_budgets_record_iterations():
    config = small_config(methods=("fobmaml_forward", "reptile"), budget_kind="delta", budgets=(1e-4, 1e-8))
    records = run_bias_sweep(config)
    assert {r.method for r in records} == {"fobmaml_forward"}
    assert records[0].inner_iters < records[1].inner_iters
    assert [r.delta for r in records] == [1e-4, 1e-8]


def test_forward_bias_slope_in_nu():
    config = SweepConfig(lam=2.0, family=TaskFamily(d=20, M=2), methods=("fobmaml_forward",), solver="exact",
                         nu_mode="grid", nu_values=tuple(np.logspace(-1, -4, 7)), budgets=(0,))
    slope, _, r2 = fit_loglog_slope(run_bias_sweep(config), "nu", "bias_abs")
    assert slope == pytest.approx(1.0, abs=0.2)
    assert r2 > 0.99


# -- accounting ---------------------------------------------------------------------------


class ShadowCounter:
    """Counts gradient and Hessian-vector calls independently of the estimators."""

    def __init__(self, monkeypatch, tasks):
        self.grads = self.hvps = 0
        self.depth = 0
        orig = inner_mod.PerturbedProblem.grad

        def problem_grad(problem, phi):
            self.grads += 1
            self.depth += 1
            try:
                return orig(problem, phi)
            finally:
                self.depth -= 1

        monkeypatch.setattr(inner_mod.PerturbedProblem, "grad", problem_grad)
        cls = type(tasks[0])
        for name in ("train_grad", "test_grad"):
            monkeypatch.setattr(cls, name, self._wrap(getattr(cls, name), "grads"))
        monkeypatch.setattr(cls, "train_hvp", self._wrap(cls.train_hvp, "hvps"))

    def _wrap(self, fn, counter):
        def counted(*a, **k):
            if self.depth == 0:
                setattr(self, counter, getattr(self, counter) + 1)
            return fn(*a, **k)
        return counted


@pytest.mark.parametrize("method", ["fobmaml_forward", "fobmaml_symmetric", "fomaml", "reptile", "imaml", "maml"])
def test_cost_recount(monkeypatch, method):
    tasks = sample_family(SMALL)
    shadow = ShadowCounter(monkeypatch, tasks)
    config = small_config()
    solver = solve_budget(config, method, 20, cg=2)
    est = batch_estimate(tasks, np.ones(6), HyperParams(lam=2.0, inner_steps=20, cg_steps=2), method, solver)
    assert est.grad_evals == shadow.grads
    assert est.hvp_evals == shadow.hvps


@pytest.mark.parametrize("budget", [10, 20, 21, 40])
def test_budget_matching_fairness(budget):
    tasks = sample_family(SMALL)
    config = small_config()
    theta = np.ones(6)
    steps = {}
    for method in ("fobmaml_forward", "fobmaml_symmetric", "fomaml", "reptile", "maml"):
        solver = solve_budget(config, method, budget)
        est = batch_estimate(tasks[:1], theta, HyperParams(lam=2.0, inner_steps=budget), method, solver)
        steps[method] = est.inner_iterations if method.startswith("fo") else budget
    cg = 2
    est = batch_estimate(tasks[:1], theta, HyperParams(lam=2.0, cg_steps=cg), "imaml", solve_budget(config, "imaml", budget, cg))
    steps["imaml"] = est.inner_iterations + (HVP_COST - 1) * cg
    assert max(steps.values()) - min(steps.values()) <= 1, steps


def test_normalized_cost():
    rec = RunRecord(seed=0, method="imaml", grad_evals=10, hvp_evals=3)
    assert normalized_cost(rec) == 10 + 5 * 3


# -- persistence -------------------------------------------------------------------------------


def test_csv_round_trip_and_format(tmp_path):
    records = sort_records(run_bias_sweep(small_config(budgets=(5, 20))))
    path = tmp_path / "out.csv"
    text = write_records(records, str(path))
    raw = path.read_bytes()
    assert b"\r\n" not in raw
    assert raw.decode("utf-8").splitlines()[0] == ",".join(CSV_FIELDS)
    back = read_records(str(path))
    assert [r.row() for r in back] == [r.row() for r in records]
    assert records_to_csv(back) == text
    assert write_records(records, "-") == text


def test_sweep_determinism_and_worker_independence():
    config = small_config(seeds=(0, 1), budgets=(5, 20))
    a = records_to_csv(sort_records(run_bias_sweep(config)))
    b = records_to_csv(sort_records(run_bias_sweep(config)))
    c = records_to_csv(sort_records(run_bias_sweep(config, jobs=2)))
    assert _blank_wall(a) == _blank_wall(b) == _blank_wall(c)


def test_write_to_missing_directory_fails(tmp_path):
    with pytest.raises(OSError, match="cannot write"):
        write_records([], str(tmp_path / "nope" / "x.csv"))


def test_config_rejections():
    with pytest.raises(ConfigError, match="lambda"):
        config_from_dict({"methods": ["fomaml"]})
    with pytest.raises(ConfigError, match="lamda"):
        config_from_dict({"lambda": 1.0, "lamda": 2.0})
    with pytest.raises(ConfigError, match="budgetz"):
        config_from_dict({"lambda": 1.0, "inner": {"budgetz": [1]}})
    with pytest.raises(ConfigError, match="seed"):
        config_from_dict({"lambda": 1.0, "family": {"seed": 3}})
    with pytest.raises(ConfigError):
        config_from_dict({"lambda": 1.0, "methods": []})
    with pytest.raises(ConfigError):
        config_from_dict({"lambda": 1.0, "inner": {"nu_mode": "fixed"}})
    with pytest.raises(FileNotFoundError, match="missing.toml"):
        read_config("missing.toml")


@pytest.mark.parametrize("name", ["base.toml", "soft.toml"])
def test_shipped_configs_round_trip(name, tmp_path):
    config = read_config(os.path.join(CONFIGS, name))
    assert config_from_dict(config_to_dict(config)) == config
    path = tmp_path / "eff.toml"
    write_effective_config(config, str(path), {"note": "x"})
    assert read_config(str(path)) == config


def test_overrides():
    doc = apply_overrides({"lambda": 1.0}, ["family.d=3", "family.linear=true", "inner.budgets=[1, 2]", "lambda=4"])
    config = config_from_dict(doc)
    assert (config.family.d, config.family.linear, config.budgets, config.lam) == (3, True, (1, 2), 4)
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])


# -- slope fitting ---------------------------------------------------------------------------------


def test_fit_exact_power_law():
    rows = [{"x": x, "y": x * x} for x in (1.0, 2.0, 3.0, 4.0)]
    slope, intercept, r2 = fit_loglog_slope(rows)
    assert slope == pytest.approx(2.0, abs=1e-12)
    assert intercept == pytest.approx(0.0, abs=1e-12)
    assert r2 == pytest.approx(1.0)


def test_fit_filters_and_errors():
    rows = [{"x": x, "y": x} for x in (1.0, 2.0, 3.0, 4.0)] + [{"x": 5.0, "y": 0.0}, {"x": None, "y": 1.0}]
    with pytest.warns(UserWarning, match="dropped 2"):
        assert fit_loglog_slope(rows)[0] == pytest.approx(1.0)
    with pytest.raises(FitError):
        with pytest.warns(UserWarning):
            fit_loglog_slope(rows[3:])
    recs = [RunRecord(seed=0, method="m", nu=x, bias_abs=3 * x) for x in (1e-1, 1e-2, 1e-3, 1e-4)]
    assert fit_loglog_slope(recs, "nu", "bias_abs")[0] == pytest.approx(1.0)


# -- smoothness probe ------------------------------------------------------------------------------


def test_probe_quadratic_family():
    rep = smoothness_probe(TaskFamily(d=10, M=4, eig_min=0.01), 2.0, n_pairs=100)
    assert rep.L1 == 0 and rep.passed
    assert rep.max_local <= rep.classical_bound
    assert rep.ratios.shape == (100,)


def test_probe_degenerate_pair():
    tasks = sample_family(SMALL)
    rep = smoothness_probe(tasks, 2.0, n_pairs=5, ball_radius=0.0, n_local=2)
    assert rep.max_ratio == 0.0
    assert np.isnan(rep.local_slope)


@pytest.mark.slow
def test_probe_soft_family_slope():
    rep = smoothness_probe(TaskFamily(d=10, M=4, eig_min=0.1, soft_weight=1.0), 4.0, n_pairs=20, ball_radius=10.0)
    assert rep.L1 > 0 and rep.passed
    assert rep.local_slope > 0


# -- training -------------------------------------------------------------------------------------------


def test_exact_training_with_theory_schedule_is_monotone():
    config = small_config(methods=("exact",), outer_schedule="theory", outer_iters=30)
    records = run_training(config)
    losses = [r.outer_loss for r in records]
    assert all(b <= a + 1e-15 for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


def test_training_picks_best_rate_and_flags_divergence():
    config = small_config(methods=("fomaml",), outer_iters=20, outer_lr_grid=(0.5, 1e4))
    tasks = sample_family(SMALL)
    blown = train_once(config, tasks, "fomaml", 0, lr=1e4)
    assert blown.diverged and blown.records[-1].error == "diverged"
    _, results = run_training(config, return_results=True)
    assert [r.lr for r in results] == [0.5]
    assert not results[0].diverged


def test_training_records_and_minibatches():
    config = small_config(methods=("fobmaml_symmetric",), outer_iters=5, batch_size=2, outer_lr_grid=(1.0,))
    a = run_training(config)
    b = run_training(config)
    assert [r.outer_iter for r in a] == list(range(6))
    assert [r.outer_loss for r in a] == [r.outer_loss for r in b]
    assert all(r.nu is not None for r in a[:-1])


def test_config_validation():
    with pytest.raises(ConfigError):
        small_config(batch_size=10)
    with pytest.raises(ConfigError):
        small_config(budget_kind="delta", budgets=(0.0,))
    with pytest.raises(ConfigError):
        small_config(budgets=(1.5,))
    assert replace(small_config(), methods=("fobmaml-forward",)).methods == ("fobmaml_forward",)
