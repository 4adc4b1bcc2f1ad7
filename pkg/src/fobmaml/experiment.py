"""Bias sweeps, training runs, smoothness probes and their CSV/TOML plumbing.

Every run is a pure function of its config and seed; results are sorted
before writing so the scientific columns do not depend on worker scheduling.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
import csv
import io
import math
import os
import time
import warnings

import numpy as np
from scipy.optimize import minimize

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib
import tomli_w

from .errors import ConfigError, FitError
from .estimators import (
    FOBMAML,
    HyperParams,
    Method,
    batch_estimate,
    true_meta_grad,
    true_meta_loss,
)
from .inner import SOLVERS, InnerSolver
from .outer import VARIANTS, ConvergenceBudget, OuterOptimizer, budget_bound, schedule_from_constants, step
from .tasks import TaskFamily, family_constants, sample_family, task_variance

CSV_FIELDS = (
    "seed", "method", "inner_iters", "delta", "nu", "cg_steps", "outer_iter",
    "bias_abs", "bias_rel", "outer_loss", "grad_norm", "grad_evals", "hvp_evals", "wall_ms",
)
_INT_FIELDS = {"seed", "inner_iters", "cg_steps", "outer_iter", "grad_evals", "hvp_evals"}
_STR_FIELDS = {"method"}

# cost of one Hessian-vector product in gradient evaluations
HVP_COST = 5
# relative growth of the loss that counts as divergence in training
DIVERGENCE_FACTOR = 1e6


def _half_octaves(n):
    return tuple(float(round(2.0 ** (k / 2.0), 4)) for k in range(n))


@dataclass(frozen=True)
class SweepConfig:
    """Everything a sweep, training run or probe needs.

    ``budget_kind="iters"`` reads ``budgets`` as inner-iteration counts,
    ``"delta"`` as target certificates.  ``imaml_budget="normalized"`` charges
    iMAML ``(HVP_COST - 1) * cg`` inner steps for its Hessian-vector products.
    """

    lam: float
    family: TaskFamily = field(default_factory=TaskFamily)
    methods: tuple = ("fobmaml_forward", "fobmaml_symmetric", "fomaml", "reptile", "imaml")
    seeds: tuple = (0,)
    # inner problem
    solver: str = "gd"
    budget_kind: str = "iters"
    budgets: tuple = (5, 10, 20, 40, 80)
    nu_mode: str = "auto"
    nu_values: tuple = ()
    cg_steps: tuple = (2, 5)
    imaml_budget: str = "normalized"
    inner_lr: float = None
    warm_start: bool = True
    # outer loop
    outer_variant: str = "gd"
    outer_schedule: str = "grid"
    outer_lr_grid: tuple = _half_octaves(8)
    outer_clip: float = 1.0
    outer_beta: float = 0.0
    outer_iters: int = 100
    inner_steps: int = 20
    batch_size: int = None
    eps: float = 1e-2
    # smoothness probe
    probe_pairs: int = 200
    probe_radius: float = 1.0
    output_path: str = None

    def __post_init__(self):
        if not self.lam > 0:
            raise ConfigError(f"lambda must be positive, got {self.lam}")
        if not self.methods:
            raise ConfigError("methods must be non-empty")
        object.__setattr__(self, "methods", tuple(Method.parse(m).value for m in self.methods))
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if not self.budgets:
            raise ConfigError("budgets must be non-empty")
        if self.solver not in SOLVERS:
            raise ConfigError(f"unknown solver {self.solver!r}; expected one of {SOLVERS}")
        if self.budget_kind not in ("iters", "delta"):
            raise ConfigError(f"budget_kind must be 'iters' or 'delta', got {self.budget_kind!r}")
        if self.budget_kind == "iters" and any(int(b) != b or b < 0 for b in self.budgets):
            raise ConfigError("iteration budgets must be non-negative integers")
        if self.budget_kind == "delta" and any(not b > 0 for b in self.budgets):
            raise ConfigError("precision budgets must be positive")
        if self.nu_mode not in ("auto", "fixed", "grid"):
            raise ConfigError(f"nu_mode must be auto, fixed or grid, got {self.nu_mode!r}")
        if self.nu_mode == "fixed" and len(self.nu_values) != 1:
            raise ConfigError("nu_mode='fixed' needs exactly one entry in nu_values")
        if self.nu_mode == "grid" and not self.nu_values:
            raise ConfigError("nu_mode='grid' needs a non-empty nu_values")
        if any(v == 0 for v in self.nu_values):
            raise ConfigError("nu values must be non-zero")
        if Method.IMAML_CG.value in self.methods and not self.cg_steps:
            raise ConfigError("cg_steps must be non-empty when imaml is requested")
        if self.imaml_budget not in ("normalized", "raw"):
            raise ConfigError(f"imaml_budget must be 'normalized' or 'raw', got {self.imaml_budget!r}")
        if self.outer_variant not in VARIANTS:
            raise ConfigError(f"outer variant must be one of {VARIANTS}, got {self.outer_variant!r}")
        if self.outer_schedule not in ("grid", "theory"):
            raise ConfigError(f"outer schedule must be 'grid' or 'theory', got {self.outer_schedule!r}")
        if self.outer_schedule == "grid" and (not self.outer_lr_grid or min(self.outer_lr_grid) <= 0):
            raise ConfigError("outer lr grid must be non-empty and positive")
        if self.outer_iters < 0 or self.inner_steps < 0:
            raise ConfigError("outer iters and inner steps must be non-negative")
        if self.batch_size is not None and not 1 <= self.batch_size <= self.family.M:
            raise ConfigError(f"batch_size must lie in [1, M={self.family.M}]")
        if not self.eps > 0:
            raise ConfigError("eps must be positive")

    def family_for(self, seed):
        return replace(self.family, seed=int(seed))

    def nu_list(self):
        return (None,) if self.nu_mode == "auto" else tuple(self.nu_values)


@dataclass
class RunRecord:
    seed: int
    method: str
    inner_iters: int = None
    delta: float = None
    nu: float = None
    cg_steps: int = None
    outer_iter: int = None
    bias_abs: float = math.nan
    bias_rel: float = math.nan
    outer_loss: float = math.nan
    grad_norm: float = math.nan
    grad_evals: int = 0
    hvp_evals: int = 0
    wall_ms: float = 0.0
    error: str = None

    def row(self):
        return {k: getattr(self, k) for k in CSV_FIELDS}


def normalized_cost(record, hvp_cost=HVP_COST):
    """Gradient evaluations with each Hessian-vector product charged ``hvp_cost``."""
    return record.grad_evals + hvp_cost * record.hvp_evals


def bias_fields(g, g_true):
    err = float(np.linalg.norm(np.asarray(g) - g_true))
    return err, err / max(float(np.linalg.norm(g_true)), 1e-30)


def _mean_grad(tasks, theta, lam):
    return np.mean([true_meta_grad(t, theta, lam) for t in tasks], axis=0)


def _mean_loss(tasks, theta, lam):
    return float(np.mean([true_meta_loss(t, theta, lam) for t in tasks]))


def probe_point(seed, dim):
    """Seeded meta-parameter at which bias sweeps are evaluated."""
    return np.random.default_rng([int(seed), 1]).standard_normal(dim)


# -- budget matching ------------------------------------------------------------


def solve_budget(config, method, budget, cg=0):
    """Inner solver for ``method`` at one grid point.

    FO-B-MAML splits an iteration budget evenly over its two solves; iMAML in
    normalized mode gives up ``(HVP_COST - 1) * cg`` inner steps.  Returns None
    when the point is infeasible.
    """
    base = InnerSolver(config.solver)
    if config.budget_kind == "delta":
        return base.with_precision(budget, max_iters=1_000_000)
    budget = int(budget)
    if method in FOBMAML:
        return base.with_budget(math.ceil(budget / 2))
    if method == Method.IMAML_CG and config.imaml_budget == "normalized":
        steps = budget - (HVP_COST - 1) * cg
        return base.with_budget(steps) if steps >= 0 else None
    return base.with_budget(budget)


def _hyper(config, inner_steps, nu=None, cg=None):
    return HyperParams(
        lam=config.lam,
        nu=nu,
        inner_lr=config.inner_lr,
        inner_steps=int(inner_steps),
        cg_steps=config.cg_steps[0] if cg is None else cg,
        outer_lr=config.outer_lr_grid[0] if config.outer_lr_grid else 0.1,
        clip=config.outer_clip,
        beta=config.outer_beta,
    )


def _variants(config, method):
    """(cg, nu) combinations to run for one method."""
    cgs = config.cg_steps if method == Method.IMAML_CG else (None,)
    nus = config.nu_list() if method in FOBMAML else (None,)
    return [(cg, nu) for cg in cgs for nu in nus]


# -- bias sweep ---------------------------------------------------------------------


def _sweep_unit(config, seed, method):
    method = Method.parse(method)
    tasks = sample_family(config.family_for(seed))
    theta = probe_point(seed, config.family.d)
    g_true = _mean_grad(tasks, theta, config.lam)
    loss = _mean_loss(tasks, theta, config.lam)
    gnorm = float(np.linalg.norm(g_true))
    out = []
    for cg, nu in _variants(config, method):
        for budget in config.budgets:
            rec = RunRecord(seed=int(seed), method=method.value, cg_steps=cg, outer_loss=loss, grad_norm=gnorm)
            if config.budget_kind == "iters":
                rec.inner_iters = int(budget)
            else:
                rec.delta = float(budget)
            if method in (Method.REPTILE, Method.MAML_UNROLLED) and config.budget_kind == "delta":
                continue  # these adapt for a fixed number of steps only
            solver = solve_budget(config, method, budget, cg or 0)
            if solver is None:
                continue
            steps = int(budget) if config.budget_kind == "iters" else config.inner_steps
            h = _hyper(config, steps, nu, cg)
            t0 = time.perf_counter()
            try:
                est = batch_estimate(tasks, theta, h, method, solver)
            except Exception as exc:  # recorded, sweep continues
                rec.error = str(exc)
                rec.wall_ms = 1e3 * (time.perf_counter() - t0)
                out.append(rec)
                continue
            rec.wall_ms = 1e3 * (time.perf_counter() - t0)
            rec.bias_abs, rec.bias_rel = bias_fields(est.g, g_true)
            rec.nu = est.nu_used
            if config.budget_kind == "iters" and est.delta_certified is not None:
                rec.delta = est.delta_certified
            if config.budget_kind == "delta":
                rec.inner_iters = est.inner_iterations
            rec.grad_evals = est.grad_evals
            rec.hvp_evals = est.hvp_evals
            if est.warning:
                rec.error = est.warning
            out.append(rec)
    return out


def _run_units(fn, config, units, jobs):
    if jobs is None or jobs <= 1 or len(units) <= 1:
        return [fn(config, *u) for u in units]
    with ProcessPoolExecutor(max_workers=min(jobs, len(units))) as pool:
        futures = [pool.submit(fn, config, *u) for u in units]
        return [f.result() for f in futures]


def run_bias_sweep(config, jobs=1):
    """Meta-gradient bias of every method at every budget point, at a seeded probe point."""
    units = [(s, m) for s in config.seeds for m in config.methods]
    results = _run_units(_sweep_unit, config, units, jobs)
    return [r for chunk in results for r in chunk]


# -- training --------------------------------------------------------------------------


@dataclass
class TrainResult:
    records: list
    lr: float
    diverged: bool
    final_loss: float


def theory_optimizer(config, tasks, theta0):
    """Outer optimizer built from family constants around ``theta0``."""
    grads = np.array([true_meta_grad(t, theta0, config.lam) for t in tasks])
    mu = config.lam + min(t.curvature_range(0.0)[0] for t in tasks)
    radius = float(np.linalg.norm(grads.mean(axis=0))) / mu + config.probe_radius
    c = family_constants(tasks, config.lam, theta0, radius, zeta=task_variance(grads))
    return schedule_from_constants(c, config.outer_variant), c


def train_once(config, tasks, method, seed, lr=None, cg=None, nu=None, opt=None, theta0=None):
    """One outer loop of Algorithm 1 with a fixed optimizer; records every iteration."""
    method = Method.parse(method)
    lam = config.lam
    theta = np.zeros(config.family.d) if theta0 is None else np.array(theta0, dtype=float)
    if opt is None:
        opt = OuterOptimizer(config.outer_variant, lr=lr, clip=config.outer_clip, beta=config.outer_beta)
    solver = solve_budget(replace(config, budget_kind="iters"), method, config.inner_steps, cg or 0)
    if solver is None:
        raise ConfigError(f"inner budget {config.inner_steps} too small for {method.value} with cg={cg}")
    h = _hyper(config, config.inner_steps, nu, cg)
    batch = config.batch_size or len(tasks)
    rng = np.random.default_rng([int(seed), 2])
    warm = [None] * len(tasks)
    records = []
    loss0 = _mean_loss(tasks, theta, lam)
    limit = loss0 + DIVERGENCE_FACTOR * max(abs(loss0), 1.0)
    diverged = False
    for t in range(config.outer_iters + 1):
        g_true = _mean_grad(tasks, theta, lam)
        loss = _mean_loss(tasks, theta, lam)
        rec = RunRecord(seed=int(seed), method=method.value, inner_iters=config.inner_steps, cg_steps=cg,
                        outer_iter=t, outer_loss=loss, grad_norm=float(np.linalg.norm(g_true)))
        records.append(rec)
        if not math.isfinite(loss) or loss > limit:
            rec.error = "diverged"
            diverged = True
            break
        if t == config.outer_iters:
            break
        idx = np.arange(len(tasks)) if batch == len(tasks) else np.sort(rng.choice(len(tasks), batch, replace=False))
        sub = [tasks[i] for i in idx]
        sub_warm = [warm[i] for i in idx] if config.warm_start and all(warm[i] is not None for i in idx) else None
        t0 = time.perf_counter()
        try:
            est = batch_estimate(sub, theta, h, method, solver, warm=sub_warm)
            g_ref = g_true if batch == len(tasks) else _mean_grad(sub, theta, lam)
            rec.bias_abs, rec.bias_rel = bias_fields(est.g, g_ref)
            theta = step(opt, theta, est.g)
        except Exception as exc:
            rec.error = str(exc)
            rec.wall_ms = 1e3 * (time.perf_counter() - t0)
            diverged = True
            break
        rec.wall_ms = 1e3 * (time.perf_counter() - t0)
        rec.nu = est.nu_used
        rec.delta = est.delta_certified
        rec.grad_evals = est.grad_evals
        rec.hvp_evals = est.hvp_evals
        for i, sol in zip(idx, est.solutions):
            warm[i] = sol or None
    final = records[-1].outer_loss if not diverged else math.inf
    return TrainResult(records, opt.lr, diverged, final)


def _train_unit(config, seed, method):
    method = Method.parse(method)
    tasks = sample_family(config.family_for(seed))
    out = []
    for cg, nu in _variants(config, method):
        if solve_budget(replace(config, budget_kind="iters"), method, config.inner_steps, cg or 0) is None:
            continue
        if config.outer_schedule == "theory":
            opt, _ = theory_optimizer(config, tasks, np.zeros(config.family.d))
            best = train_once(config, tasks, method, seed, cg=cg, nu=nu, opt=opt)
        else:
            best = None
            for lr in config.outer_lr_grid:
                res = train_once(config, tasks, method, seed, lr=lr, cg=cg, nu=nu)
                if best is None or res.final_loss < best.final_loss:
                    best = res
        out.append(best)
    return out


def run_training(config, jobs=1, return_results=False):
    """Outer training per method; with a grid schedule the best final loss picks the rate.

    With ``return_results`` the per-run ``TrainResult`` objects (chosen rate,
    divergence flag) are returned alongside the flattened records.
    """
    units = [(s, m) for s in config.seeds for m in config.methods]
    results = [r for chunk in _run_units(_train_unit, config, units, jobs) for r in chunk]
    records = [rec for r in results for rec in r.records]
    return (records, results) if return_results else records


@dataclass
class BudgetRun:
    seed: int
    gap: float
    zeta: float
    L0: float
    L1: float
    budget: int
    steps: int
    bias_floor: float
    final_grad_norm: float
    reached: bool


def minimize_meta_objective(tasks, lam, theta0):
    """Reference minimiser of the mean meta-objective (L-BFGS on exact values and gradients)."""
    res = minimize(lambda th: _mean_loss(tasks, th, lam), theta0, jac=lambda th: _mean_grad(tasks, th, lam),
                   method="L-BFGS-B", options={"gtol": 1e-10, "ftol": 1e-15, "maxiter": 10_000})
    return res.x, float(res.fun)


def budget_run(config, seed, method="fobmaml_symmetric", delta=1e-8, max_steps=None):
    """Outer loop with the theory schedule until ``|grad F| <= eps + bias floor``.

    The schedule and step budget use the certified moduli with the task
    variance measured along the segment from the start to 1.5x past the
    reference minimiser.  The bias floor is the largest estimator error seen
    on the trajectory.
    """
    tasks = sample_family(config.family_for(seed))
    lam = config.lam
    theta0 = np.zeros(config.family.d)
    theta_star, f_star = minimize_meta_objective(tasks, lam, theta0)
    gap = max(_mean_loss(tasks, theta0, lam) - f_star, 0.0)
    zeta = 0.0
    for s in np.linspace(0.0, 1.5, 7):
        per = np.array([true_meta_grad(t, theta0 + s * (theta_star - theta0), lam) for t in tasks])
        zeta = max(zeta, task_variance(per))
    c = family_constants(tasks, lam, theta0, config.probe_radius, zeta=zeta)
    opt = schedule_from_constants(c, config.outer_variant)
    budget = budget_bound(ConvergenceBudget(gap, config.eps), c, opt.variant)
    limit = budget if max_steps is None else min(budget, max_steps)
    h = HyperParams(lam=lam)
    solver = InnerSolver(config.solver).with_precision(delta, max_iters=1_000_000)
    theta, warm, floor = theta0.copy(), None, 0.0
    k = 0
    while True:
        est = batch_estimate(tasks, theta, h, method, solver, warm=warm)
        warm = est.solutions if est.solutions and est.solutions[0] else None
        g_true = _mean_grad(tasks, theta, lam)
        floor = max(floor, float(np.linalg.norm(est.g - g_true)))
        gn = float(np.linalg.norm(g_true))
        if gn <= config.eps + floor or k >= limit:
            break
        theta = step(opt, theta, est.g)
        k += 1
    return BudgetRun(int(seed), gap, zeta, c.gen_L0, c.gen_L1, budget, k, floor, gn,
                     gn <= config.eps + floor)


# -- slope fitting ------------------------------------------------------------------------


def _column(records, name):
    out = []
    for r in records:
        v = r.get(name) if isinstance(r, dict) else getattr(r, name)
        out.append(math.nan if v is None or v == "" else float(v))
    return np.array(out)


def fit_loglog_slope(records, x_field="x", y_field="y"):
    """Least-squares line through ``(log10 x, log10 y)``; returns (slope, intercept, r2)."""
    x = _column(records, x_field)
    y = _column(records, y_field)
    keep = np.isfinite(x) & np.isfinite(y) & (x > 0) & (y > 0)
    if not keep.all():
        warnings.warn(f"dropped {int((~keep).sum())} non-positive or missing points from the log-log fit")
    if keep.sum() < 4:
        raise FitError(f"need at least 4 positive points for a log-log fit, got {int(keep.sum())}")
    lx, ly = np.log10(x[keep]), np.log10(y[keep])
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


# -- smoothness probe -----------------------------------------------------------------------


@dataclass
class ProbeReport:
    max_ratio: float
    n_pairs: int
    L0: float
    L1: float
    zeta: float
    max_local: float
    classical_bound: float
    local_slope: float
    ratios: np.ndarray = field(repr=False, default=None)

    @property
    def passed(self):
        return self.max_ratio <= 1.0


def _uniform_ball(rng, center, radius):
    u = rng.standard_normal(center.shape)
    u /= np.linalg.norm(u)
    return center + radius * rng.uniform() ** (1.0 / center.size) * u


def local_smoothness(tasks, lam, theta, step=1e-4):
    """Spectral norm of the meta-Hessian at ``theta`` by central differences of the meta-gradient."""
    d = len(theta)
    cols = []
    for j in range(d):
        e = np.zeros(d)
        e[j] = step
        cols.append((_mean_grad(tasks, theta + e, lam) - _mean_grad(tasks, theta - e, lam)) / (2 * step))
    H = np.array(cols)
    return float(np.max(np.abs(np.linalg.eigvalsh(0.5 * (H + H.T)))))


def smoothness_probe(family, lam, n_pairs=200, ball_radius=1.0, center=None, seed=0, n_local=20):
    """Check ``|grad F(a) - grad F(b)| <= min(L(a), L(b)) |a - b|`` on random pairs in a ball.

    ``L(theta) = L0 + L1 |grad F(theta)|`` uses the certified moduli with the
    task variance measured over the probed points.  The report also regresses
    the local smoothness (meta-Hessian norm) at ``n_local`` points on the
    gradient norm there (``local_slope``).
    """
    tasks = sample_family(family) if isinstance(family, TaskFamily) else list(family)
    d = tasks[0].dim
    center = np.zeros(d) if center is None else np.asarray(center, dtype=float)
    rng = np.random.default_rng([int(seed), 3])

    def grads(theta):
        per = np.array([true_meta_grad(t, theta, lam) for t in tasks])
        return per.mean(axis=0), task_variance(per)

    pts = [(_uniform_ball(rng, center, ball_radius), _uniform_ball(rng, center, ball_radius))
           for _ in range(n_pairs)]
    evals = [(grads(a), grads(b)) for a, b in pts]
    zeta = max((max(ea[1], eb[1]) for ea, eb in evals), default=0.0)
    c = family_constants(tasks, lam, center, ball_radius, zeta=zeta)
    ratios = []
    for (a, b), ((ga, _), (gb, _)) in zip(pts, evals):
        dist = np.linalg.norm(a - b)
        if dist == 0:
            ratios.append(0.0)
            continue
        bound = min(c.envelope(np.linalg.norm(ga)), c.envelope(np.linalg.norm(gb)))
        ratios.append(float(np.linalg.norm(ga - gb) / (bound * dist)))
    # local moduli along a ray, so the sample spans small and large gradients
    u = rng.standard_normal(d)
    u /= np.linalg.norm(u)
    local, gnorms = [], []
    for r in np.linspace(0.0, ball_radius, n_local):
        theta = center + r * u
        local.append(local_smoothness(tasks, lam, theta))
        gnorms.append(float(np.linalg.norm(grads(theta)[0])))
    spread = n_local >= 2 and np.ptp(gnorms) > 0
    slope = float(np.polyfit(gnorms, local, 1)[0]) if spread else math.nan
    ratios = np.array(ratios)
    return ProbeReport(
        max_ratio=float(ratios.max()) if ratios.size else 0.0,
        n_pairs=n_pairs,
        L0=c.gen_L0,
        L1=c.gen_L1,
        zeta=zeta,
        max_local=max(local, default=0.0),
        classical_bound=c.L1,
        local_slope=slope,
        ratios=ratios,
    )


# -- persistence ------------------------------------------------------------------------------


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def sort_records(records):
    order = {m.value: i for i, m in enumerate(Method)}

    def key(r):
        return (r.seed, order.get(r.method, len(order)), r.cg_steps if r.cg_steps is not None else -1,
                r.nu if r.nu is not None else 0.0, r.outer_iter if r.outer_iter is not None else -1,
                r.inner_iters if r.inner_iters is not None else -1, r.delta if r.delta is not None else 0.0)

    return sorted(records, key=key)


def records_to_csv(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in records:
        w.writerow([_fmt(getattr(r, k)) for k in CSV_FIELDS])
    return buf.getvalue()


def write_records(records, path):
    """Write records as CSV; ``path='-'`` returns the text instead of writing a file."""
    text = records_to_csv(records)
    if path == "-":
        return text
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write results to {path}: {exc.strerror}") from exc
    return text


def _parse(name, text):
    if text == "":
        return None
    if name in _STR_FIELDS:
        return text
    if name in _INT_FIELDS:
        return int(text)
    return float(text)


def read_records(path):
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise OSError(f"cannot read results from {path}: {exc.strerror}") from exc
    return [RunRecord(**{k: _parse(k, row[k]) for k in CSV_FIELDS}) for row in rows]


# config file layout: section -> {toml key: SweepConfig field}
_TOP_KEYS = {"lambda": "lam", "methods": "methods", "seeds": "seeds", "output": "output_path"}
_SECTIONS = {
    "inner": {
        "solver": "solver", "budget_kind": "budget_kind", "budgets": "budgets", "nu_mode": "nu_mode",
        "nu_values": "nu_values", "cg_steps": "cg_steps", "imaml_budget": "imaml_budget",
        "inner_lr": "inner_lr", "warm_start": "warm_start",
    },
    "outer": {
        "variant": "outer_variant", "schedule": "outer_schedule", "lr_grid": "outer_lr_grid",
        "clip": "outer_clip", "beta": "outer_beta", "iters": "outer_iters", "inner_steps": "inner_steps",
        "batch_size": "batch_size", "eps": "eps",
    },
    "probe": {"n_pairs": "probe_pairs", "radius": "probe_radius"},
}
_FAMILY_KEYS = {f.name for f in fields(TaskFamily)} - {"seed"}
_TUPLE_FIELDS = {"methods", "seeds", "budgets", "nu_values", "cg_steps", "outer_lr_grid"}


def config_from_dict(doc):
    """Build a SweepConfig from a parsed document, rejecting unknown keys."""
    doc = dict(doc)
    doc.pop("metadata", None)
    if "lambda" not in doc:
        raise ConfigError("config is missing required field 'lambda'")
    kwargs = {}
    for key, value in doc.items():
        if key == "family":
            if not isinstance(value, dict):
                raise ConfigError("'family' must be a table")
            unknown = sorted(set(value) - _FAMILY_KEYS)
            if unknown:
                raise ConfigError(f"unknown key(s) in [family]: {', '.join(unknown)}")
            try:
                kwargs["family"] = TaskFamily(**value)
            except TypeError as exc:
                raise ConfigError(f"bad [family] table: {exc}") from None
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"'{key}' must be a table")
            table = _SECTIONS[key]
            unknown = sorted(set(value) - set(table))
            if unknown:
                raise ConfigError(f"unknown key(s) in [{key}]: {', '.join(unknown)}")
            for k, v in value.items():
                kwargs[table[k]] = v
        elif key in _TOP_KEYS:
            kwargs[_TOP_KEYS[key]] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    for k in _TUPLE_FIELDS & set(kwargs):
        v = kwargs[k]
        kwargs[k] = tuple(v) if isinstance(v, (list, tuple)) else (v,)
    try:
        return SweepConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def config_to_dict(config):
    """Inverse of ``config_from_dict`` (``None`` fields are omitted)."""
    doc = {}
    for key, name in _TOP_KEYS.items():
        doc[key] = getattr(config, name)
    fam = asdict(config.family)
    fam.pop("seed")
    doc["family"] = fam
    for section, table in _SECTIONS.items():
        doc[section] = {k: getattr(config, name) for k, name in table.items()}

    def clean(x):
        if isinstance(x, dict):
            return {k: clean(v) for k, v in x.items() if v is not None}
        if isinstance(x, tuple):
            return [clean(v) for v in x]
        if isinstance(x, np.integer):
            return int(x)
        if isinstance(x, np.floating):
            return float(x)
        return x

    return clean({k: v for k, v in doc.items() if v is not None})


def read_config(path):
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise FileNotFoundError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return config_from_dict(doc)


def apply_overrides(doc, overrides):
    """Apply ``dotted.key=value`` overrides to a config document (values parsed as TOML)."""
    doc = {k: (dict(v) if isinstance(v, dict) else v) for k, v in doc.items()}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        try:
            value = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw
        parts = key.split(".")
        node = doc
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-table value")
        node[parts[-1]] = value
    return doc


def write_effective_config(config, path, metadata=None):
    doc = config_to_dict(config)
    if metadata:
        doc["metadata"] = metadata
    text = tomli_w.dumps(doc)
    if path == "-":
        return text
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return text


def default_jobs():
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1
