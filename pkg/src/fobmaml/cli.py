"""Command-line driver: ``fobmaml {bias-sweep,train,check-grad,smoothness,slopes}``.

Human-readable output goes to stderr; CSV goes to ``--output`` (``-`` for
stdout).  Exit codes: 0 success, 1 failed check under ``--strict``, 2 usage
or config error, 3 I/O error.
"""

import argparse
from dataclasses import replace
import sys

import numpy as np

from .errors import ConfigError, FitError
from .experiment import (
    apply_overrides,
    config_from_dict,
    default_jobs,
    fit_loglog_slope,
    read_records,
    run_bias_sweep,
    run_training,
    smoothness_probe,
    sort_records,
    tomllib,
    write_effective_config,
    write_records,
)
from .tasks import (
    closed_form_phi,
    exact_meta_grad,
    meta_grad_implicit,
    meta_loss,
    sample_family,
)

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

DEFAULT_CONFIG = {"lambda": 2.0}


class UsageError(Exception):
    pass


def log(msg=""):
    print(msg, file=sys.stderr)


def load_config(args):
    if args.config is None:
        doc = dict(DEFAULT_CONFIG)
    else:
        try:
            with open(args.config, "rb") as fh:
                doc = tomllib.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {args.config}: {exc}") from None
    doc = apply_overrides(doc, args.set or [])
    config = config_from_dict(doc)
    if args.seed is not None:
        config = replace(config, seeds=(args.seed,))
    return config


def output_path(args, config):
    if args.output is not None:
        return args.output
    return config.output_path or "-"


def emit_csv(records, path):
    text = write_records(sort_records(records), path)
    if path == "-":
        sys.stdout.write(text)
    else:
        log(f"wrote {len(records)} records to {path}")


def emit_config(config, path, metadata):
    if path == "-":
        log("effective config:")
        log(write_effective_config(config, "-", metadata))
        return
    target = path.rsplit(".", 1)[0] + ".config.toml" if path.endswith(".csv") else path + ".config.toml"
    write_effective_config(config, target, metadata)
    log(f"wrote effective config to {target}")


def _baseline_metadata(config):
    return {
        "fobmaml_budget": "inner budget split evenly over the two solves",
        "imaml_budget": config.imaml_budget,
        "baseline_inner_objective": "reptile and maml adapt on the unregularised training loss",
    }


# -- bias-sweep -----------------------------------------------------------------


def cmd_bias_sweep(args):
    config = load_config(args)
    records = run_bias_sweep(config, jobs=args.jobs)
    out = output_path(args, config)
    emit_csv(records, out)
    emit_config(config, out, _baseline_metadata(config))
    log(f"{'method':<20}{'cg':>4}{'min bias':>14}{'median bias':>14}")
    groups = {}
    for r in records:
        groups.setdefault((r.method, r.cg_steps), []).append(r.bias_abs)
    for (method, cg), vals in groups.items():
        v = np.array(vals, dtype=float)
        log(f"{method:<20}{'' if cg is None else cg:>4}{np.nanmin(v):>14.3e}{np.nanmedian(v):>14.3e}")
    flagged = [r for r in records if r.error]
    for r in flagged:
        log(f"flagged: seed={r.seed} method={r.method} budget={r.inner_iters or r.delta}: {r.error}")
    return EXIT_CHECK if (args.strict and flagged) else EXIT_OK


# -- train ------------------------------------------------------------------------


def cmd_train(args):
    config = load_config(args)
    records, results = run_training(config, jobs=args.jobs, return_results=True)
    out = output_path(args, config)
    emit_csv(records, out)
    chosen = {}
    for res in results:
        last = res.records[-1]
        label = last.method + ("" if last.cg_steps is None else f"(cg={last.cg_steps})")
        chosen[f"seed{last.seed}.{label}"] = res.lr
        status = "DIVERGED" if res.diverged else f"final loss {last.outer_loss:.10g}"
        log(f"seed {last.seed} {label:<24} lr={res.lr:<10.4g} {status}")
    emit_config(config, out, {**_baseline_metadata(config), "chosen_outer_lr": chosen})
    bad = any(res.diverged for res in results) or any(r.error for r in records)
    return EXIT_CHECK if (args.strict and bad) else EXIT_OK


# -- check-grad -----------------------------------------------------------------


def _check_tasks(config):
    tasks = []
    for seed in config.seeds:
        tasks.extend(sample_family(config.family_for(seed)))
    return [t for t in tasks if t.is_quadratic]


def run_grad_checks(config, n_probes=100, fault=False):
    """Oracle suite on the configured family.  Returns a list of (name, passed, detail)."""
    lam = config.lam
    tasks = _check_tasks(config)
    if not tasks:
        raise ConfigError("check-grad needs a quadratic family")
    rng = np.random.default_rng([int(config.seeds[0]), 4])
    sign = -1.0 if fault else 1.0

    def grad(task, theta):
        return sign * exact_meta_grad(task, theta, lam)

    h = 1e-5
    worst = 0.0
    for k in range(n_probes):
        task = tasks[k % len(tasks)]
        theta = rng.standard_normal(task.dim)
        g = grad(task, theta)
        fd = np.empty(task.dim)
        for j in range(task.dim):
            e = np.zeros(task.dim)
            e[j] = h
            fd[j] = (meta_loss(task, theta + e, lam) - meta_loss(task, theta - e, lam)) / (2 * h)
        worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12))
    checks = [("finite-difference meta-gradient", worst <= 1e-5, f"max rel err {worst:.2e}")]

    worst = 0.0
    for k in range(n_probes):
        task = tasks[k % len(tasks)]
        theta = rng.standard_normal(task.dim)
        a = grad(task, theta)
        b = meta_grad_implicit(task, theta, lam)
        worst = max(worst, np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))
    checks.append(("two-form meta-gradient agreement", worst <= 1e-10, f"max rel err {worst:.2e}"))

    nus = np.logspace(-1, -4, 7)
    task = tasks[0]
    theta = rng.standard_normal(task.dim)
    g = grad(task, theta)
    if np.linalg.norm(task.A) == 0:
        checks.append(("finite-difference orders", True, "linear task: differences are exact"))
    else:
        p0 = closed_form_phi(task, theta, lam, 0.0)
        fwd, sym = [], []
        for nu in nus:
            pp = closed_form_phi(task, theta, lam, nu)
            pm = closed_form_phi(task, theta, lam, -nu)
            fwd.append({"x": nu, "y": np.linalg.norm(-lam * (pp - p0) / nu - g)})
            sym.append({"x": nu, "y": np.linalg.norm(-lam * (pp - pm) / (2 * nu) - g)})
        for name, rows, target in (("forward", fwd, 1.0), ("symmetric", sym, 2.0)):
            try:
                slope, _, _ = fit_loglog_slope(rows)
                ok = abs(slope - target) <= 0.2
                detail = f"slope {slope:.3f} (expected {target} +/- 0.2)"
            except FitError as exc:
                ok, detail = False, str(exc)
            checks.append((f"{name} difference order", ok, detail))
    return checks


def cmd_check_grad(args):
    config = load_config(args)
    tasks = _check_tasks(config)
    checks = run_grad_checks(config, n_probes=args.probes, fault=args.inject_fault)
    if tasks and tasks[0].dim <= 3 and len(tasks) <= 2:
        theta = np.ones(tasks[0].dim)
        for i, task in enumerate(tasks):
            exact = exact_meta_grad(task, theta, config.lam)
            nu = 1e-4
            pp = closed_form_phi(task, theta, config.lam, nu)
            pm = closed_form_phi(task, theta, config.lam, -nu)
            est = -config.lam * (pp - pm) / (2 * nu)
            log(f"task {i} at theta=1: exact {np.array2string(exact, precision=10)}"
                f"  symmetric(nu=1e-4) {np.array2string(est, precision=10)}")
    failed = False
    for name, ok, detail in checks:
        log(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        failed |= not ok
    return EXIT_CHECK if (failed and args.strict) else EXIT_OK


# -- smoothness -----------------------------------------------------------------


def cmd_smoothness(args):
    config = load_config(args)
    failed = False
    for seed in config.seeds:
        rep = smoothness_probe(config.family_for(seed), config.lam, config.probe_pairs, config.probe_radius, seed=seed)
        ok = rep.passed
        line = (f"seed {seed}: max violation ratio {rep.max_ratio:.4f} over {rep.n_pairs} pairs; "
                f"L0={rep.L0:.4g} L1={rep.L1:.4g} zeta={rep.zeta:.4g}; "
                f"max local smoothness {rep.max_local:.4g}; slope vs |grad F| {rep.local_slope:.3g}")
        if rep.L1 == 0:
            ok = ok and rep.max_local <= rep.classical_bound * (1 + 1e-6)
            line += f" (classical bound {rep.classical_bound:.4g})"
        log(f"{'PASS' if ok else 'FAIL'}  {line}")
        failed |= not ok
    return EXIT_CHECK if (failed and args.strict) else EXIT_OK


# -- slopes ---------------------------------------------------------------------------


def _filters(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"filter {item!r} is not of the form column=value")
        k, v = item.split("=", 1)
        out[k] = v
    return out


def cmd_slopes(args):
    if not args.input:
        raise UsageError("slopes needs --input CSV")
    records = read_records(args.input)
    filt = _filters(args.where)
    rows = []
    for r in records:
        if all(str(getattr(r, k)) == v for k, v in filt.items()):
            rows.append(r)
    groups = {}
    for r in rows:
        key = (r.seed, r.method, r.cg_steps) if args.by_group else ()
        groups.setdefault(key, []).append(r)
    failed = False
    for key, grp in groups.items():
        label = " ".join(str(k) for k in key if k is not None) or "all rows"
        try:
            slope, intercept, r2 = fit_loglog_slope(grp, args.x, args.y)
        except FitError as exc:
            log(f"FAIL  {label}: {exc}")
            failed = True
            continue
        msg = f"{label}: slope {slope:.4f} intercept {intercept:.4f} r2 {r2:.4f}"
        if args.expect is not None:
            ok = abs(slope - args.expect) <= args.tol
            failed |= not ok
            msg = f"{'PASS' if ok else 'FAIL'}  {msg} (expected {args.expect} +/- {args.tol})"
        log(msg)
    return EXIT_CHECK if (failed and args.strict) else EXIT_OK


# -- parser -------------------------------------------------------------------------------


def _common(p, config=True):
    if config:
        p.add_argument("--config", help="TOML config file (defaults built in when omitted)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted override applied after parsing, e.g. family.d=10 (repeatable)")
        p.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
        p.add_argument("--jobs", type=int, default=default_jobs(), help="worker processes (default: all processors)")
        p.add_argument("--output", help="CSV destination, '-' for stdout (default: config 'output' or stdout)")
    p.add_argument("--strict", action="store_true", help="exit 1 when any check fails or a record is flagged")


def build_parser():
    parser = argparse.ArgumentParser(prog="fobmaml", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bias-sweep", help="meta-gradient bias against inner budget")
    _common(p)
    p.set_defaults(func=cmd_bias_sweep)

    p = sub.add_parser("train", help="outer training with per-method tuned rates")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("check-grad", help="oracle checks of the exact meta-gradient and difference orders")
    _common(p)
    p.add_argument("--probes", type=int, default=100, help="random instances per check (default 100)")
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_check_grad)

    p = sub.add_parser("smoothness", help="pairwise generalised-smoothness probe")
    _common(p)
    p.set_defaults(func=cmd_smoothness)

    p = sub.add_parser("slopes", help="log-log slope fit over a results CSV")
    _common(p, config=False)
    p.add_argument("--input", help="results CSV")
    p.add_argument("--x", default="nu", help="column for the abscissa (default nu)")
    p.add_argument("--y", default="bias_abs", help="column for the ordinate (default bias_abs)")
    p.add_argument("--where", action="append", metavar="COL=VALUE", help="row filter (repeatable)")
    p.add_argument("--by-group", action="store_true", help="fit each (seed, method, cg) separately")
    p.add_argument("--expect", type=float, help="expected slope for a pass/fail verdict")
    p.add_argument("--tol", type=float, default=0.2, help="tolerance on the expected slope (default 0.2)")
    p.set_defaults(func=cmd_slopes)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        log(f"error: {exc}")
        return EXIT_USAGE
    except OSError as exc:
        log(f"I/O error: {exc}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
