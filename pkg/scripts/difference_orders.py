"""Slopes of the finite-difference bias in nu (exact solves) and in delta (tuned nu)."""

import argparse
import os
from dataclasses import replace

import numpy as np

from fobmaml.experiment import fit_loglog_slope, read_config, run_bias_sweep

EXPECTED = {
    ("nu", "fobmaml_forward"): 1.0,
    ("nu", "fobmaml_symmetric"): 2.0,
    ("delta", "fobmaml_forward"): 0.5,
    ("delta", "fobmaml_symmetric"): 2.0 / 3.0,
}


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", default=os.path.join(os.path.dirname(__file__), "..", "configs", "base.toml"))
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = p.parse_args()

    base = replace(read_config(args.config), seeds=tuple(args.seeds),
                   methods=("fobmaml_forward", "fobmaml_symmetric"))
    sweeps = {
        "nu": replace(base, solver="exact", nu_mode="grid", nu_values=tuple(np.logspace(-1, -4, 7)), budgets=(0,)),
        "delta": replace(base, budget_kind="delta", budgets=tuple(10.0 ** -k for k in range(3, 10))),
    }
    for axis, config in sweeps.items():
        records = run_bias_sweep(config)
        for seed in config.seeds:
            for method in config.methods:
                rows = [r for r in records if r.seed == seed and r.method == method]
                slope, _, r2 = fit_loglog_slope(rows, axis, "bias_abs")
                want = EXPECTED[(axis, method)]
                print(f"bias vs {axis:<5} seed {seed} {method:<18} slope {slope:6.3f} "
                      f"(expected {want:.2f}) r2 {r2:.4f}")


if __name__ == "__main__":
    main()
