"""Steps taken by normalized GD with the theory schedule against the step budget."""

import argparse
import os
from dataclasses import replace

from fobmaml.experiment import budget_run, read_config


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", default=os.path.join(os.path.dirname(__file__), "..", "configs", "soft.toml"))
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--eps", type=float)
    p.add_argument("--delta", type=float, default=1e-8)
    args = p.parse_args()

    config = read_config(args.config)
    if args.seeds:
        config = replace(config, seeds=tuple(args.seeds))
    if args.eps:
        config = replace(config, eps=args.eps)
    print(f"{'seed':>4}{'gap':>10}{'zeta':>9}{'L0':>9}{'L1':>9}{'budget':>10}{'steps':>7}{'floor':>11}  ok")
    for seed in config.seeds:
        r = budget_run(config, seed, delta=args.delta)
        print(f"{r.seed:>4}{r.gap:>10.4f}{r.zeta:>9.3f}{r.L0:>9.3f}{r.L1:>9.3f}{r.budget:>10}{r.steps:>7}"
              f"{r.bias_floor:>11.2e}  {r.reached and r.steps <= r.budget}")


if __name__ == "__main__":
    main()
