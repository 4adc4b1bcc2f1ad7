"""Outer-loop update rules and their step budgets.

    GD          theta - eta g
    ClippedGD   theta - eta min(1, c/|g|) g
    NormalizedGD theta - eta g / (beta + |g|)
"""

from dataclasses import dataclass
import math

import numpy as np

from .errors import ConfigError, NumericalError

VARIANTS = ("gd", "clipped", "normalized")


@dataclass
class OuterOptimizer:
    variant: str = "gd"
    lr: float = 0.1
    clip: float = 1.0
    beta: float = 0.0
    step_count: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown outer variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.lr > 0:
            raise ConfigError(f"outer learning rate must be positive, got {self.lr}")
        if self.variant == "clipped" and not self.clip > 0:
            raise ConfigError(f"clip level must be positive, got {self.clip}")
        if self.variant == "normalized" and not self.beta >= 0:
            raise ConfigError(f"beta must be non-negative, got {self.beta}")

    def direction_scale(self, grad_norm):
        """Multiplier s such that the update is ``-s g``."""
        if self.variant == "gd":
            return self.lr
        if self.variant == "clipped":
            return self.lr * (1.0 if grad_norm <= self.clip else self.clip / grad_norm)
        denom = self.beta + grad_norm
        return self.lr / denom if denom > 0 else 0.0

    def step(self, theta, g):
        return step(self, theta, g)


def step(opt, theta, g):
    """Apply one update and bump ``opt.step_count``."""
    theta = np.asarray(theta, dtype=float)
    g = np.asarray(g, dtype=float)
    if g.shape != theta.shape:
        raise ValueError(f"gradient shape {g.shape} does not match theta shape {theta.shape}")
    if not np.all(np.isfinite(g)):
        raise NumericalError("non-finite meta-gradient passed to the outer optimizer")
    gn = float(np.linalg.norm(g))
    opt.step_count += 1
    if gn == 0.0:
        return theta.copy()
    return theta - opt.direction_scale(gn) * g


@dataclass(frozen=True)
class GeneralizedSmoothness:
    """``|hess F(theta)| <= L0 + L1 |grad F(theta)|`` with gradient bound ``G``."""

    L0: float
    L1: float
    G: float = math.inf

    @classmethod
    def from_constants(cls, constants):
        return cls(constants.gen_L0, constants.gen_L1, constants.G)

    @property
    def classical(self):
        if self.L1 == 0:
            return self.L0
        return self.L0 + self.G * self.L1


def _as_smoothness(constants):
    if isinstance(constants, GeneralizedSmoothness):
        return constants
    return GeneralizedSmoothness.from_constants(constants)


def schedule_from_constants(constants, variant="normalized"):
    """Step sizes prescribed by the convergence analysis.

    NormalizedGD: ``eta = 1/L1``, ``beta = L0/L1``.  ClippedGD uses the same
    ``eta`` with clip level ``L0/L1``.  GD: ``eta = 1/(L0 + G L1)``.  When
    ``L1 = 0`` every variant falls back to GD with ``eta = 1/L0``.
    """
    s = _as_smoothness(constants)
    if not s.L0 > 0:
        raise ConfigError(f"L0 must be positive, got {s.L0}")
    if s.L1 == 0:
        return OuterOptimizer("gd", lr=1.0 / s.L0)
    if variant == "normalized":
        return OuterOptimizer("normalized", lr=1.0 / s.L1, beta=s.L0 / s.L1)
    if variant == "clipped":
        return OuterOptimizer("clipped", lr=1.0 / s.L1, clip=s.L0 / s.L1)
    if variant == "gd":
        if not math.isfinite(s.classical):
            raise ConfigError("GD schedule needs a finite gradient bound G")
        return OuterOptimizer("gd", lr=1.0 / s.classical)
    raise ConfigError(f"unknown outer variant {variant!r}")


@dataclass(frozen=True)
class ConvergenceBudget:
    gap: float
    eps: float

    def __post_init__(self):
        if not self.eps > 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if not self.gap >= 0:
            raise ConfigError(f"initial gap must be non-negative, got {self.gap}")


def budget_bound(budget, constants, variant="normalized"):
    """Upper bound on the steps needed to reach ``|grad F| <= eps``.

    Normalized and clipped GD: ``4 L0 gap/eps^2 + 4 L1^2 gap/L0``.  GD with
    ``eta = 1/L``: ``2 L gap/eps^2``.
    """
    s = _as_smoothness(constants)
    if not s.L0 > 0:
        raise ConfigError(f"L0 must be positive, got {s.L0}")
    gap, eps = budget.gap, budget.eps
    if gap == 0:
        return 0
    if variant in ("normalized", "clipped"):
        bound = 4.0 * s.L0 * gap / eps ** 2 + 4.0 * s.L1 ** 2 * gap / s.L0
    elif variant == "gd":
        bound = 2.0 * s.classical * gap / eps ** 2
    else:
        raise ConfigError(f"unknown outer variant {variant!r}")
    return math.ceil(bound)
