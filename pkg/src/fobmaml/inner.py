"""Iterative solvers for the perturbed inner problem.

The inner objective for meta-parameters ``theta`` is

    g(phi) = nu f(phi) + f_hat(phi) + lam/2 |phi - theta|^2

Solvers stop on the strong-convexity certificate ``|grad g(phi)| / mu <= delta``
(``mu`` the curvature lower bound in force), or after a fixed number of steps
when no target precision is given.  Both are first-order: they never request a
Hessian-vector product.
"""

from dataclasses import dataclass, field, replace
import math

import numpy as np

from .errors import ConfigError, StepSizeError
from .tasks import closed_form_phi


@dataclass(frozen=True, eq=False)
class PerturbedProblem:
    task: object
    theta: np.ndarray
    lam: float
    nu: float = 0.0

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        if theta.shape != (self.task.dim,):
            raise ValueError(f"theta has shape {theta.shape}, expected ({self.task.dim},)")
        object.__setattr__(self, "theta", theta)
        if not self.lam > 0:
            raise ConfigError(f"lambda must be positive, got {self.lam}")
        lo, hi = self.task.curvature_range(self.nu)
        if self.lam + lo <= 0:
            raise ConfigError(
                f"nu={self.nu} is outside the admissible interval for lambda={self.lam}: "
                f"inner problem is not strongly convex (min curvature {self.lam + lo:.3e})"
            )
        object.__setattr__(self, "strong_convexity", self.lam + lo)
        object.__setattr__(self, "smoothness", self.lam + hi)

    @property
    def condition_number(self):
        return self.smoothness / self.strong_convexity

    def value(self, phi):
        diff = phi - self.theta
        return self.nu * self.task.test_value(phi) + self.task.train_value(phi) + 0.5 * self.lam * diff @ diff

    def grad(self, phi):
        g = self.task.train_grad(phi) + self.lam * (phi - self.theta)
        if self.nu != 0.0:
            g = g + self.nu * self.task.test_grad(phi)
        return g


def objective_grad(problem, phi):
    """Gradient ``nu grad f + grad f_hat + lam (phi - theta)``."""
    return problem.grad(np.asarray(phi, dtype=float))


@dataclass
class SolveReport:
    phi: np.ndarray
    iterations: int
    final_grad_norm: float
    certified_delta: float
    grad_evals: int
    hvp_evals: int = 0
    converged: bool = True
    grad_norms: list = field(default_factory=list, repr=False)


def _start(problem, phi0):
    if phi0 is None:
        return problem.theta.copy()
    phi0 = np.asarray(phi0, dtype=float)
    if phi0.shape != problem.theta.shape:
        raise ValueError("warm start has the wrong shape")
    return phi0.copy()


def solve_gd(problem, alpha=None, target_delta=None, max_iters=10_000, phi0=None, grad0=None,
             trace=False):
    """Plain gradient descent ``phi <- phi - alpha grad g(phi)``.

    With ``target_delta=None`` exactly ``max_iters`` steps are taken (fixed
    budget).  Otherwise iteration stops as soon as the certificate reaches
    ``target_delta``; if ``max_iters`` runs out first the best iterate is
    returned with ``converged=False``.
    """
    if alpha is None:
        alpha = 1.0 / problem.smoothness
    if not alpha > 0:
        raise ConfigError(f"step size must be positive, got {alpha}")
    if target_delta is not None and not target_delta > 0:
        raise ConfigError(f"target_delta must be positive, got {target_delta}")
    mu = problem.strong_convexity
    phi = _start(problem, phi0)
    g = problem.grad(phi) if grad0 is None else np.asarray(grad0, dtype=float)
    evals, it = 1, 0
    norms = []
    best = (math.inf, phi, it)
    prev_value, increases = problem.value(phi), 0
    while True:
        gn = float(np.linalg.norm(g))
        if trace:
            norms.append(gn)
        if not math.isfinite(gn):
            raise StepSizeError(f"gradient descent produced non-finite values at step {it}")
        if gn < best[0]:
            best = (gn, phi, it)
        if gn == 0.0:
            break
        if target_delta is not None and gn / mu <= target_delta:
            break
        if it >= max_iters:
            break
        phi = phi - alpha * g
        it += 1
        g = problem.grad(phi)
        evals += 1
        value = problem.value(phi)
        increases = increases + 1 if value > prev_value else 0
        prev_value = value
        if increases >= 10:
            raise StepSizeError(
                f"objective increased for 10 consecutive steps (alpha={alpha:.3e}, "
                f"smoothness={problem.smoothness:.3e})"
            )
    gn = float(np.linalg.norm(g))
    converged = target_delta is None or gn / mu <= target_delta
    if not converged and best[0] < gn:
        gn, phi, _ = best
    return SolveReport(phi, it, gn, gn / mu, evals, 0, converged, norms)


def solve_nesterov(problem, target_delta=None, max_iters=10_000, phi0=None, grad0=None,
                   smoothness=None, strong_convexity=None, trace=False):
    """Nesterov's accelerated gradient method with constant momentum.

    Uses step ``1/L`` and momentum ``(sqrt(L) - sqrt(mu))/(sqrt(L) + sqrt(mu))``;
    ``smoothness``/``strong_convexity`` override the problem's own ``L``/``mu``
    (the certificate always uses the problem's ``mu``).  The reported point is
    the extrapolated iterate at which the last gradient was taken.
    """
    if target_delta is not None and not target_delta > 0:
        raise ConfigError(f"target_delta must be positive, got {target_delta}")
    L = problem.smoothness if smoothness is None else smoothness
    mu_m = problem.strong_convexity if strong_convexity is None else strong_convexity
    mu = problem.strong_convexity
    sq = math.sqrt(mu_m / L)
    momentum = (1.0 - sq) / (1.0 + sq)
    x = y = _start(problem, phi0)
    g = problem.grad(y) if grad0 is None else np.asarray(grad0, dtype=float)
    g0 = max(float(np.linalg.norm(g)), 1e-300)
    evals, it = 1, 0
    norms = []
    best = (math.inf, y)
    while True:
        gn = float(np.linalg.norm(g))
        if trace:
            norms.append(gn)
        if not math.isfinite(gn) or gn > 1e8 * g0:
            raise StepSizeError(f"accelerated gradient diverged at step {it} (L={L:.3e}, mu={mu_m:.3e})")
        if gn < best[0]:
            best = (gn, y)
        if gn == 0.0:
            break
        if target_delta is not None and gn / mu <= target_delta:
            break
        if it >= max_iters:
            break
        x_new = y - g / L
        y = x_new + momentum * (x_new - x)
        x = x_new
        it += 1
        g = problem.grad(y)
        evals += 1
    gn = float(np.linalg.norm(g))
    converged = target_delta is None or gn / mu <= target_delta
    if not converged and best[0] < gn:
        gn, y = best
    return SolveReport(y, it, gn, gn / mu, evals, 0, converged, norms)


def solve_exact(problem):
    """Closed-form solve (verification only; quadratic tasks)."""
    phi = closed_form_phi(problem.task, problem.theta, problem.lam, problem.nu)
    return SolveReport(phi, 0, 0.0, 0.0, 0, 0, True)


def predicted_delta(method, iters, grad0_norm, smoothness, strong_convexity, alpha=None):
    """A-priori bound on ``|phi_K - phi*|`` after ``iters`` steps from a point with gradient norm ``grad0_norm``."""
    L, mu = smoothness, strong_convexity
    dist0 = grad0_norm / mu
    if method == "exact":
        return 0.0
    if method == "gd":
        alpha = 1.0 / L if alpha is None else alpha
        rho = max(abs(1.0 - alpha * mu), abs(1.0 - alpha * L))
        return dist0 * rho ** iters
    if method == "nesterov":
        return dist0 * math.sqrt((L + mu) / mu) * (1.0 - math.sqrt(mu / L)) ** (iters / 2.0)
    raise ConfigError(f"unknown inner solver {method!r}")


SOLVERS = ("gd", "nesterov", "exact")


@dataclass(frozen=True)
class InnerSolver:
    """Solver choice plus its stopping rule.

    ``target_delta=None`` means a fixed budget of ``max_iters`` steps per solve.
    """

    method: str = "gd"
    target_delta: float = None
    max_iters: int = 10_000

    def __post_init__(self):
        if self.method not in SOLVERS:
            raise ConfigError(f"unknown inner solver {self.method!r}; expected one of {SOLVERS}")
        if self.max_iters < 0:
            raise ConfigError("max_iters must be non-negative")

    @property
    def fixed_budget(self):
        return self.target_delta is None

    def with_budget(self, iters):
        return replace(self, target_delta=None, max_iters=int(iters))

    def with_precision(self, delta, max_iters=None):
        return replace(self, target_delta=float(delta),
                       max_iters=self.max_iters if max_iters is None else max_iters)

    def __call__(self, problem, phi0=None, grad0=None, smoothness=None, strong_convexity=None):
        if self.method == "exact":
            return solve_exact(problem)
        if self.method == "gd":
            alpha = None if smoothness is None else 1.0 / smoothness
            return solve_gd(problem, alpha, self.target_delta, self.max_iters, phi0, grad0)
        return solve_nesterov(problem, self.target_delta, self.max_iters, phi0, grad0,
                              smoothness, strong_convexity)

    def expected_delta(self, grad0_norm, smoothness, strong_convexity):
        """Precision this solver is expected to reach (target, or a-priori bound for fixed budgets)."""
        if self.method == "exact":
            return 0.0
        if self.target_delta is not None:
            return self.target_delta
        return predicted_delta(self.method, self.max_iters, grad0_norm, smoothness, strong_convexity)
