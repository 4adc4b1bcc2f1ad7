"""Meta-gradient estimators with uniform cost accounting.

The first-order bi-level estimators differentiate the solution of the
perturbed inner problem with respect to the perturbation ``nu`` by finite
differences:

    forward    g = -lam (phi_nu - phi_0) / nu
    symmetric  g = -lam (phi_nu - phi_-nu) / (2 nu)

Baselines: first-order MAML (test gradient at the adapted point), Reptile
(scaled displacement of plain GD on the training loss), iMAML (conjugate
gradient on ``(I + H/lam) v = grad f``) and unrolled MAML (reverse
accumulation through K plain GD steps).
"""

from dataclasses import dataclass, field, replace
from enum import Enum
import math
import warnings

import numpy as np

from .errors import ConfigError, EstimatorError, NumericalError
from .inner import InnerSolver, PerturbedProblem, solve_nesterov
from .tasks import SmoothnessConstants, exact_meta_grad, local_lipschitz_bound, meta_loss

NU_MIN = 1e-8
ROUNDOFF = np.finfo(float).eps
# perturbation used when the truncation bias vanishes identically
NU_DEGENERATE = 1.0


class Method(str, Enum):
    EXACT = "exact"
    FOBMAML_FORWARD = "fobmaml_forward"
    FOBMAML_SYMMETRIC = "fobmaml_symmetric"
    FOMAML = "fomaml"
    REPTILE = "reptile"
    IMAML_CG = "imaml"
    MAML_UNROLLED = "maml"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower().replace("-", "_"))
        except ValueError:
            choices = ", ".join(m.value for m in cls)
            raise ConfigError(f"unknown method {name!r}; expected one of: {choices}") from None


FIRST_ORDER = frozenset({Method.FOBMAML_FORWARD, Method.FOBMAML_SYMMETRIC, Method.FOMAML, Method.REPTILE})
FOBMAML = frozenset({Method.FOBMAML_FORWARD, Method.FOBMAML_SYMMETRIC})


@dataclass(frozen=True)
class HyperParams:
    """Scalar knobs shared by the estimators and the outer loop.

    ``nu=None`` selects the perturbation from the expected inner precision.
    ``inner_lr=None`` gives the plain-GD baselines a step of ``1/(lam K)``.
    """

    lam: float
    nu: float = None
    delta: float = None
    inner_lr: float = None
    inner_steps: int = 20
    outer_lr: float = 0.1
    clip: float = 1.0
    beta: float = 0.0
    cg_steps: int = 5
    nu_min: float = NU_MIN

    def __post_init__(self):
        if not self.lam > 0:
            raise ConfigError(f"lambda must be positive, got {self.lam}")
        if self.nu is not None and self.nu == 0:
            raise ConfigError("nu must be non-zero for finite-difference estimators")
        if self.inner_steps < 0:
            raise ConfigError("inner_steps must be non-negative")
        if self.cg_steps < 0:
            raise ConfigError("cg_steps must be non-negative")

    def default_solver(self):
        if self.delta is not None:
            return InnerSolver("gd", target_delta=self.delta)
        return InnerSolver("gd", max_iters=self.inner_steps)


@dataclass
class GradEstimate:
    g: np.ndarray
    method: Method
    grad_evals: int = 0
    hvp_evals: int = 0
    inner_iterations: int = 0
    nu_used: float = None
    delta_certified: float = None
    warning: str = None
    solutions: dict = field(default_factory=dict, repr=False)


# -- nu selection ------------------------------------------------------------


def tune_nu(method, delta, constants, lam, nu_min=NU_MIN):
    """Bias-minimising perturbation for inner precision ``delta``.

    Forward: ``sqrt(lam^2 delta / (L0 (L1 lam + L2_hat L0)))``.  Symmetric:
    ``nu = (delta mu^3 / (L0 (L1 + L2_hat L0/mu)^2))^(1/3)``, which equates the
    third-order truncation term ``lam L0 (L1 + L2_hat L0/mu)^2 nu^2 / mu^3`` with
    the inexactness term ``lam delta / nu``.  The result is kept inside half
    the admissible interval ``mu / L1`` and above ``nu_min``.

    With vanishing truncation constants (linear tasks) only the ``delta / nu``
    term is left, so the largest perturbation is best; ``NU_DEGENERATE`` is
    returned.  ``delta = 0`` with non-degenerate constants returns ``nu_min``.
    """
    method = Method.parse(method)
    if delta < 0 or not math.isfinite(delta):
        raise ConfigError(f"delta must be non-negative and finite, got {delta}")
    c = constants
    if method == Method.FOBMAML_FORWARD:
        denom = c.L0 * (c.L1 * lam + c.L2_hat * c.L0)
        nu = math.sqrt(lam * lam * delta / denom) if denom > 0 else NU_DEGENERATE
    elif method == Method.FOBMAML_SYMMETRIC:
        if c.mu <= 0:
            raise ConfigError("symmetric tuning needs a strongly convex inner problem (mu > 0)")
        denom = c.L0 * (c.L1 + c.L2_hat * c.L0 / c.mu) ** 2
        nu = (delta * c.mu ** 3 / denom) ** (1.0 / 3.0) if denom > 0 else NU_DEGENERATE
    else:
        raise ConfigError(f"{method.value} does not use a perturbation")
    if c.L1 > 0 and c.mu > 0:
        nu = min(nu, 0.5 * c.mu / c.L1)
    return max(nu, nu_min)


def forward_bias_bound(constants, lam, nu, delta=0.0):
    """Worst-case forward bias: ``(L0/lam)(L1 + L0 L2_hat/lam) nu + 2 lam delta / nu``."""
    c = constants
    return c.L0 / lam * (c.L1 + c.L0 * c.L2_hat / lam) * abs(nu) + 2.0 * lam * delta / abs(nu)


def local_constants(task, lam, center, radius):
    """Single-task constants with L0 taken over B(center, radius)."""
    return SmoothnessConstants(
        L0=local_lipschitz_bound(task, center, radius),
        L1=task.test_smoothness,
        L1_hat=task.train_smoothness,
        L2_hat=task.hessian_lipschitz,
        zeta=0.0,
        lam=lam,
        mu=lam + task.curvature_range(0.0)[0],
    )


# -- first-order bi-level estimators -----------------------------------------


def backward_difference(phi_0, phi_minus, lam, nu):
    """``-lam (phi_0 - phi_-nu) / nu``."""
    return -lam * (phi_0 - phi_minus) / nu


def forward_difference(phi_plus, phi_0, lam, nu):
    """``-lam (phi_nu - phi_0) / nu``."""
    return -lam * (phi_plus - phi_0) / nu


def symmetric_difference(phi_plus, phi_minus, lam, nu):
    """``-lam (phi_nu - phi_-nu) / (2 nu)``."""
    return -lam * (phi_plus - phi_minus) / (2.0 * nu)


def _fobmaml(task, theta, h, solver, method, warm):
    theta = np.asarray(theta, dtype=float)
    solver = solver or h.default_solver()
    warm = warm or {}
    lam = h.lam
    extra_evals = 0
    p0 = PerturbedProblem(task, theta, lam, 0.0)
    if "0" in warm:
        start0 = warm["0"]
    elif "+" in warm and "-" in warm:
        # the unperturbed solution sits midway between the +nu and -nu ones up to O(nu^2)
        start0 = 0.5 * (warm["+"] + warm["-"])
    else:
        start0 = theta
    g0 = None
    nu = h.nu
    if nu is None:
        if solver.method == "exact":
            delta_exp = 0.0
            radius = np.linalg.norm(p0.grad(start0)) / p0.strong_convexity
        else:
            g0 = p0.grad(start0)
            delta_exp = solver.expected_delta(np.linalg.norm(g0), p0.smoothness, p0.strong_convexity)
            radius = np.linalg.norm(g0) / p0.strong_convexity
            if method == Method.FOBMAML_SYMMETRIC:
                extra_evals += 1
        # no solution is resolved more finely than the float spacing of its entries
        delta_exp = max(delta_exp, ROUNDOFF * max(np.linalg.norm(start0), np.linalg.norm(theta), 1.0))
        nu = tune_nu(method, delta_exp, local_constants(task, lam, start0, radius), lam, h.nu_min)

    if method == Method.FOBMAML_FORWARD:
        roles = {"+": nu, "0": 0.0}
    else:
        roles = {"+": nu, "-": -nu}
    problems = {r: (p0 if v == 0.0 else PerturbedProblem(task, theta, lam, v)) for r, v in roles.items()}
    L = max(p.smoothness for p in problems.values())
    mu = min(p.strong_convexity for p in problems.values())

    starts = {"0": start0}
    nu_old = warm.get("nu")
    for role in ("+", "-"):
        if role not in roles:
            continue
        if role in warm and nu_old:
            # rescale the previous displacement from phi_0 to the new perturbation
            starts[role] = start0 + (roles[role] / (nu_old if role == "+" else -nu_old)) * (warm[role] - start0)
        else:
            starts[role] = start0
    reports = {}
    for role, prob in problems.items():
        grad0 = g0 if (role == "0" and g0 is not None) else None
        reports[role] = solver(prob, phi0=starts[role], grad0=grad0, smoothness=L, strong_convexity=mu)
    if method == Method.FOBMAML_FORWARD:
        g = forward_difference(reports["+"].phi, reports["0"].phi, lam, nu)
    else:
        g = symmetric_difference(reports["+"].phi, reports["-"].phi, lam, nu)
    bad = [r for r, rep in reports.items() if not rep.converged]
    return GradEstimate(
        g=g,
        method=method,
        grad_evals=sum(r.grad_evals for r in reports.values()) + extra_evals,
        hvp_evals=0,
        inner_iterations=sum(r.iterations for r in reports.values()),
        nu_used=float(nu),
        delta_certified=max(r.certified_delta for r in reports.values()),
        warning=f"precision not reached for solve(s) {bad}" if bad else None,
        solutions={**{r: rep.phi for r, rep in reports.items()}, "nu": float(nu)},
    )


def est_fobmaml_forward(task, theta, h, solver=None, warm=None):
    """Forward finite difference of the perturbed inner solution."""
    return _fobmaml(task, theta, h, solver, Method.FOBMAML_FORWARD, warm)


def est_fobmaml_symmetric(task, theta, h, solver=None, warm=None):
    """Symmetric finite difference of the perturbed inner solution."""
    return _fobmaml(task, theta, h, solver, Method.FOBMAML_SYMMETRIC, warm)


# -- baselines -----------------------------------------------------------------


def _solve_unperturbed(task, theta, h, solver, warm):
    solver = solver or h.default_solver()
    prob = PerturbedProblem(task, np.asarray(theta, dtype=float), h.lam, 0.0)
    start = (warm or {}).get("0", prob.theta)
    return solver(prob, phi0=start)


def est_fomaml(task, theta, h, solver=None, warm=None):
    """Test gradient at the regularised inner solution, ignoring its Jacobian."""
    rep = _solve_unperturbed(task, theta, h, solver, warm)
    return GradEstimate(
        g=task.test_grad(rep.phi),
        method=Method.FOMAML,
        grad_evals=rep.grad_evals + 1,
        inner_iterations=rep.iterations,
        delta_certified=rep.certified_delta,
        warning=None if rep.converged else "precision not reached",
        solutions={"0": rep.phi},
    )


def default_inner_lr(task, h):
    """Plain-GD step for Reptile and MAML; by default K steps travel a total of ``1/lam``."""
    if h.inner_lr is not None:
        return h.inner_lr
    return 1.0 / (h.lam * max(h.inner_steps, 1))


def est_reptile(task, theta, h):
    """``(theta - phi_K) / (K alpha)`` after K plain GD steps on the training loss."""
    K = h.inner_steps
    if K < 1:
        raise ConfigError("Reptile needs at least one inner step")
    alpha = default_inner_lr(task, h)
    phi = np.array(theta, dtype=float)
    for _ in range(K):
        phi = phi - alpha * task.train_grad(phi)
    return GradEstimate(
        g=(np.asarray(theta, dtype=float) - phi) / (K * alpha),
        method=Method.REPTILE,
        grad_evals=K,
        inner_iterations=K,
    )


def conjugate_gradient(matvec, rhs, x0, max_steps, rtol=1e-12):
    """CG for a symmetric positive-definite operator.

    Returns ``(x, steps, matvecs)``.  Raises ``NumericalError`` on a direction
    of non-positive curvature.
    """
    x = np.array(x0, dtype=float)
    if max_steps == 0:
        return x, 0, 0
    r = rhs - matvec(x)
    matvecs = 1
    p = r.copy()
    rr = r @ r
    tol = (rtol * np.linalg.norm(rhs)) ** 2
    steps = 0
    while steps < max_steps and rr > tol:
        Ap = matvec(p)
        matvecs += 1
        curv = p @ Ap
        if curv <= 0:
            raise NumericalError(f"non-positive curvature {curv:.3e} in conjugate gradient step {steps + 1}")
        a = rr / curv
        x += a * p
        r -= a * Ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
        steps += 1
    return x, steps, matvecs


def est_imaml(task, theta, h, solver=None, cg_steps=None, warm=None):
    """CG solution of ``(I + hess f_hat(phi)/lam) v = grad f(phi)`` started at ``grad f(phi)``."""
    cg_steps = h.cg_steps if cg_steps is None else cg_steps
    rep = _solve_unperturbed(task, theta, h, solver, warm)
    phi = rep.phi
    rhs = task.test_grad(phi)

    def matvec(v):
        return v + task.train_hvp(v, phi) / h.lam

    v, _, hvps = conjugate_gradient(matvec, rhs, rhs, cg_steps)
    return GradEstimate(
        g=v,
        method=Method.IMAML_CG,
        grad_evals=rep.grad_evals + 1,
        hvp_evals=hvps,
        inner_iterations=rep.iterations,
        delta_certified=rep.certified_delta,
        warning=None if rep.converged else "precision not reached",
        solutions={"0": phi},
    )


def est_maml_unrolled(task, theta, h):
    """Exact gradient of ``f(phi_K(theta))`` through K plain GD steps (reverse mode)."""
    K = h.inner_steps
    alpha = default_inner_lr(task, h)
    traj = [np.array(theta, dtype=float)]
    for _ in range(K):
        traj.append(traj[-1] - alpha * task.train_grad(traj[-1]))
    v = task.test_grad(traj[-1])
    for k in range(K - 1, -1, -1):
        v = v - alpha * task.train_hvp(v, traj[k])
    return GradEstimate(
        g=v,
        method=Method.MAML_UNROLLED,
        grad_evals=K + 1,
        hvp_evals=K,
        inner_iterations=K,
    )


def reference_phi(task, theta, lam, nu=0.0, delta=1e-12):
    """High-precision inner solution for tasks without a closed form."""
    prob = PerturbedProblem(task, np.asarray(theta, dtype=float), lam, nu)
    rep = solve_nesterov(prob, target_delta=delta, max_iters=200_000)
    if not rep.converged:
        warnings.warn(f"reference solve stopped at certificate {rep.certified_delta:.2e}")
    return rep.phi


def reference_meta_grad(task, theta, lam, delta=1e-12):
    """Meta-gradient from the implicit formula at a high-precision inner solution."""
    phi = reference_phi(task, theta, lam, 0.0, delta)
    H = task.train_hessian(phi)
    return np.linalg.solve(np.eye(task.dim) + H / lam, task.test_grad(phi))


def reference_meta_loss(task, theta, lam, delta=1e-12):
    return task.test_value(reference_phi(task, theta, lam, 0.0, delta))


def true_meta_grad(task, theta, lam):
    """Exact meta-gradient: closed form for quadratics, high-precision reference otherwise."""
    if task.is_quadratic:
        return exact_meta_grad(task, theta, lam, check=False)
    return reference_meta_grad(task, theta, lam)


def true_meta_loss(task, theta, lam):
    if task.is_quadratic:
        return meta_loss(task, theta, lam)
    return reference_meta_loss(task, theta, lam)


def est_exact(task, theta, h):
    return GradEstimate(g=true_meta_grad(task, theta, h.lam), method=Method.EXACT)


def estimate(task, theta, h, method, solver=None, warm=None):
    """Dispatch one single-task estimate."""
    method = Method.parse(method)
    if method == Method.FOBMAML_FORWARD:
        return est_fobmaml_forward(task, theta, h, solver, warm)
    if method == Method.FOBMAML_SYMMETRIC:
        return est_fobmaml_symmetric(task, theta, h, solver, warm)
    if method == Method.FOMAML:
        return est_fomaml(task, theta, h, solver, warm)
    if method == Method.REPTILE:
        return est_reptile(task, theta, h)
    if method == Method.IMAML_CG:
        return est_imaml(task, theta, h, solver, warm=warm)
    if method == Method.MAML_UNROLLED:
        return est_maml_unrolled(task, theta, h)
    return est_exact(task, theta, h)


def batch_estimate(tasks, theta, h, method, solver=None, warm=None):
    """Average of per-task estimates; costs are summed.

    ``warm`` is an optional list (one dict per task) of warm-start solutions,
    as returned in ``GradEstimate.solutions``.  The result's ``solutions`` is
    that list for the next call.
    """
    if len(tasks) == 0:
        raise ConfigError("batch_estimate needs at least one task")
    method = Method.parse(method)
    ests = []
    for i, task in enumerate(tasks):
        try:
            ests.append(estimate(task, theta, h, method, solver, warm[i] if warm else None))
        except Exception as exc:
            raise EstimatorError(i, exc) from exc
    g = np.zeros_like(ests[0].g)
    for e in ests:
        g += e.g
    g /= len(ests)
    deltas = [e.delta_certified for e in ests if e.delta_certified is not None]
    nus = [e.nu_used for e in ests if e.nu_used is not None]
    warns = [f"task {i}: {e.warning}" for i, e in enumerate(ests) if e.warning]
    return GradEstimate(
        g=g,
        method=method,
        grad_evals=sum(e.grad_evals for e in ests),
        hvp_evals=sum(e.hvp_evals for e in ests),
        inner_iterations=sum(e.inner_iterations for e in ests),
        nu_used=float(np.mean(nus)) if nus else None,
        delta_certified=max(deltas) if deltas else None,
        warning="; ".join(warns) if warns else None,
        solutions=[e.solutions for e in ests],
    )
