"""Synthetic quadratic task families with closed-form inner solutions.

Every task carries a training objective ``f_hat(phi) = 0.5 phi^T A phi + b^T phi``
and a test objective of the same form (``test_A``, ``test_b``; by default equal
to the training pair).  For these tasks the regularised and perturbed inner
problems have closed-form minimisers, so the exact meta-gradient is available
and every estimator can be checked against it.

``SoftQuadraticTask`` adds a separable non-quadratic term with bounded third
derivative so that the Hessian of the training loss is not constant.
"""

from dataclasses import dataclass, field, asdict
from functools import cached_property
import math

import numpy as np

from .errors import ConfigError, NumericalError, SingularSystemError

SYMMETRY_TOL = 1e-12

# sup |h'''| for h(x) = x^2/2 - x*arctan(x) + log(1 + x^2)/2, attained at x = 1/sqrt(3)
SOFT_THIRD_DERIV_BOUND = 3.0 * math.sqrt(3.0) / 8.0


def _as_vector(x, dim, name):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != dim:
        raise ValueError(f"{name} must have shape ({dim},), got {x.shape}")
    return x


def _frozen(x):
    x = np.array(x, dtype=float)
    x.setflags(write=False)
    return x


@dataclass(frozen=True, eq=False)
class QuadraticTask:
    """One task: training pair (A, b) and optional distinct test pair."""

    A: np.ndarray
    b: np.ndarray
    test_A: np.ndarray = None
    test_b: np.ndarray = None

    def __post_init__(self):
        A = _frozen(np.atleast_2d(self.A))
        b = _frozen(np.atleast_1d(self.b))
        d = b.shape[0]
        if A.shape != (d, d):
            raise ValueError(f"A has shape {A.shape}, expected ({d}, {d})")
        if np.max(np.abs(A - A.T), initial=0.0) > SYMMETRY_TOL:
            raise ValueError("A must be symmetric")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        if self.test_A is not None:
            tA = _frozen(np.atleast_2d(self.test_A))
            if tA.shape != (d, d):
                raise ValueError(f"test_A has shape {tA.shape}, expected ({d}, {d})")
            if np.max(np.abs(tA - tA.T), initial=0.0) > SYMMETRY_TOL:
                raise ValueError("test_A must be symmetric")
            object.__setattr__(self, "test_A", tA)
        if self.test_b is not None:
            object.__setattr__(self, "test_b", _frozen(_as_vector(self.test_b, d, "test_b")))

    # -- structure ---------------------------------------------------------

    @property
    def dim(self):
        return self.b.shape[0]

    @property
    def is_quadratic(self):
        return True

    @property
    def has_test_split(self):
        return self.test_A is not None or self.test_b is not None

    @property
    def tA(self):
        return self.A if self.test_A is None else self.test_A

    @property
    def tb(self):
        return self.b if self.test_b is None else self.test_b

    @cached_property
    def train_eigs(self):
        return np.linalg.eigvalsh(self.A)

    @cached_property
    def test_eigs(self):
        return self.train_eigs if self.test_A is None else np.linalg.eigvalsh(self.test_A)

    @property
    def train_smoothness(self):
        """Spectral bound on the training Hessian (L-hat-1)."""
        return float(np.max(np.abs(self.train_eigs)))

    @property
    def test_smoothness(self):
        """Spectral bound on the test Hessian (L1)."""
        return float(np.max(np.abs(self.test_eigs)))

    @property
    def hessian_lipschitz(self):
        """Lipschitz constant of the training Hessian (L-hat-2)."""
        return 0.0

    def curvature_range(self, nu=0.0):
        """Bounds (lo, hi) on the eigenvalues of ``nu * hess f + hess f_hat`` over all phi."""
        if self.test_A is None:
            eigs = (1.0 + nu) * self.train_eigs
        else:
            eigs = np.linalg.eigvalsh(self.A + nu * self.test_A)
        return float(eigs.min()), float(eigs.max())

    # -- objectives --------------------------------------------------------

    def _check(self, phi, name="phi"):
        return _as_vector(phi, self.dim, name)

    def train_value(self, phi):
        phi = self._check(phi)
        return 0.5 * phi @ self.A @ phi + phi @ self.b

    def train_grad(self, phi):
        phi = self._check(phi)
        return self.A @ phi + self.b

    def train_hvp(self, v, phi=None):
        return self.A @ self._check(v, "v")

    def train_hessian(self, phi=None):
        return np.array(self.A)

    def test_value(self, phi):
        phi = self._check(phi)
        return 0.5 * phi @ self.tA @ phi + phi @ self.tb

    def test_grad(self, phi):
        phi = self._check(phi)
        return self.tA @ phi + self.tb

    def test_hvp(self, v, phi=None):
        return self.tA @ self._check(v, "v")

    def test_hessian(self, phi=None):
        return np.array(self.tA)


def _soft(x):
    return 0.5 * x * x - x * np.arctan(x) + 0.5 * np.log1p(x * x)


def _soft_grad(x):
    return x - np.arctan(x)


def _soft_curv(x):
    x2 = x * x
    return x2 / (1.0 + x2)


@dataclass(frozen=True, eq=False)
class SoftQuadraticTask(QuadraticTask):
    """Quadratic task plus ``weight * sum_j h(phi_j)`` on both objectives.

    ``h''(x) = x^2 / (1 + x^2)`` grows from 0 to 1, so curvature increases with
    distance from the origin while the third derivative stays bounded.
    """

    weight: float = 1.0

    def __post_init__(self):
        super().__post_init__()
        if not self.weight >= 0:
            raise ValueError("weight must be non-negative")

    @property
    def is_quadratic(self):
        return self.weight == 0.0

    @property
    def train_smoothness(self):
        return float(max(abs(self.train_eigs.min()), abs(self.train_eigs.max() + self.weight)))

    @property
    def test_smoothness(self):
        return float(max(abs(self.test_eigs.min()), abs(self.test_eigs.max() + self.weight)))

    @property
    def hessian_lipschitz(self):
        return self.weight * SOFT_THIRD_DERIV_BOUND

    def curvature_range(self, nu=0.0):
        lo, hi = super().curvature_range(nu)
        extra = (1.0 + nu) * self.weight
        return lo + min(0.0, extra), hi + max(0.0, extra)

    def train_value(self, phi):
        return super().train_value(phi) + self.weight * np.sum(_soft(phi))

    def train_grad(self, phi):
        return super().train_grad(phi) + self.weight * _soft_grad(phi)

    def train_hvp(self, v, phi=None):
        if phi is None:
            raise ValueError("non-quadratic task needs phi for a Hessian-vector product")
        return super().train_hvp(v) + self.weight * _soft_curv(self._check(phi)) * v

    def train_hessian(self, phi=None):
        if phi is None:
            raise ValueError("non-quadratic task needs phi for the Hessian")
        return self.A + np.diag(self.weight * _soft_curv(self._check(phi)))

    def test_value(self, phi):
        return super().test_value(phi) + self.weight * np.sum(_soft(phi))

    def test_grad(self, phi):
        return super().test_grad(phi) + self.weight * _soft_grad(phi)

    def test_hvp(self, v, phi=None):
        if phi is None:
            raise ValueError("non-quadratic task needs phi for a Hessian-vector product")
        return super().test_hvp(v) + self.weight * _soft_curv(self._check(phi)) * v

    def test_hessian(self, phi=None):
        if phi is None:
            raise ValueError("non-quadratic task needs phi for the Hessian")
        return self.tA + np.diag(self.weight * _soft_curv(self._check(phi)))


# -- families ----------------------------------------------------------------


@dataclass(frozen=True)
class TaskFamily:
    """Recipe for a seeded family of ``M`` tasks in dimension ``d``.

    Eigenvalues of every A are drawn from ``[eig_min, eig_max]``, log-uniformly
    when the range is positive, with both endpoints always present so the
    condition number is exactly ``eig_max / eig_min``.  With
    ``allow_negative_eigs`` they are uniform on ``[-eig_max, eig_max]``.
    """

    d: int = 50
    M: int = 8
    eig_min: float = 1e-4
    eig_max: float = 1.0
    allow_negative_eigs: bool = False
    b_scale: float = 1.0
    seed: int = 0
    linear: bool = False
    split_test: bool = False
    soft_weight: float = 0.0

    def __post_init__(self):
        if not (isinstance(self.d, (int, np.integer)) and self.d >= 1):
            raise ConfigError(f"d must be a positive integer, got {self.d!r}")
        if not (isinstance(self.M, (int, np.integer)) and self.M >= 1):
            raise ConfigError(f"M must be a positive integer, got {self.M!r}")
        if self.eig_min > self.eig_max:
            raise ConfigError(f"eig_min={self.eig_min} exceeds eig_max={self.eig_max}")
        if not self.allow_negative_eigs and not self.linear and self.eig_min <= 0:
            raise ConfigError("eig_min must be positive unless allow_negative_eigs is set")
        if self.b_scale < 0:
            raise ConfigError("b_scale must be non-negative")
        if self.soft_weight < 0:
            raise ConfigError("soft_weight must be non-negative")

    @property
    def kappa(self):
        return self.eig_max / self.eig_min

    @property
    def train_smoothness(self):
        """Declared bound L-hat-1 on the spectral norm of every training Hessian."""
        if self.linear:
            return self.soft_weight
        return self.eig_max + self.soft_weight

    def to_dict(self):
        return asdict(self)


def _random_orthogonal(rng, d):
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def _spectrum(rng, family):
    d, lo, hi = family.d, family.eig_min, family.eig_max
    if family.allow_negative_eigs:
        eigs = rng.uniform(-hi, hi, size=d)
        eigs[0] = hi
        if d > 1:
            eigs[1] = -hi
        return eigs
    if lo == hi:
        return np.full(d, float(hi))
    eigs = np.exp(rng.uniform(math.log(lo), math.log(hi), size=d))
    eigs[0] = lo
    if d > 1:
        eigs[-1] = hi
    return eigs


def _sample_matrix(rng, family):
    if family.linear:
        return np.zeros((family.d, family.d))
    lam = _spectrum(rng, family)
    q = _random_orthogonal(rng, family.d)
    A = (q * lam) @ q.T
    return 0.5 * (A + A.T)


def sample_family(family):
    """Draw ``family.M`` tasks; bit-identical for identical families."""
    rng = np.random.default_rng(family.seed)
    tasks = []
    for _ in range(family.M):
        A = _sample_matrix(rng, family)
        b = family.b_scale * rng.standard_normal(family.d)
        test_A = test_b = None
        if family.split_test:
            test_A = _sample_matrix(rng, family)
            test_b = family.b_scale * rng.standard_normal(family.d)
        if family.soft_weight > 0:
            tasks.append(SoftQuadraticTask(A, b, test_A, test_b, weight=family.soft_weight))
        else:
            tasks.append(QuadraticTask(A, b, test_A, test_b))
    return tasks


# -- closed forms --------------------------------------------------------------


def _require_closed_form(task):
    if not task.is_quadratic:
        raise TypeError(f"{type(task).__name__} has no closed-form inner solution")


def _check_spd_system(eigs, what, scale):
    smallest = eigs[np.argmin(np.abs(eigs))]
    if abs(smallest) <= 1e-13 * max(scale, 1.0):
        raise SingularSystemError(f"{what} is singular: eigenvalue {smallest:.3e}", float(smallest))


def closed_form_phi(task, theta, lam, nu=0.0):
    """Exact minimiser of ``nu f + f_hat + lam/2 |phi - theta|^2``.

    Solves ``((1 + nu) A + lam I) phi = lam theta - (1 + nu) b`` (with the
    test pair substituted for the ``nu`` part when the task has one).
    """
    _require_closed_form(task)
    theta = _as_vector(theta, task.dim, "theta")
    M = task.A + nu * task.tA + lam * np.eye(task.dim)
    if task.test_A is None:
        eigs = (1.0 + nu) * task.train_eigs + lam
    else:
        eigs = np.linalg.eigvalsh(M)
    _check_spd_system(eigs, f"(1+nu)A + lam I with nu={nu}, lam={lam}", lam)
    return np.linalg.solve(M, lam * theta - task.b - nu * task.tb)


def stationarity_residual(task, phi, theta, lam, nu=0.0):
    """Gradient of the perturbed inner objective at ``phi``."""
    return nu * task.test_grad(phi) + task.train_grad(phi) + lam * (phi - theta)


def exact_meta_grad(task, theta, lam, check=True):
    """Exact meta-gradient of ``F_i(theta) = f(phi*(theta))``.

    Computed as ``lam (A + lam I)^{-1} grad f(phi*)`` with an explicit inverse.
    With ``check`` the implicit form ``(I + A/lam)^{-1} grad f(phi*)`` is also
    evaluated by a linear solve and the two must agree to 1e-10 (relative).
    """
    _require_closed_form(task)
    theta = _as_vector(theta, task.dim, "theta")
    eye = np.eye(task.dim)
    _check_spd_system(task.train_eigs + lam, f"A + lam I with lam={lam}", lam)
    inv = np.linalg.inv(task.A + lam * eye)
    phi = inv @ (lam * theta - task.b)
    g = lam * (inv @ (task.tA @ phi + task.tb))
    if check:
        g_implicit = meta_grad_implicit(task, theta, lam)
        scale = max(np.linalg.norm(g), np.linalg.norm(g_implicit), 1e-300)
        err = np.linalg.norm(g - g_implicit) / scale
        if err > 1e-10 and np.linalg.norm(g - g_implicit) > 1e-14:
            raise NumericalError(f"meta-gradient forms disagree: relative error {err:.2e}")
    return g


def meta_grad_implicit(task, theta, lam, phi=None):
    """``(I + hess f_hat(phi)/lam)^{-1} grad f(phi)`` at ``phi`` (default: exact phi*)."""
    if phi is None:
        phi = closed_form_phi(task, theta, lam)
    H = task.train_hessian(phi)
    return np.linalg.solve(np.eye(task.dim) + H / lam, task.test_grad(phi))


def meta_loss(task, theta, lam):
    """Outer loss ``f(phi*(theta))`` of one task."""
    return task.test_value(closed_form_phi(task, theta, lam))


def meta_objective(tasks, theta, lam):
    return float(np.mean([meta_loss(t, theta, lam) for t in tasks]))


def meta_gradient(tasks, theta, lam):
    return np.mean([exact_meta_grad(t, theta, lam, check=False) for t in tasks], axis=0)


def meta_hessian(tasks, theta, lam):
    """Hessian of the averaged outer loss for quadratic tasks (constant in theta)."""
    d = tasks[0].dim
    H = np.zeros((d, d))
    for t in tasks:
        _require_closed_form(t)
        inv = np.linalg.inv(t.A + lam * np.eye(d))
        H += lam * lam * inv @ t.tA @ inv
    H /= len(tasks)
    return 0.5 * (H + H.T)


# -- smoothness constants ----------------------------------------------------


@dataclass(frozen=True)
class SmoothnessConstants:
    """Problem constants and the derived generalised-smoothness moduli.

    ``stated_L0``/``stated_L1`` evaluate the textbook expressions
    ``L1/4 + L2_hat zeta/(4 lam)`` and ``L2_hat/(2 lam)``.  ``gen_L0`` and
    ``gen_L1`` are the moduli that actually bound the outer objective,
    ``c^2 (L1 + L2_hat zeta/lam)`` and ``c^2 L2_hat/lam`` with
    ``c = lam/(lam - L1_hat)``; schedules and budgets use these.
    """

    L0: float
    L1: float
    L1_hat: float
    L2_hat: float
    zeta: float
    lam: float
    mu: float = field(default=None)

    def __post_init__(self):
        if self.mu is None:
            object.__setattr__(self, "mu", self.lam - self.L1_hat)

    @property
    def contraction(self):
        if self.lam <= self.L1_hat:
            raise ConfigError(f"lambda={self.lam} must exceed L1_hat={self.L1_hat}")
        return self.lam / (self.lam - self.L1_hat)

    @property
    def stated_L0(self):
        return self.L1 / 4.0 + self.L2_hat * self.zeta / (4.0 * self.lam)

    @property
    def stated_L1(self):
        return self.L2_hat / (2.0 * self.lam)

    @property
    def gen_L0(self):
        return self.contraction ** 2 * (self.L1 + self.L2_hat * self.zeta / self.lam)

    @property
    def gen_L1(self):
        return self.contraction ** 2 * self.L2_hat / self.lam

    @property
    def G(self):
        """Bound on the meta-gradient norm under strong convexity."""
        if self.mu <= 0:
            return math.inf
        return self.lam * self.L0 / self.mu

    @property
    def gen_L(self):
        """Classical smoothness ``gen_L0 + G gen_L1``."""
        if self.gen_L1 == 0:
            return self.gen_L0
        return self.gen_L0 + self.G * self.gen_L1

    def envelope(self, grad_norm):
        """Generalised smoothness modulus at a point with ``|grad F| = grad_norm``."""
        return self.gen_L0 + self.gen_L1 * grad_norm


def local_lipschitz_bound(task, center, radius):
    """Lipschitz bound of the test objective over the ball B(center, radius)."""
    r = np.linalg.norm(center) + radius
    slope = float(np.max(np.abs(task.test_eigs)))
    if isinstance(task, SoftQuadraticTask):
        slope += task.weight  # |h'(x)| <= |x|
    return float(slope * r + np.linalg.norm(task.tb))


def family_constants(tasks, lam, center, radius, zeta=0.0):
    """Worst-case constants over a task list, with L0 local to B(center, radius)."""
    center = np.asarray(center, dtype=float)
    return SmoothnessConstants(
        L0=max(local_lipschitz_bound(t, center, radius) for t in tasks),
        L1=max(t.test_smoothness for t in tasks),
        L1_hat=max(t.train_smoothness for t in tasks),
        L2_hat=max(t.hessian_lipschitz for t in tasks),
        zeta=float(zeta),
        lam=float(lam),
        mu=float(lam + min(t.curvature_range(0.0)[0] for t in tasks)),
    )


def task_variance(per_task_grads):
    """``sqrt(mean_i |g_i - mean g|^2)`` for a stack of per-task meta-gradients."""
    g = np.asarray(per_task_grads)
    return float(np.sqrt(np.mean(np.sum((g - g.mean(axis=0)) ** 2, axis=1))))
