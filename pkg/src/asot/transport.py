"""
Single-pair optimal transport: ground costs, the exact LP solver and
Sinkhorn's fixed-point iterations.

Cost matrices and transport plans are plain ``float64`` ndarrays; the
helpers :func:`check_cost` and :func:`check_plan` enforce their invariants.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .errors import InfeasibleError, InvalidArgumentError, NumericalError

MASS_TOL = 1e-6
PLAN_TOL = 1e-6


def as_simplex(mass, name="mass", tol=MASS_TOL):
    """Return ``mass`` as a float vector on the probability simplex.

    Vectors whose total is within ``tol`` of one are renormalized; anything
    further away, negative or non-finite is rejected.
    """
    mass = np.asarray(mass, dtype=np.float64)
    if mass.ndim != 1 or mass.size == 0:
        raise InvalidArgumentError(f"{name} must be a non-empty vector, got shape {mass.shape}")
    if not np.all(np.isfinite(mass)):
        raise InvalidArgumentError(f"{name} has non-finite entries")
    if np.any(mass < 0):
        raise InvalidArgumentError(f"{name} has negative entries")
    total = mass.sum()
    if abs(total - 1.0) > tol:
        raise InvalidArgumentError(f"{name} sums to {total!r}, not 1")
    if abs(total - 1.0) <= mass.size * np.finfo(np.float64).eps:
        return mass  # already normalized up to rounding; keep the given values
    return mass / total


@dataclass
class DiscreteDistribution:
    """Weighted point cloud: ``samples`` is n x d, ``mass`` has length n."""

    samples: np.ndarray
    mass: np.ndarray

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples[:, None]
        if samples.ndim != 2 or samples.shape[0] < 1:
            raise InvalidArgumentError(f"samples must be an n x d matrix with n >= 1, got {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise InvalidArgumentError("samples have non-finite entries")
        mass = as_simplex(self.mass)
        if mass.shape[0] != samples.shape[0]:
            raise InvalidArgumentError(
                f"mass has {mass.shape[0]} entries but there are {samples.shape[0]} samples"
            )
        self.samples = samples
        self.mass = mass

    @classmethod
    def uniform(cls, samples):
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples[:, None]
        n = samples.shape[0]
        if n < 1:
            raise InvalidArgumentError("cannot build a distribution from zero samples")
        return cls(samples, np.full(n, 1.0 / n))

    @property
    def size(self):
        return self.samples.shape[0]

    @property
    def dim(self):
        return self.samples.shape[1]


@dataclass(frozen=True)
class SinkhornConfig:
    """Entropic solver settings. Defaults follow the evaluation protocol."""

    epsilon: float = 0.1
    iterations: int = 50
    underflow_floor: float = 1e-300

    def __post_init__(self):
        if not self.epsilon > 0:
            raise InvalidArgumentError(f"epsilon must be positive, got {self.epsilon}")
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise InvalidArgumentError(f"iterations must be a positive integer, got {self.iterations}")
        if not self.underflow_floor > 0:
            raise InvalidArgumentError("underflow_floor must be positive")


def check_cost(C, shape=None):
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2:
        raise InvalidArgumentError(f"cost matrix must be 2-D, got shape {C.shape}")
    if shape is not None and C.shape != tuple(shape):
        raise InvalidArgumentError(f"cost matrix has shape {C.shape}, expected {tuple(shape)}")
    if not np.all(np.isfinite(C)):
        raise InvalidArgumentError("cost matrix has non-finite entries")
    if np.any(C < 0):
        raise InvalidArgumentError("cost matrix has negative entries")
    return C


def check_plan(T, a, b, tol=PLAN_TOL):
    """True when ``T`` is a nonnegative coupling of ``a`` and ``b``."""
    T = np.asarray(T)
    return bool(
        np.all(T >= 0)
        and np.allclose(T.sum(axis=1), a, rtol=0, atol=tol)
        and np.allclose(T.sum(axis=0), b, rtol=0, atol=tol)
    )


def euclidean_cost(X, Y):
    """Pairwise Euclidean distances between the rows of ``X`` and ``Y``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape[1] != Y.shape[1]:
        raise InvalidArgumentError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    return cdist(X, Y, metric="euclidean")


def _marginals(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1:
        raise InvalidArgumentError("marginals must be vectors")
    sa, sb = a.sum(), b.sum()
    if abs(sa - sb) > MASS_TOL:
        raise InfeasibleError(f"marginal totals differ: {sa!r} vs {sb!r}")
    return as_simplex(a, "a"), as_simplex(b, "b")


_emd = None


def _network_simplex():
    global _emd
    if _emd is None:
        from ot.lp import emd

        _emd = emd
    return _emd


def solve_exact(a, b, C):
    """Solve the OT linear program exactly.

    Parameters
    ----------
    a : array-like, shape (n,)
        Source masses on the probability simplex.
    b : array-like, shape (m,)
        Target masses on the probability simplex.
    C : array-like, shape (n, m)
        Ground cost matrix.

    Returns
    -------
    plan : ndarray, shape (n, m)
        An optimal coupling.
    cost : float
        ``<plan, C>``, the 1-Wasserstein distance when ``C`` is a metric cost.
    """
    a, b = _marginals(a, b)
    C = check_cost(C, (a.size, b.size))
    emd = _network_simplex()
    plan, log = emd(a, b, np.ascontiguousarray(C), numItermax=1_000_000, log=True)
    if log.get("warning"):
        raise NumericalError(f"exact solver did not reach optimality: {log['warning']}")
    plan = np.maximum(plan, 0.0)
    return plan, float(np.sum(plan * C))


def gibbs_kernel(C, epsilon):
    return np.exp(-np.asarray(C, dtype=np.float64) / epsilon)


def sinkhorn(a, b, C, cfg=None, log=False):
    """Entropic OT with a fixed number of Sinkhorn scaling updates.

    Starts from ``v = 1`` and alternates ``u = a / (K v)``, ``v = b / (K^T u)``
    for ``cfg.iterations`` rounds. The returned cost is the linear transport
    cost ``<T, C>`` of the plan ``T = diag(u) K diag(v)``; the entropy term is
    not included.

    Denominators below ``cfg.underflow_floor`` are clamped to it, which emits a
    ``RuntimeWarning`` and sets ``log["clamped"]``. A NaN anywhere raises
    :class:`NumericalError`.

    Returns ``(plan, cost)``, or ``(plan, cost, log)`` when ``log`` is true.
    """
    cfg = cfg or SinkhornConfig()
    a, b = _marginals(a, b)
    C = check_cost(C, (a.size, b.size))
    K = gibbs_kernel(C, cfg.epsilon)
    floor = cfg.underflow_floor
    clamped = False
    v = np.ones(b.size)
    u = np.ones(a.size)
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(cfg.iterations):
            Kv = K @ v
            low = Kv < floor
            if low.any():
                clamped = True
                Kv[low] = floor
            u = a / Kv
            KTu = K.T @ u
            low = KTu < floor
            if low.any():
                clamped = True
                KTu[low] = floor
            v = b / KTu
        plan = u[:, None] * K * v[None, :]
    if np.isnan(plan).any() or not np.all(np.isfinite(u)) or not np.all(np.isfinite(v)):
        raise NumericalError("Sinkhorn iterations produced non-finite values")
    if clamped:
        warnings.warn("Sinkhorn denominators underflowed and were clamped", RuntimeWarning, stacklevel=2)
    cost = float(np.sum(plan * C))
    if log:
        return plan, cost, {"u": u, "v": v, "clamped": clamped}
    return plan, cost
