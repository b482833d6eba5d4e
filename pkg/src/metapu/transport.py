"""
Optimal transport solvers on point clouds with uniform weights.

``solve_sinkhorn`` runs log-domain Sinkhorn iterations on the dual
potentials (f, g), optionally preceded by epsilon scaling. It is shared by
the Sinkhorn reconstruction loss (squared-Euclidean cost) and the
approximate EMD metric (Euclidean cost). ``exact_assignment_cost`` is the
unregularized reference used for exact EMD and for checking the solver.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from .config import ConfigRecord
from .errors import ConfigError, ShapeError
from .geom import CloudLike, as_points

logger = logging.getLogger(__name__)

COSTS = ("sqeuclidean", "euclidean")


@dataclass
class SinkhornConfig(ConfigRecord):
    """Entropic regularization and stopping rule (values for unit-normalized clouds)."""

    epsilon: float = 1e-3
    max_iters: int = 200
    marginal_tol: float = 1e-6
    # Epsilon scaling factor per annealing stage; None disables annealing
    scaling: Optional[float] = 0.5

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError(f"sinkhorn epsilon must be positive, got {self.epsilon}")
        if self.max_iters < 1:
            raise ConfigError(f"sinkhorn max_iters must be >= 1, got {self.max_iters}")
        if not self.marginal_tol > 0:
            raise ConfigError(f"sinkhorn marginal_tol must be positive, got {self.marginal_tol}")
        if self.scaling is not None and not 0.0 < self.scaling < 1.0:
            raise ConfigError(f"sinkhorn scaling must be in (0, 1) or null, got {self.scaling}")


@dataclass
class SinkhornSolution:
    f: np.ndarray
    g: np.ndarray
    plan: np.ndarray
    # Entropic OT value <a, f> + <b, g>
    value: float
    # <plan, C>, the transport part of the value without the entropy term
    transport_cost: float
    converged: bool
    iterations: int
    errors: List[float] = field(default_factory=list)


def cost_matrix(x: np.ndarray, y: np.ndarray, cost: str = "sqeuclidean") -> np.ndarray:
    """C(x, y) = 0.5 * |x - y|^2 (``sqeuclidean``) or |x - y| (``euclidean``)."""
    if cost == "sqeuclidean":
        return 0.5 * cdist(x, y, "sqeuclidean")
    if cost == "euclidean":
        return cdist(x, y, "euclidean")
    raise ConfigError(f"Unknown transport cost: {cost}. Use one of {COSTS}")


def _epsilon_schedule(c_max: float, cfg: SinkhornConfig) -> List[float]:
    if cfg.scaling is None:
        return []
    stages = []
    eps = c_max
    while eps > cfg.epsilon:
        stages.append(eps)
        eps *= cfg.scaling
    return stages


def solve_sinkhorn(x: CloudLike, y: CloudLike, cost: str = "sqeuclidean",
                   cfg: Optional[SinkhornConfig] = None) -> SinkhornSolution:
    """
    Entropic OT between uniform measures on x and y.

    Each iteration updates g then f; the L1 violation of the column
    marginal is recorded after every iteration (it is nonincreasing) and
    iteration stops once it falls below ``cfg.marginal_tol``. Failing to
    converge is reported through ``converged``, never raised.
    """
    cfg = cfg or SinkhornConfig()
    xa, ya = as_points(x), as_points(y)
    n, m = len(xa), len(ya)
    if n < 1 or m < 1:
        raise ShapeError(f"sinkhorn needs nonempty clouds, got {n} and {m} points")

    C = cost_matrix(xa, ya, cost)
    log_a = np.full(n, -np.log(n))
    log_b = np.full(m, -np.log(m))
    f = np.zeros(n)
    g = np.zeros(m)

    def update(eps):
        g_new = -eps * logsumexp(log_a[:, None] + (f[:, None] - C) / eps, axis=0)
        f_new = -eps * logsumexp(log_b[None, :] + (g_new[None, :] - C) / eps, axis=1)
        return f_new, g_new

    for eps in _epsilon_schedule(float(C.max()), cfg):
        f, g = update(eps)

    eps = cfg.epsilon
    errors = []
    converged = False
    iterations = 0
    log_plan = None
    for iterations in range(1, cfg.max_iters + 1):
        f, g = update(eps)
        log_plan = (f[:, None] + g[None, :] - C) / eps + log_a[:, None] + log_b[None, :]
        col = np.exp(logsumexp(log_plan, axis=0))
        err = float(np.abs(col - np.exp(log_b)).sum())
        errors.append(err)
        if err < cfg.marginal_tol:
            converged = True
            break

    plan = np.exp(log_plan)
    value = float(np.exp(log_a) @ f + np.exp(log_b) @ g)
    transport_cost = float((plan * C).sum())
    if not converged:
        logger.debug("sinkhorn did not converge: n=%d m=%d err=%.3e after %d iterations",
                     n, m, errors[-1], iterations)
    return SinkhornSolution(f=f, g=g, plan=plan, value=value, transport_cost=transport_cost,
                            converged=converged, iterations=iterations, errors=errors)


def exact_assignment_cost(x: CloudLike, y: CloudLike, cost: str = "sqeuclidean") -> float:
    """
    Minimum mean cost over bijections between equal-size clouds.

    Raises:
        ShapeError: if the clouds differ in size
    """
    xa, ya = as_points(x), as_points(y)
    if len(xa) != len(ya):
        raise ShapeError(f"exact assignment needs equal sizes, got {len(xa)} and {len(ya)}")
    C = cost_matrix(xa, ya, cost)
    rows, cols = linear_sum_assignment(C)
    return float(C[rows, cols].mean())
