"""
Training objective: debiased Sinkhorn reconstruction, uniformity and
repulsion terms, combined with fixed weights.

All losses take the predicted cloud as a ``Tensor`` (n x 3) and return a
scalar ``Tensor`` differentiable with respect to it. Ground truth may be a
``Tensor``, a ``PointCloud`` or a plain array.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist

from . import tensor as T
from .config import ConfigRecord
from .errors import ConfigError
from .geom import PointCloud, ball_query, build_knn, farthest_point_sample, nearest_neighbor_distances
from .tensor import Function, Tensor
from .transport import SinkhornConfig, SinkhornSolution, solve_sinkhorn

logger = logging.getLogger(__name__)

CloudTensor = Union[Tensor, PointCloud, np.ndarray]

RECONSTRUCTION_TERMS = ("sinkhorn", "chamfer")


@dataclass
class LossWeights(ConfigRecord):
    rec: float = 1.0
    uni: float = 0.001
    rep: float = 0.005

    def __post_init__(self):
        for name in ("rec", "uni", "rep"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be nonnegative, got {getattr(self, name)}")


@dataclass
class LossConfig(ConfigRecord):
    weights: LossWeights = field(default_factory=LossWeights)
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    reconstruction: str = "sinkhorn"
    repulsion_k: int = 4
    repulsion_h: float = 0.03
    uniform_p: float = 0.01
    # None: sqrt(uniform_p)
    uniform_radius: Optional[float] = None
    # None: max(8, N // 50)
    uniform_seeds: Optional[int] = None

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights.from_dict(self.weights)
        if isinstance(self.sinkhorn, dict):
            self.sinkhorn = SinkhornConfig.from_dict(self.sinkhorn)
        if self.reconstruction not in RECONSTRUCTION_TERMS:
            raise ConfigError(
                f"Unknown reconstruction loss: {self.reconstruction}. Use one of {RECONSTRUCTION_TERMS}"
            )
        if not 0.0 < self.uniform_p < 1.0:
            raise ConfigError(f"uniform_p must be in (0, 1), got {self.uniform_p}")
        if self.repulsion_h <= 0:
            raise ConfigError(f"repulsion_h must be positive, got {self.repulsion_h}")


@dataclass
class LossTerms:
    """Weighted total plus the unweighted component values."""

    total: Tensor
    rec: float
    uni: float
    rep: float
    converged: bool = True

    def as_row(self) -> dict:
        return {
            "loss": self.total.item(),
            "rec": self.rec,
            "uni": self.uni,
            "rep": self.rep,
            "converged": self.converged,
        }


def _as_tensor(cloud: CloudTensor) -> Tensor:
    if isinstance(cloud, Tensor):
        return cloud
    if isinstance(cloud, PointCloud):
        return Tensor(cloud.points)
    return Tensor(np.asarray(cloud, dtype=np.float64))


# ============================================================================
# Sinkhorn reconstruction
# ============================================================================

class SinkhornValue(Function):
    """
    Entropic OT value as a function of both point sets.

    The backward pass uses the converged plan (envelope theorem): for the
    cost 0.5 * |x - y|^2, dOT/dx_i = sum_j plan_ij (x_i - y_j).
    """

    @staticmethod
    def forward(ctx, x, y, solution: SinkhornSolution = None):
        ctx.save_for_backward(x, y, solution.plan)
        return np.asarray(solution.value)

    @staticmethod
    def backward(ctx, grad):
        x, y, plan = ctx.saved
        gx = plan.sum(axis=1)[:, None] * x - plan @ y
        gy = plan.sum(axis=0)[:, None] * y - plan.T @ x
        return grad * gx, grad * gy


def _solve_canonical(x: np.ndarray, y: np.ndarray, cfg: SinkhornConfig) -> SinkhornSolution:
    """Solve with the arguments in a fixed order so OT(x, y) and OT(y, x) agree bit for bit."""
    swap = (len(x), x.tobytes()) > (len(y), y.tobytes())
    if not swap:
        return solve_sinkhorn(x, y, "sqeuclidean", cfg)
    sol = solve_sinkhorn(y, x, "sqeuclidean", cfg)
    return SinkhornSolution(f=sol.g, g=sol.f, plan=sol.plan.T, value=sol.value,
                            transport_cost=sol.transport_cost, converged=sol.converged,
                            iterations=sol.iterations, errors=sol.errors)


def sinkhorn_ot(a: CloudTensor, b: CloudTensor, cfg: Optional[SinkhornConfig] = None) -> Tuple[Tensor, bool]:
    """
    Entropic OT value between uniform measures on a and b, cost 0.5*|x-y|^2.

    Returns:
        (value, converged); the value is differentiable w.r.t. both clouds
    """
    cfg = cfg or SinkhornConfig()
    ta, tb = _as_tensor(a), _as_tensor(b)
    solution = _solve_canonical(ta.data, tb.data, cfg)
    return SinkhornValue.apply(ta, tb, solution=solution), solution.converged


def sinkhorn_divergence(y: CloudTensor, yp: CloudTensor,
                        cfg: Optional[SinkhornConfig] = None) -> Tuple[Tensor, bool]:
    """S = OT(Y, Y') - OT(Y, Y)/2 - OT(Y', Y')/2, with the joint convergence flag."""
    ty, typ = _as_tensor(y), _as_tensor(yp)
    cross, ok_cross = sinkhorn_ot(ty, typ, cfg)
    self_y, ok_y = sinkhorn_ot(ty, ty, cfg)
    self_p, ok_p = sinkhorn_ot(typ, typ, cfg)
    value = T.sub(T.sub(cross, T.scale(self_y, 0.5)), T.scale(self_p, 0.5))
    return value, ok_cross and ok_y and ok_p


def chamfer_loss(y: CloudTensor, yp: CloudTensor) -> Tensor:
    """Differentiable Chamfer distance (mean squared nearest distances, both directions)."""
    ty, typ = _as_tensor(y), _as_tensor(yp)
    _, nn_of_pred = nearest_neighbor_distances(typ.data, ty.data)
    _, nn_of_gt = nearest_neighbor_distances(ty.data, typ.data)
    forward = T.sub(typ, T.gather_rows(ty, nn_of_pred))
    backward = T.sub(ty, T.gather_rows(typ, nn_of_gt))
    return T.add(T.reduce(T.reduce(T.square(forward), axis=1), mode="mean"),
                 T.reduce(T.reduce(T.square(backward), axis=1), mode="mean"))


# ============================================================================
# Repulsion and uniformity
# ============================================================================

def repulsion_loss(yp: CloudTensor, k: int = 4, h: float = 0.03) -> Tensor:
    """
    sum_i sum_{i' in kNN(i)} -r * exp(-r^2 / h^2) with r = |p_i' - p_i|.

    The neighbourhoods are computed on the current coordinates and held
    fixed for differentiation.
    """
    if h <= 0:
        raise ConfigError(f"repulsion bandwidth h must be positive, got {h}")
    p = _as_tensor(yp)
    n = p.shape[0]
    graph = build_knn(p.data, k)
    neighbors = T.group_gather(p, graph.neighbors)
    diff = T.sub(neighbors, T.reshape(p, (n, 1, 3)))
    sq = T.reduce(T.square(diff), axis=2)
    r = T.sqrt(sq)
    w = T.exp(T.scale(sq, -1.0 / (h * h)))
    return T.Neg.apply(T.reduce(T.mul(r, w)))


def uniform_loss(yp: CloudTensor, n_seeds: Optional[int] = None, radius: Optional[float] = None,
                 p: float = 0.01) -> Tensor:
    """
    Ball-subset uniformity term.

    Seeds are farthest-point samples; each ball of radius r_d contributes
    its count imbalance (treated as a constant weight) times the clutter of
    nearest-neighbour distances inside the ball. Balls holding fewer than
    two points are skipped; when all are skipped the loss is 0.
    """
    if not 0.0 < p < 1.0:
        raise ConfigError(f"uniform loss percentage must be in (0, 1), got {p}")
    t = _as_tensor(yp)
    pts = t.data
    n = len(pts)
    m = min(n_seeds if n_seeds is not None else max(8, n // 50), n)
    if m < 1:
        raise ConfigError(f"uniform loss needs at least one seed, got {m}")
    r_d = float(radius) if radius is not None else float(np.sqrt(p))
    n_hat = n * r_d * r_d

    src, dst, dhat, weight = [], [], [], []
    for seed in farthest_point_sample(pts, m, seed_index=0):
        subset = ball_query(pts, pts[seed], r_d)
        size = len(subset)
        if size < 2:
            continue
        imbalance = (size - n_hat) ** 2 / n_hat
        d_hat = np.sqrt(2.0 * np.pi * r_d * r_d / (size * np.sqrt(3.0)))
        local = cdist(pts[subset], pts[subset], "sqeuclidean")
        np.fill_diagonal(local, np.inf)
        nearest = subset[np.argmin(local, axis=1)]
        src.append(subset)
        dst.append(nearest)
        dhat.append(np.full(size, d_hat))
        weight.append(np.full(size, imbalance / d_hat))

    if not src:
        return Tensor(0.0)
    src, dst = np.concatenate(src), np.concatenate(dst)
    dhat, weight = np.concatenate(dhat), np.concatenate(weight)
    d = T.sqrt(T.reduce(T.square(T.sub(T.gather_rows(t, src), T.gather_rows(t, dst))), axis=1))
    return T.reduce(T.mul(T.square(T.sub(d, dhat)), weight))


# ============================================================================
# Compound objective
# ============================================================================

def compound_loss(y: CloudTensor, yp: CloudTensor, cfg: Optional[LossConfig] = None) -> LossTerms:
    """
    lambda_rec * reconstruction + lambda_uni * uniform + lambda_rep * repulsion.

    Terms with zero weight are not evaluated.
    """
    cfg = cfg or LossConfig()
    w = cfg.weights
    typ = _as_tensor(yp)
    parts = []
    rec = uni = rep = 0.0
    converged = True

    if w.rec > 0:
        if cfg.reconstruction == "sinkhorn":
            rec_t, converged = sinkhorn_divergence(y, typ, cfg.sinkhorn)
        else:
            rec_t = chamfer_loss(y, typ)
        rec = rec_t.item()
        parts.append(T.scale(rec_t, w.rec))
    if w.uni > 0:
        uni_t = uniform_loss(typ, cfg.uniform_seeds, cfg.uniform_radius, cfg.uniform_p)
        uni = uni_t.item()
        parts.append(T.scale(uni_t, w.uni))
    if w.rep > 0:
        rep_t = repulsion_loss(typ, cfg.repulsion_k, cfg.repulsion_h)
        rep = rep_t.item()
        parts.append(T.scale(rep_t, w.rep))

    total = T.total(parts) if parts else Tensor(0.0)
    return LossTerms(total=total, rec=rec, uni=uni, rep=rep, converged=converged)
