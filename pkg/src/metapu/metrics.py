"""
Evaluation metrics for upsampled clouds.

Cloud-to-cloud: Chamfer distance, EMD (exact assignment or entropic
approximation) and F-score. Cloud-to-mesh: normalized uniformity coefficient
(NUC) over equal-area disks and point-to-surface deviation statistics.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from .config import Config, ConfigRecord
from .errors import ConfigError, ShapeError
from .geom import (
    CloudLike,
    TriMesh,
    as_points,
    bbox_diagonal,
    closest_points_on_triangles,
    nearest_neighbor_distances,
    sample_mesh_surface,
)
from .transport import SinkhornConfig, exact_assignment_cost, solve_sinkhorn

logger = logging.getLogger(__name__)


@dataclass
class MetricConfig(ConfigRecord):
    fscore_tau_fraction: float = Config.FSCORE_TAU_FRACTION
    nuc_percentages: List[float] = field(default_factory=lambda: list(Config.NUC_PERCENTAGES))
    nuc_seeds: int = Config.NUC_SEEDS
    nuc_mesh_tolerance: float = Config.NUC_MESH_TOLERANCE
    emd_exact_max_points: int = Config.EMD_EXACT_MAX_POINTS
    # Larger clouds are randomly subsampled to this size before the entropic EMD
    emd_approx_max_points: int = 2048
    sinkhorn: SinkhornConfig = field(default_factory=lambda: SinkhornConfig(epsilon=1e-3, max_iters=500))
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.sinkhorn, dict):
            self.sinkhorn = SinkhornConfig.from_dict(self.sinkhorn)
        if not self.fscore_tau_fraction > 0:
            raise ConfigError(f"fscore_tau_fraction must be positive, got {self.fscore_tau_fraction}")
        for p in self.nuc_percentages:
            if not 0.0 < p < 1.0:
                raise ConfigError(f"NUC percentage must be in (0, 1), got {p}")
        if Config.nuc_key(0.008) not in [Config.nuc_key(p) for p in self.nuc_percentages]:
            self.nuc_percentages = sorted(set(self.nuc_percentages) | {0.008})
        if self.nuc_seeds < 2:
            raise ConfigError(f"nuc_seeds must be >= 2, got {self.nuc_seeds}")


@dataclass
class MetricReport:
    """Metrics of one upsampled shape against its ground truth (and mesh, when known)."""

    shape_id: str
    scale: float
    cd: float
    emd: float
    fscore: float
    # "model" or the name of a baseline
    method: str = "model"
    emd_method: str = "exact"
    nuc: Dict[str, float] = field(default_factory=dict)
    deviation_mean: Optional[float] = None
    deviation_std: Optional[float] = None
    seconds: Optional[float] = None
    flags: List[str] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        out = {
            "shape_id": self.shape_id,
            "method": self.method,
            "scale": self.scale,
            "cd": self.cd,
            "emd": self.emd,
            "emd_method": self.emd_method,
            "fscore": self.fscore,
        }
        out.update(self.nuc)
        if self.deviation_mean is not None:
            out["dev_mean"] = self.deviation_mean
            out["dev_std"] = self.deviation_std
        if self.seconds is not None:
            out["seconds"] = self.seconds
        out["flags"] = list(self.flags)
        return out


# ============================================================================
# Cloud to cloud
# ============================================================================

def chamfer(a: CloudLike, b: CloudLike) -> float:
    """Mean squared nearest-neighbour distance, summed over both directions."""
    da, _ = nearest_neighbor_distances(a, b)
    db, _ = nearest_neighbor_distances(b, a)
    return float((da * da).mean() + (db * db).mean())


def emd_exact(a: CloudLike, b: CloudLike, max_points: int = Config.EMD_EXACT_MAX_POINTS) -> float:
    """
    Minimum mean Euclidean distance over bijections.

    Raises:
        ShapeError: sizes differ
        ConfigError: more than ``max_points`` points
    """
    pa, pb = as_points(a), as_points(b)
    if len(pa) != len(pb):
        raise ShapeError(f"exact EMD needs equal sizes, got {len(pa)} and {len(pb)}")
    if len(pa) > max_points:
        raise ConfigError(f"exact EMD limited to {max_points} points, got {len(pa)}; use emd_approx")
    return exact_assignment_cost(pa, pb, "euclidean")


def emd_approx(a: CloudLike, b: CloudLike, cfg: Optional[SinkhornConfig] = None) -> Tuple[float, bool]:
    """Entropic OT transport cost with Euclidean ground cost, plus the convergence flag."""
    sol = solve_sinkhorn(a, b, cost="euclidean", cfg=cfg or SinkhornConfig())
    return max(sol.transport_cost, 0.0), sol.converged


def fscore(yp: CloudLike, y: CloudLike, tau: Optional[float] = None) -> float:
    """
    Harmonic mean of precision (Yp near Y) and recall (Y near Yp) at threshold tau.

    tau defaults to 1% of the ground-truth bounding-box diagonal.
    """
    if tau is None:
        tau = Config.FSCORE_TAU_FRACTION * bbox_diagonal(y)
    if not tau > 0:
        raise ConfigError(f"F-score threshold must be positive, got {tau}")
    d_pred, _ = nearest_neighbor_distances(yp, y)
    d_gt, _ = nearest_neighbor_distances(y, yp)
    precision = float((d_pred <= tau).mean())
    recall = float((d_gt <= tau).mean())
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


# ============================================================================
# Cloud to mesh
# ============================================================================

def point_mesh_distances(points: CloudLike, mesh: TriMesh) -> np.ndarray:
    """
    Exact distance from every point to the nearest triangle.

    Triangles are indexed by centroid in a kd-tree. The nearest-centroid
    triangle gives an upper bound d0; only triangles whose bounding sphere
    reaches within d0 can be closer, and those are checked exactly.
    """
    mesh.require_nonempty()
    pts = as_points(points)
    keep = mesh.areas > 0.0
    a, b, c = (corner[keep] for corner in mesh.corners())
    centroids = (a + b + c) / 3.0
    radii = np.max(np.stack([np.linalg.norm(v - centroids, axis=1) for v in (a, b, c)]), axis=0)
    tree = cKDTree(centroids)

    _, nearest = tree.query(pts, k=1)
    upper = np.linalg.norm(pts - closest_points_on_triangles(pts, a[nearest], b[nearest], c[nearest]), axis=1)
    candidates = tree.query_ball_point(pts, upper + radii.max() + 1e-12)

    counts = np.fromiter((len(cand) for cand in candidates), dtype=np.int64, count=len(pts))
    owner = np.repeat(np.arange(len(pts)), counts)
    faces = np.concatenate([np.asarray(cand, dtype=np.int64) for cand in candidates]) if len(owner) else \
        np.zeros(0, dtype=np.int64)
    d = np.linalg.norm(pts[owner] - closest_points_on_triangles(pts[owner], a[faces], b[faces], c[faces]), axis=1)
    best = upper.copy()
    np.minimum.at(best, owner, d)
    return best


def deviation_stats(yp: CloudLike, mesh: TriMesh) -> Tuple[float, float]:
    """Mean and population standard deviation of point-to-surface distances."""
    d = point_mesh_distances(yp, mesh)
    return float(d.mean()), float(d.std())


def nuc(yp: CloudLike, mesh: TriMesh, p: float = 0.008, n_seeds: int = Config.NUC_SEEDS,
        rng: Optional[np.random.Generator] = None,
        mesh_tolerance: float = Config.NUC_MESH_TOLERANCE,
        distances: Optional[np.ndarray] = None) -> float:
    """
    Normalized uniformity coefficient for disks covering a fraction p of the surface.

    Seeds are drawn uniformly on the mesh. A disk is the Euclidean ball of
    radius sqrt(p * area / pi) around a seed, restricted to points within
    ``mesh_tolerance`` times the mesh diagonal of the surface. Returns the
    population standard deviation of count / (N * p) over the seeds.
    ``distances`` may pass precomputed point-to-mesh distances.
    """
    if not 0.0 < p < 1.0:
        raise ConfigError(f"NUC disk fraction must be in (0, 1), got {p}")
    if n_seeds < 2:
        raise ConfigError(f"NUC needs at least 2 seeds, got {n_seeds}")
    mesh.require_nonempty()
    pts = as_points(yp)
    rng = rng if rng is not None else np.random.default_rng(0)
    if distances is None:
        distances = point_mesh_distances(pts, mesh)
    proximal = pts[distances <= mesh_tolerance * bbox_diagonal(mesh.vertices)]

    seeds = sample_mesh_surface(mesh, n_seeds, rng).points
    radius = math.sqrt(p * mesh.total_area / math.pi)
    if len(proximal):
        counts = np.array([len(c) for c in cKDTree(proximal).query_ball_point(seeds, radius)], dtype=np.float64)
    else:
        counts = np.zeros(n_seeds)
    ratios = counts / (len(pts) * p)
    return float(ratios.std())


# ============================================================================
# Per-shape evaluation and aggregation
# ============================================================================

def _emd_for_report(yp: np.ndarray, y: np.ndarray, cfg: MetricConfig,
                    rng: np.random.Generator) -> Tuple[float, str, bool]:
    if len(yp) == len(y) and len(yp) <= cfg.emd_exact_max_points:
        return emd_exact(yp, y, cfg.emd_exact_max_points), "exact", True
    cap = cfg.emd_approx_max_points
    if len(yp) > cap:
        yp = yp[np.sort(rng.choice(len(yp), size=cap, replace=False))]
    if len(y) > cap:
        y = y[np.sort(rng.choice(len(y), size=cap, replace=False))]
    value, converged = emd_approx(yp, y, cfg.sinkhorn)
    return value, "sinkhorn", converged


def evaluate_shape(yp: CloudLike, y: CloudLike, shape_id: str, scale: float,
                   mesh: Optional[TriMesh] = None, cfg: Optional[MetricConfig] = None,
                   seconds: Optional[float] = None) -> MetricReport:
    """All metrics of one prediction; NUC and deviation only when a mesh is given."""
    cfg = cfg or MetricConfig()
    pred, gt = as_points(yp), as_points(y)
    rng = np.random.default_rng(cfg.seed)

    emd, method, converged = _emd_for_report(pred, gt, cfg, rng)
    report = MetricReport(
        shape_id=shape_id,
        scale=float(scale),
        cd=chamfer(pred, gt),
        emd=emd,
        emd_method=method,
        fscore=fscore(pred, gt, cfg.fscore_tau_fraction * bbox_diagonal(gt)),
        seconds=seconds,
    )
    if not converged:
        report.flags.append("emd_not_converged")

    if mesh is not None:
        distances = point_mesh_distances(pred, mesh)
        report.deviation_mean = float(distances.mean())
        report.deviation_std = float(distances.std())
        for p in cfg.nuc_percentages:
            report.nuc[Config.nuc_key(p)] = nuc(
                pred, mesh, p, cfg.nuc_seeds, np.random.default_rng(cfg.seed),
                cfg.nuc_mesh_tolerance, distances=distances,
            )
    logger.debug("evaluated %s at R=%s: cd=%.6g emd=%.6g (%s) fscore=%.4f",
                 shape_id, scale, report.cd, report.emd, method, report.fscore)
    return report


def reports_frame(reports: Sequence[MetricReport]) -> pd.DataFrame:
    rows = []
    for r in reports:
        row = r.to_json_dict()
        row["flags"] = ",".join(r.flags)
        rows.append(row)
    return pd.DataFrame(rows)


def aggregate(reports: Sequence[MetricReport]) -> pd.DataFrame:
    """Means of every numeric metric per (method, scale), scales ascending."""
    df = reports_frame(reports)
    if df.empty:
        return df
    numeric = [c for c in df.columns if c not in ("shape_id", "method", "emd_method", "flags", "scale")]
    grouped = df.groupby(["method", "scale"], sort=True)
    out = grouped[numeric].mean(numeric_only=True)
    out["shapes"] = grouped.size()
    return out.reset_index()
