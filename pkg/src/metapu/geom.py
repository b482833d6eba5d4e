"""
Geometric primitives: point clouds, triangle meshes, neighbourhood queries,
farthest point sampling, surface sampling and point-to-triangle distance.

All functions are pure and work on float64 arrays. Wherever a spatial index
is used (``scipy.spatial.cKDTree``) the results are post-processed so they
equal the brute-force answer, including the lower-index tie rule.
"""
import logging
from dataclasses import dataclass, field
from typing import Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, DataFormatError, NumericError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class PointCloud:
    """Ordered 3-D points plus free-form provenance metadata."""

    points: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ShapeError(f"point cloud must have shape (n, 3), got {self.points.shape}")
        if len(self.points) < 1:
            raise ShapeError("point cloud must hold at least one point")
        if not np.isfinite(self.points).all():
            raise NumericError("point cloud contains non-finite coordinates")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def n(self) -> int:
        return len(self.points)


@dataclass
class TriMesh:
    """Indexed triangle mesh with precomputed per-face areas."""

    vertices: np.ndarray
    faces: np.ndarray
    areas: np.ndarray = None
    name: str = ""

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise DataFormatError(
                f"mesh face index out of range for {len(self.vertices)} vertices"
            )
        a, b, c = self.corners()
        self.areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def corners(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        tri = self.vertices[self.faces]
        return tri[:, 0], tri[:, 1], tri[:, 2]

    @property
    def total_area(self) -> float:
        return float(self.areas.sum())

    def require_nonempty(self):
        if len(self.faces) == 0 or self.total_area <= 0.0:
            raise DataFormatError(f"mesh {self.name or '<unnamed>'} is empty (no faces with positive area)")


@dataclass
class KnnGraph:
    """k nearest distinct neighbours of every point, nearest first."""

    k: int
    neighbors: np.ndarray


CloudLike = Union[PointCloud, np.ndarray]


def as_points(cloud: CloudLike) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError(f"expected points of shape (n, 3), got {pts.shape}")
    return pts


def squared_distances(points: np.ndarray, center: np.ndarray) -> np.ndarray:
    diff = points - center
    return (diff * diff).sum(axis=-1)


# ============================================================================
# Neighbourhoods
# ============================================================================

def build_knn(cloud: CloudLike, k: int) -> KnnGraph:
    """
    Exact k nearest neighbours (self excluded), ties broken by lower index.

    A kd-tree proposes a few extra candidates per point; rows whose farthest
    candidate ties with the k-th neighbour are resolved by brute force.

    Raises:
        ConfigError: if k < 1 or k >= number of points
    """
    pts = as_points(cloud)
    n = len(pts)
    if k < 1 or k >= n:
        raise ConfigError(f"k-NN needs 1 <= k < n, got k={k} for n={n}")

    m = min(n, k + 5)
    _, cand = cKDTree(pts).query(pts, k=m)
    cand = np.asarray(cand, dtype=np.int64).reshape(n, m)
    diff = pts[cand] - pts[:, None, :]
    d = (diff * diff).sum(axis=-1)
    rows = np.arange(n)
    d[cand == rows[:, None]] = np.inf

    order = np.lexsort((cand, d), axis=-1)
    cand_sorted = np.take_along_axis(cand, order, axis=1)
    d_sorted = np.take_along_axis(d, order, axis=1)
    neighbors = cand_sorted[:, :k].copy()

    if m < n:
        kth = d_sorted[:, k - 1]
        farthest = np.where(np.isinf(d), -np.inf, d).max(axis=1)
        self_missing = ~(cand == rows[:, None]).any(axis=1)
        unresolved = np.flatnonzero((farthest <= kth * (1.0 + 1e-12)) | self_missing)
        for i in unresolved:
            di = squared_distances(pts, pts[i])
            di[i] = np.inf
            neighbors[i] = np.lexsort((np.arange(n), di))[:k]
        if len(unresolved):
            logger.debug("build_knn: %d rows resolved by brute force", len(unresolved))

    return KnnGraph(k=k, neighbors=neighbors)


def ball_query(cloud: CloudLike, center: np.ndarray, r: float) -> np.ndarray:
    """Indices of all points within distance r of center, ascending."""
    if r <= 0:
        raise ConfigError(f"ball query radius must be positive, got {r}")
    pts = as_points(cloud)
    d = np.sqrt(squared_distances(pts, np.asarray(center, dtype=np.float64)))
    return np.flatnonzero(d <= r)


def nearest_neighbor_distances(a: CloudLike, b: CloudLike) -> Tuple[np.ndarray, np.ndarray]:
    """For every point of ``a``: distance to and index of its nearest point in ``b``."""
    dist, idx = cKDTree(as_points(b)).query(as_points(a), k=1)
    return np.asarray(dist), np.asarray(idx)


# ============================================================================
# Sampling
# ============================================================================

def farthest_point_sample(cloud: CloudLike, m: int, seed_index: int = 0) -> np.ndarray:
    """
    Greedy max-min selection of m distinct indices starting at seed_index.

    Ties go to the lower index (``np.argmax`` returns the first maximum).
    """
    pts = as_points(cloud)
    n = len(pts)
    if m < 1 or m > n:
        raise ConfigError(f"farthest point sampling needs 1 <= m <= n, got m={m} for n={n}")
    if not 0 <= seed_index < n:
        raise ConfigError(f"FPS seed index {seed_index} out of range for {n} points")

    selected = np.empty(m, dtype=np.int64)
    selected[0] = seed_index
    dist = squared_distances(pts, pts[seed_index])
    dist[seed_index] = -1.0
    for i in range(1, m):
        nxt = int(np.argmax(dist))
        selected[i] = nxt
        # selected points stay at -1 under the running minimum
        np.minimum(dist, squared_distances(pts, pts[nxt]), out=dist)
        dist[nxt] = -1.0
    return selected


def blue_noise_downsample(cloud: CloudLike, m: int) -> PointCloud:
    """Keep m well-spaced points via farthest point sampling from index 0."""
    pts = as_points(cloud)
    idx = farthest_point_sample(pts, m, seed_index=0)
    meta = dict(cloud.metadata) if isinstance(cloud, PointCloud) else {}
    return PointCloud(pts[idx], metadata=meta)


def sample_mesh_surface(mesh: TriMesh, m: int, rng: np.random.Generator) -> PointCloud:
    """Uniform-by-area surface samples with uniform barycentric placement."""
    if m < 1:
        raise ConfigError(f"number of surface samples must be >= 1, got {m}")
    mesh.require_nonempty()
    probs = mesh.areas / mesh.areas.sum()
    face = rng.choice(len(mesh.faces), size=m, p=probs)
    r1 = rng.random(m)
    r2 = rng.random(m)
    s = np.sqrt(r1)
    u = 1.0 - s
    v = s * (1.0 - r2)
    w = s * r2
    a, b, c = mesh.corners()
    points = u[:, None] * a[face] + v[:, None] * b[face] + w[:, None] * c[face]
    return PointCloud(points, metadata={"source": mesh.name, "face_index": face})


def blue_noise_sample(mesh: TriMesh, m: int, rng: np.random.Generator,
                      dense_factor: int = 30) -> PointCloud:
    """Approximate Poisson-disk surface sampling: dense uniform samples, then FPS."""
    dense = sample_mesh_surface(mesh, m * dense_factor, rng)
    out = blue_noise_downsample(dense.points, m)
    out.metadata["source"] = mesh.name
    return out


# ============================================================================
# Normalization
# ============================================================================

def normalize_unit_sphere(cloud: CloudLike) -> Tuple[PointCloud, np.ndarray, float]:
    """
    Center on the centroid and scale so the farthest point has norm 1.

    A cloud whose points all coincide maps to the origin with radius 1.
    """
    pts = as_points(cloud)
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    radius = float(np.sqrt((centered * centered).sum(axis=1)).max())
    if radius <= 0.0:
        radius = 1.0
        centered = np.zeros_like(pts)
    meta = dict(cloud.metadata) if isinstance(cloud, PointCloud) else {}
    return PointCloud(centered / radius, metadata=meta), centroid, radius


def denormalize(cloud: CloudLike, centroid: np.ndarray, radius: float) -> PointCloud:
    pts = as_points(cloud)
    meta = dict(cloud.metadata) if isinstance(cloud, PointCloud) else {}
    return PointCloud(pts * radius + np.asarray(centroid, dtype=np.float64), metadata=meta)


def bbox_diagonal(cloud: CloudLike) -> float:
    pts = as_points(cloud)
    return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


# ============================================================================
# Point to triangle distance
# ============================================================================

def closest_points_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """
    Closest point on each closed triangle (a[i], b[i], c[i]) to p[i].

    Vectorized form of the Voronoi-region walk: vertex regions, then edge
    regions, then the interior. Arrays broadcast against each other.
    """
    p, a, b, c = np.broadcast_arrays(p, a, b, c)
    ab = b - a
    ac = c - a
    ap = p - a
    bp = p - b
    cp = p - c

    def dot(x, y):
        return (x * y).sum(axis=-1)

    d1, d2 = dot(ab, ap), dot(ac, ap)
    d3, d4 = dot(ab, bp), dot(ac, bp)
    d5, d6 = dot(ab, cp), dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v_in = vb / denom
        w_in = vc / denom
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))

    # assigned from lowest to highest priority; later writes win
    result = a + ab * v_in[..., None] + ac * w_in[..., None]
    in_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
    result = np.where(in_bc[..., None], b + (c - b) * t_bc[..., None], result)
    in_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    result = np.where(in_ac[..., None], a + ac * t_ac[..., None], result)
    in_c = (d6 >= 0) & (d5 <= d6)
    result = np.where(in_c[..., None], c, result)
    in_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    result = np.where(in_ab[..., None], a + ab * t_ab[..., None], result)
    in_b = (d3 >= 0) & (d4 <= d3)
    result = np.where(in_b[..., None], b, result)
    in_a = (d1 <= 0) & (d2 <= 0)
    result = np.where(in_a[..., None], a, result)
    return result


def point_triangle_distance(p: np.ndarray, tri: np.ndarray) -> float:
    """
    Exact Euclidean distance from point p to the closed triangle tri (3 x 3).

    Raises:
        ConfigError: if the triangle is degenerate
    """
    tri = np.asarray(tri, dtype=np.float64).reshape(3, 3)
    a, b, c = tri
    scale = max(np.dot(b - a, b - a), np.dot(c - a, c - a), np.dot(c - b, c - b))
    if scale == 0.0 or np.linalg.norm(np.cross(b - a, c - a)) <= 1e-12 * scale:
        raise ConfigError("point_triangle_distance: degenerate triangle")
    p = np.asarray(p, dtype=np.float64)
    closest = closest_points_on_triangles(p[None, :], a[None, :], b[None, :], c[None, :])[0]
    return float(np.linalg.norm(p - closest))
