"""
Built-in parametric meshes so datasets can be generated without external files.

Every generator returns a closed or open ``TriMesh`` free of degenerate
triangles; ``resolution`` controls the tessellation density.
"""
import logging
from typing import Callable, Dict

import numpy as np

from .errors import ConfigError
from .geom import TriMesh

logger = logging.getLogger(__name__)


def _grid_faces(rows: int, cols: int, wrap_cols: bool, wrap_rows: bool = False) -> np.ndarray:
    """Two triangles per cell of a rows x cols vertex grid, optionally periodic."""
    faces = []
    row_cells = rows if wrap_rows else rows - 1
    col_cells = cols if wrap_cols else cols - 1
    for i in range(row_cells):
        i2 = (i + 1) % rows
        for j in range(col_cells):
            j2 = (j + 1) % cols
            a, b = i * cols + j, i * cols + j2
            c, d = i2 * cols + j, i2 * cols + j2
            faces.append((a, c, b))
            faces.append((b, c, d))
    return np.array(faces, dtype=np.int64)


def make_sphere(resolution: int = 24, radius: float = 1.0) -> TriMesh:
    n_lat = max(resolution // 2, 3)
    n_lon = max(resolution, 4)
    theta = np.linspace(0.0, np.pi, n_lat + 1)[1:-1]
    phi = np.linspace(0.0, 2.0 * np.pi, n_lon, endpoint=False)
    t, p = np.meshgrid(theta, phi, indexing="ij")
    ring = np.column_stack([np.sin(t).ravel() * np.cos(p).ravel(),
                            np.sin(t).ravel() * np.sin(p).ravel(),
                            np.cos(t).ravel()]) * radius
    top = len(ring)
    bottom = top + 1
    vertices = np.vstack([ring, [[0.0, 0.0, radius]], [[0.0, 0.0, -radius]]])

    faces = [_grid_faces(len(theta), n_lon, wrap_cols=True)]
    last = (len(theta) - 1) * n_lon
    caps = []
    for j in range(n_lon):
        j2 = (j + 1) % n_lon
        caps.append((top, j, j2))
        caps.append((bottom, last + j2, last + j))
    faces.append(np.array(caps, dtype=np.int64))
    return TriMesh(vertices, np.vstack(faces), name="sphere")


def make_torus(resolution: int = 24, major: float = 1.0, minor: float = 0.35) -> TriMesh:
    n_u = max(resolution, 6)
    n_v = max(resolution // 2, 4)
    u = np.linspace(0.0, 2.0 * np.pi, n_u, endpoint=False)
    v = np.linspace(0.0, 2.0 * np.pi, n_v, endpoint=False)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    x = (major + minor * np.cos(vv)) * np.cos(uu)
    y = (major + minor * np.cos(vv)) * np.sin(uu)
    z = minor * np.sin(vv)
    vertices = np.column_stack([x.ravel(), y.ravel(), z.ravel()])
    return TriMesh(vertices, _grid_faces(n_u, n_v, wrap_cols=True, wrap_rows=True), name="torus")


def make_relief_plane(resolution: int = 24, amplitude: float = 0.15, waves: float = 2.0) -> TriMesh:
    n = max(resolution, 4)
    s = np.linspace(-1.0, 1.0, n)
    xx, yy = np.meshgrid(s, s, indexing="ij")
    zz = amplitude * np.sin(waves * np.pi * xx) * np.cos(waves * np.pi * yy)
    vertices = np.column_stack([xx.ravel(), yy.ravel(), zz.ravel()])
    return TriMesh(vertices, _grid_faces(n, n, wrap_cols=False), name="relief")


def make_cylinder(resolution: int = 24, radius: float = 0.5, height: float = 2.0) -> TriMesh:
    n_around = max(resolution, 6)
    n_up = max(resolution // 2, 2)
    a = np.linspace(0.0, 2.0 * np.pi, n_around, endpoint=False)
    h = np.linspace(-height / 2.0, height / 2.0, n_up)
    hh, aa = np.meshgrid(h, a, indexing="ij")
    side = np.column_stack([radius * np.cos(aa).ravel(), radius * np.sin(aa).ravel(), hh.ravel()])
    bottom_center = len(side)
    top_center = bottom_center + 1
    vertices = np.vstack([side, [[0.0, 0.0, -height / 2.0]], [[0.0, 0.0, height / 2.0]]])

    faces = [_grid_faces(n_up, n_around, wrap_cols=True)]
    last = (n_up - 1) * n_around
    caps = []
    for j in range(n_around):
        j2 = (j + 1) % n_around
        caps.append((bottom_center, j2, j))
        caps.append((top_center, last + j, last + j2))
    faces.append(np.array(caps, dtype=np.int64))
    return TriMesh(vertices, np.vstack(faces), name="cylinder")


BUILTIN_SHAPES: Dict[str, Callable[..., TriMesh]] = {
    "sphere": make_sphere,
    "torus": make_torus,
    "relief": make_relief_plane,
    "cylinder": make_cylinder,
}


def builtin_mesh(name: str, resolution: int = 24) -> TriMesh:
    """
    Build one of the parametric meshes by name.

    Raises:
        ConfigError: if the name is unknown
    """
    if name not in BUILTIN_SHAPES:
        raise ConfigError(f"Unknown builtin shape: {name}. Use one of {sorted(BUILTIN_SHAPES)}")
    mesh = BUILTIN_SHAPES[name](resolution)
    logger.debug("built %s: %d vertices, %d faces", name, len(mesh.vertices), len(mesh.faces))
    return mesh
