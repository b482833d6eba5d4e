"""
Point and mesh file formats.

- XYZ: ASCII, one point per line, ``x y z`` (extra columns such as normals
  are ignored; ``#`` comments and blank lines are skipped).
- OFF and ASCII PLY triangle meshes; polygons are fan-triangulated.
"""
import logging
from pathlib import Path
from typing import Iterator, List, Tuple, Union

import numpy as np

from .errors import DataFormatError
from .geom import PointCloud, TriMesh, as_points

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# 17 significant digits round-trip float64 exactly
XYZ_FORMAT = "%.17g"


# ============================================================================
# XYZ point clouds
# ============================================================================

def read_xyz(path: PathLike) -> PointCloud:
    """
    Read an ASCII XYZ cloud.

    Raises:
        DataFormatError: on a malformed line (message carries the line number)
            or when the file holds no points
    """
    path = Path(path)
    rows: List[Tuple[float, float, float]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            fields = text.replace(",", " ").split()
            if len(fields) < 3:
                raise DataFormatError(f"expected at least 3 coordinates, got {len(fields)}", path, lineno)
            try:
                rows.append((float(fields[0]), float(fields[1]), float(fields[2])))
            except ValueError as e:
                raise DataFormatError(f"not a number: {e}", path, lineno) from e
    if not rows:
        raise DataFormatError("file contains no points", path)
    points = np.array(rows, dtype=np.float64)
    if not np.isfinite(points).all():
        raise DataFormatError("non-finite coordinate", path)
    logger.debug("read %d points from %s", len(points), path)
    return PointCloud(points, metadata={"source": str(path)})


def write_xyz(path: PathLike, cloud) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, as_points(cloud), fmt=XYZ_FORMAT, delimiter=" ")
    logger.debug("wrote %d points to %s", len(as_points(cloud)), path)
    return path


# ============================================================================
# Meshes
# ============================================================================

def _tokens(path: Path) -> Iterator[Tuple[int, List[str]]]:
    """Non-empty, comment-stripped lines as (line number, whitespace-split fields)."""
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if text:
                yield lineno, text.split()


def _fan(polygon: List[int]) -> List[Tuple[int, int, int]]:
    return [(polygon[0], polygon[i], polygon[i + 1]) for i in range(1, len(polygon) - 1)]


def _parse_face(fields: List[str], path: Path, lineno: int) -> List[Tuple[int, int, int]]:
    try:
        count = int(fields[0])
        idx = [int(v) for v in fields[1:1 + count]]
    except (ValueError, IndexError) as e:
        raise DataFormatError(f"malformed face record: {e}", path, lineno) from e
    if count < 3 or len(idx) != count:
        raise DataFormatError(f"face needs at least 3 vertex indices, got {fields}", path, lineno)
    return _fan(idx)


def _parse_vertex(fields: List[str], path: Path, lineno: int) -> Tuple[float, float, float]:
    try:
        return float(fields[0]), float(fields[1]), float(fields[2])
    except (ValueError, IndexError) as e:
        raise DataFormatError(f"malformed vertex record: {e}", path, lineno) from e


def _read_off(path: Path) -> TriMesh:
    lines = _tokens(path)
    try:
        lineno, head = next(lines)
    except StopIteration:
        raise DataFormatError("empty OFF file", path) from None
    if not head[0].upper().endswith("OFF"):
        raise DataFormatError(f"missing OFF header, got {head[0]!r}", path, lineno)
    counts = head[1:]
    if not counts:
        lineno, counts = next(lines, (lineno, []))
    try:
        n_vertices, n_faces = int(counts[0]), int(counts[1])
    except (ValueError, IndexError):
        raise DataFormatError("malformed OFF counts line", path, lineno) from None

    vertices, faces = [], []
    for lineno, fields in lines:
        if len(vertices) < n_vertices:
            vertices.append(_parse_vertex(fields, path, lineno))
        elif len(faces) < n_faces:
            faces.append(_parse_face(fields, path, lineno))
        else:
            break
    if len(vertices) < n_vertices or len(faces) < n_faces:
        raise DataFormatError(
            f"truncated OFF file: {len(vertices)}/{n_vertices} vertices, {len(faces)}/{n_faces} faces", path
        )
    triangles = [t for polygon in faces for t in polygon]
    return TriMesh(np.array(vertices), np.array(triangles, dtype=np.int64), name=path.stem)


def _read_ply(path: Path) -> TriMesh:
    lines = _tokens(path)
    elements: List[Tuple[str, int, List[List[str]]]] = []
    lineno, fields = next(lines, (0, []))
    if fields != ["ply"]:
        raise DataFormatError("missing 'ply' magic", path, lineno or None)
    for lineno, fields in lines:
        key = fields[0]
        if key == "format":
            if fields[1] != "ascii":
                raise DataFormatError(f"unsupported PLY format {fields[1]!r} (only ascii)", path, lineno)
        elif key == "element":
            elements.append((fields[1], int(fields[2]), []))
        elif key == "property":
            if not elements:
                raise DataFormatError("property before any element", path, lineno)
            elements[-1][2].append(fields[1:])
        elif key in ("comment", "obj_info"):
            continue
        elif key == "end_header":
            break
    else:
        raise DataFormatError("missing end_header", path)

    vertices, triangles = [], []
    for name, count, props in elements:
        if name == "vertex":
            names = [p[-1] for p in props]
            try:
                cols = [names.index(axis) for axis in ("x", "y", "z")]
            except ValueError:
                raise DataFormatError("vertex element lacks x/y/z properties", path) from None
            for _ in range(count):
                lineno, fields = next(lines, (None, None))
                if fields is None:
                    raise DataFormatError("truncated vertex list", path)
                vertices.append(_parse_vertex([fields[c] for c in cols if c < len(fields)], path, lineno))
        elif name == "face":
            if not props or props[0][0] != "list":
                raise DataFormatError("face element must start with a list property", path)
            for _ in range(count):
                lineno, fields = next(lines, (None, None))
                if fields is None:
                    raise DataFormatError("truncated face list", path)
                triangles.extend(_parse_face(fields, path, lineno))
        else:
            raise DataFormatError(f"unsupported PLY element {name!r}", path)
    return TriMesh(np.array(vertices), np.array(triangles, dtype=np.int64), name=path.stem)


def read_mesh(path: PathLike) -> TriMesh:
    """
    Load an OFF or ASCII PLY triangle mesh (chosen by extension).

    Raises:
        DataFormatError: unsupported format/element or malformed content
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".off":
        mesh = _read_off(path)
    elif suffix == ".ply":
        mesh = _read_ply(path)
    else:
        raise DataFormatError(f"unsupported mesh format {suffix!r}; use .off or .ply", path)
    logger.debug("read mesh %s: %d vertices, %d triangles", path, len(mesh.vertices), len(mesh.faces))
    return mesh


def write_mesh_off(path: PathLike, mesh: TriMesh) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("OFF\n")
        fh.write(f"{len(mesh.vertices)} {len(mesh.faces)} 0\n")
        np.savetxt(fh, mesh.vertices, fmt=XYZ_FORMAT, delimiter=" ")
        np.savetxt(fh, np.column_stack([np.full(len(mesh.faces), 3), mesh.faces]), fmt="%d", delimiter=" ")
    logger.debug("wrote mesh %s", path)
    return path


def list_meshes(directory: PathLike) -> List[Path]:
    """OFF/PLY files of a directory, sorted by name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataFormatError("mesh directory does not exist", directory)
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in (".off", ".ply"))
