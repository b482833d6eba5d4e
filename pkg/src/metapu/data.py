"""
Dataset construction and augmentation.

A dataset is a directory of XYZ files plus ``manifest.json``:

- ``patch`` records: dense, unit-normalized surface patches (the n_dense
  nearest surface samples around an FPS seed). Training pairs are drawn
  from them on the fly at the batch's scale factor.
- ``model`` records: a dense, unit-normalized sample of a whole test model,
  used for whole-shape evaluation with the scale-dependent input sizes.

Training pairs are (input, target): the target is a blue-noise subset of a
dense patch, the input a non-uniform subset of the target.
"""
import json
import logging
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .config import Config, ConfigRecord
from .errors import ConfigError, DataFormatError
from .fileio import read_mesh, read_xyz, write_xyz
from .geom import (
    PointCloud,
    TriMesh,
    as_points,
    blue_noise_downsample,
    farthest_point_sample,
    normalize_unit_sphere,
    sample_mesh_surface,
)
from .net import output_count
from .shapes import BUILTIN_SHAPES, builtin_mesh

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
# Declared scheme for drawing non-uniform inputs from targets
INPUT_SAMPLING = "exponential_anchor"
SPLITS = ("train", "test")


@dataclass
class AugmentConfig(ConfigRecord):
    """Joint rigid/scale/shift transform of a pair, and input-only jitter."""

    enabled: bool = True
    rotate: bool = True
    scale: bool = True
    shift: bool = True
    jitter: bool = True
    scale_low: float = 0.8
    scale_high: float = 1.2
    shift_range: float = 0.1
    jitter_sigma: float = 0.005
    jitter_clip: float = 0.015
    # Rare stronger perturbation of the input
    perturb_prob: float = 0.05
    perturb_sigma: float = 0.02

    def __post_init__(self):
        if not 0 < self.scale_low <= self.scale_high:
            raise ConfigError(f"augment scale range invalid: [{self.scale_low}, {self.scale_high}]")
        if not 0.0 <= self.perturb_prob <= 1.0:
            raise ConfigError(f"perturb_prob must be in [0, 1], got {self.perturb_prob}")
        if self.jitter_sigma < 0 or self.perturb_sigma < 0 or self.shift_range < 0:
            raise ConfigError("augment sigmas and shift range must be non-negative")


@dataclass
class DataConfig(ConfigRecord):
    patches_per_model: int = Config.PATCHES_PER_MODEL
    n_max: int = Config.N_MAX
    # Dense points per patch, as a multiple of n_max
    patch_dense_factor: int = Config.PATCH_DENSE_FACTOR
    test_dense_points: int = Config.TEST_DENSE_POINTS
    test_model_fraction: float = Config.TEST_MODEL_FRACTION
    test_patch_fraction: float = Config.TEST_PATCH_FRACTION
    # Scale of the exponential density used to draw non-uniform inputs
    density_sigma: float = 0.7
    builtin_resolution: int = 24
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig.from_dict(self.augment)
        if self.patches_per_model < 1:
            raise ConfigError(f"patches_per_model must be >= 1, got {self.patches_per_model}")
        if self.n_max < 2:
            raise ConfigError(f"n_max must be >= 2, got {self.n_max}")
        if self.patch_dense_factor < 2:
            raise ConfigError(f"patch_dense_factor must be >= 2, got {self.patch_dense_factor}")
        if not self.density_sigma > 0:
            raise ConfigError(f"density_sigma must be positive, got {self.density_sigma}")

    @property
    def patch_points(self) -> int:
        return self.n_max * self.patch_dense_factor


@dataclass
class TrainingPair:
    input: PointCloud
    target: PointCloud
    scale: float
    source_id: str


# ============================================================================
# Patches and pairs
# ============================================================================

def extract_patches(mesh: TriMesh, count: int, n_dense: int, rng: np.random.Generator,
                    surface_factor: int = 4) -> List[PointCloud]:
    """
    Cut ``count`` dense patches of ``n_dense`` points from the mesh surface.

    Patch centres are farthest-point seeds of a dense surface sample of
    ``surface_factor * n_dense`` points; each patch is unit-normalized and
    records its centre, centroid and radius in the metadata.
    """
    if count < 1:
        raise ConfigError(f"patch count must be >= 1, got {count}")
    if n_dense < 1:
        raise ConfigError(f"patch size must be >= 1, got {n_dense}")
    surface = sample_mesh_surface(mesh, surface_factor * n_dense, rng).points
    if count > len(surface):
        raise ConfigError(f"mesh {mesh.name!r} too small: {count} patches from {len(surface)} surface samples")

    seeds = farthest_point_sample(surface, count, seed_index=int(rng.integers(len(surface))))
    tree = cKDTree(surface)
    patches = []
    for i, seed in enumerate(seeds):
        _, idx = tree.query(surface[seed], k=n_dense)
        idx = np.sort(np.atleast_1d(idx))
        cloud, centroid, radius = normalize_unit_sphere(surface[idx])
        cloud.metadata = {
            "source": mesh.name,
            "patch": i,
            "center": surface[seed].tolist(),
            "centroid": centroid.tolist(),
            "radius": radius,
        }
        patches.append(cloud)
    logger.debug("extracted %d patches of %d points from %s", count, n_dense, mesh.name)
    return patches


def nonuniform_subset(target: np.ndarray, n: int, rng: np.random.Generator, sigma: float = 0.7) -> np.ndarray:
    """
    Indices of n target points drawn without replacement with probability
    proportional to exp(-|p - v| / sigma) for a random anchor point v.
    """
    anchor = target[rng.integers(len(target))]
    w = np.exp(-np.linalg.norm(target - anchor, axis=1) / sigma)
    return np.sort(rng.choice(len(target), size=n, replace=False, p=w / w.sum()))


def make_pair(patch_dense, scale: float, n: int, rng: np.random.Generator,
              sigma: float = 0.7, source_id: str = "") -> TrainingPair:
    """
    Pair with exactly n input and floor(scale * n) target points.

    Raises:
        ConfigError: if the dense cloud has fewer than floor(scale * n) points
    """
    dense = as_points(patch_dense)
    big_n = output_count(scale, n)
    if n < 1 or big_n > len(dense):
        raise ConfigError(
            f"cannot build a pair with n={n}, N={big_n} from {len(dense)} dense points"
        )
    target = blue_noise_downsample(dense, big_n).points
    idx = nonuniform_subset(target, n, rng, sigma)
    meta = {"source_id": source_id, "scale": float(scale)}
    return TrainingPair(
        input=PointCloud(target[idx], metadata=dict(meta)),
        target=PointCloud(target, metadata=dict(meta)),
        scale=float(scale),
        source_id=source_id,
    )


def pair_sizes(scale: float, n_max: int) -> Tuple[int, int]:
    """(n, N) = (floor(n_max / R), floor(R * n))."""
    n = int(math.floor(n_max / scale + 1e-9))
    return n, output_count(scale, n)


def make_training_pair(patch_dense, scale: float, n_max: int, rng: np.random.Generator,
                       sigma: float = 0.7, source_id: str = "") -> TrainingPair:
    """
    Training pair at scale R: n = floor(n_max / R) inputs, floor(R * n) targets.

    Raises:
        ConfigError: if the dense patch has fewer than 2 * n_max points
    """
    dense = as_points(patch_dense)
    if len(dense) < 2 * n_max:
        raise ConfigError(f"dense patch needs at least {2 * n_max} points, got {len(dense)}")
    n, _ = pair_sizes(scale, n_max)
    return make_pair(dense, scale, n, rng, sigma=sigma, source_id=source_id)


def augment(pair: TrainingPair, rng: np.random.Generator, cfg: Optional[AugmentConfig] = None) -> TrainingPair:
    """
    Apply one random rotation, scale and shift to input and target together,
    then jitter the input only. A disabled config returns the pair unchanged.
    """
    cfg = cfg or AugmentConfig()
    if not cfg.enabled:
        return pair
    x, y = pair.input.points, pair.target.points

    if cfg.rotate:
        rot = Rotation.random(random_state=rng).as_matrix()
        x, y = x @ rot.T, y @ rot.T
    if cfg.scale:
        s = rng.uniform(cfg.scale_low, cfg.scale_high)
        x, y = x * s, y * s
    if cfg.shift:
        t = rng.uniform(-cfg.shift_range, cfg.shift_range, size=3)
        x, y = x + t, y + t
    if cfg.jitter:
        sigma, clip = cfg.jitter_sigma, cfg.jitter_clip
        if rng.random() < cfg.perturb_prob:
            sigma, clip = cfg.perturb_sigma, 3.0 * cfg.perturb_sigma
        x = x + np.clip(rng.normal(0.0, sigma, size=x.shape), -clip, clip)

    return TrainingPair(
        input=PointCloud(x, metadata=dict(pair.input.metadata)),
        target=PointCloud(y, metadata=dict(pair.target.metadata)),
        scale=pair.scale,
        source_id=pair.source_id,
    )


# ============================================================================
# Manifest
# ============================================================================

@dataclass
class ManifestRecord:
    path: str
    model: str
    split: str
    kind: str = "patch"
    # "builtin:<name>" or a mesh file path; used for mesh-based metrics
    mesh: str = ""
    centroid: List[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    radius: float = 1.0

    @property
    def record_id(self) -> str:
        return Path(self.path).stem


@dataclass
class DatasetManifest:
    root: Path
    records: List[ManifestRecord]
    config: dict
    seed: int

    def split(self, name: str, kind: Optional[str] = None) -> List[ManifestRecord]:
        return [r for r in self.records if r.split == name and (kind is None or r.kind == kind)]

    def data_config(self) -> DataConfig:
        return DataConfig.from_dict(self.config)

    def load_cloud(self, record: ManifestRecord) -> PointCloud:
        cloud = read_xyz(self.root / record.path)
        cloud.metadata.update({"model": record.model, "record": record.record_id})
        return cloud

    def load_mesh(self, record: ManifestRecord, mesh_dir: Optional[Path] = None) -> TriMesh:
        """The record's mesh, in the record's normalized frame."""
        if record.mesh.startswith("builtin:"):
            mesh = builtin_mesh(record.mesh.split(":", 1)[1], self.config.get("builtin_resolution", 24))
        else:
            path = Path(record.mesh)
            if mesh_dir is not None:
                path = Path(mesh_dir) / path.name
            if not path.exists():
                raise FileNotFoundError(f"mesh for {record.model} not found: {path}")
            mesh = read_mesh(path)
        vertices = (mesh.vertices - np.asarray(record.centroid)) / record.radius
        return TriMesh(vertices, mesh.faces, name=mesh.name)


def write_manifest(out_dir: Union[str, Path], records: Sequence[ManifestRecord], config: dict,
                   seed: int) -> Path:
    """Write ``manifest.json`` (sorted keys, stable order) and return its path."""
    out_dir = Path(out_dir)
    doc = {
        "version": MANIFEST_VERSION,
        "seed": seed,
        "config": config,
        "input_sampling": INPUT_SAMPLING,
        "records": [r.__dict__ for r in records],
    }
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.debug("wrote manifest with %d records to %s", len(records), path)
    return path


def read_manifest(path: Union[str, Path]) -> DatasetManifest:
    """
    Load and validate a manifest (or the manifest inside a dataset directory).

    Raises:
        DataFormatError: malformed JSON, unknown split, overlapping splits,
            missing files or no records
    """
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise DataFormatError(f"manifest is not valid JSON: {e}", path) from e
    if doc.get("version") != MANIFEST_VERSION:
        raise DataFormatError(f"unsupported manifest version {doc.get('version')}, expected {MANIFEST_VERSION}", path)
    try:
        records = [ManifestRecord(**r) for r in doc["records"]]
    except (KeyError, TypeError) as e:
        raise DataFormatError(f"malformed manifest records: {e}", path) from e
    if not records:
        raise DataFormatError("manifest lists no records", path)

    seen: Dict[str, str] = {}
    for r in records:
        if r.split not in SPLITS:
            raise DataFormatError(f"unknown split {r.split!r} for {r.path}", path)
        if seen.setdefault(r.path, r.split) != r.split:
            raise DataFormatError(f"{r.path} is listed in both splits", path)
        if not (path.parent / r.path).exists():
            raise DataFormatError(f"listed file is missing: {r.path}", path)
    return DatasetManifest(root=path.parent, records=records, config=doc.get("config", {}),
                           seed=int(doc.get("seed", 0)))


# ============================================================================
# Dataset build
# ============================================================================

def resolve_meshes(builtin: Sequence[str] = (), mesh_paths: Sequence[Path] = (),
                   resolution: int = 24) -> List[Tuple[TriMesh, str]]:
    """(mesh, mesh reference) for builtin generator names and mesh files."""
    meshes = []
    for name in builtin:
        if name not in BUILTIN_SHAPES:
            raise ConfigError(f"Unknown builtin shape: {name}. Use one of {sorted(BUILTIN_SHAPES)}")
        mesh = builtin_mesh(name, resolution)
        mesh.name = name
        meshes.append((mesh, f"builtin:{name}"))
    for path in mesh_paths:
        mesh = read_mesh(path)
        mesh.require_nonempty()
        meshes.append((mesh, str(Path(path).resolve())))
    if not meshes:
        raise ConfigError("no meshes given: name builtin shapes or a mesh directory")
    return meshes


def _test_models(names: List[str], fraction: float) -> List[str]:
    if len(names) < 2:
        return []
    n_test = min(len(names) - 1, max(1, int(round(fraction * len(names)))))
    return names[-n_test:]


def build_dataset(meshes: Sequence[Tuple[TriMesh, str]], out_dir: Union[str, Path],
                  cfg: Optional[DataConfig] = None, seed: int = 0) -> DatasetManifest:
    """
    Write patches (and whole-model clouds of held-out models) plus the manifest.

    With several models, the last ``test_model_fraction`` of them (by the
    given order) are test models; with one model, the last
    ``test_patch_fraction`` of its patches are test patches.
    """
    cfg = cfg or DataConfig()
    out_dir = Path(out_dir)

    names = [mesh.name or f"model{i}" for i, (mesh, _) in enumerate(meshes)]
    if len(set(names)) != len(names):
        raise ConfigError(f"mesh names must be unique, got {names}")
    # clouds of an earlier build must not outlive its manifest
    for sub in ("patches", "models"):
        if (out_dir / sub).is_dir():
            shutil.rmtree(out_dir / sub)
    (out_dir / "patches").mkdir(parents=True, exist_ok=True)
    test_models = set(_test_models(names, cfg.test_model_fraction))
    records: List[ManifestRecord] = []

    for index, (name, (mesh, ref)) in enumerate(zip(names, meshes)):
        mesh_rng = np.random.default_rng([seed, index])
        patches = extract_patches(mesh, cfg.patches_per_model, cfg.patch_points, mesh_rng)
        n_test_patches = 0
        if not test_models:
            n_test_patches = int(round(cfg.test_patch_fraction * len(patches)))
            if len(patches) > 1:
                n_test_patches = min(max(n_test_patches, 1), len(patches) - 1)
        for i, patch in enumerate(patches):
            if name in test_models:
                split = "test"
            else:
                split = "test" if i >= len(patches) - n_test_patches else "train"
            rel = f"patches/{name}_{i:04d}.xyz"
            write_xyz(out_dir / rel, patch)
            records.append(ManifestRecord(path=rel, model=name, split=split, kind="patch", mesh=ref,
                                          centroid=patch.metadata["centroid"], radius=patch.metadata["radius"]))

        if name in test_models:
            dense = sample_mesh_surface(mesh, cfg.test_dense_points, mesh_rng)
            cloud, centroid, radius = normalize_unit_sphere(dense)
            rel = f"models/{name}.xyz"
            write_xyz(out_dir / rel, cloud)
            records.append(ManifestRecord(path=rel, model=name, split="test", kind="model", mesh=ref,
                                          centroid=centroid.tolist(), radius=radius))
        logger.info("dataset: %s -> %d patches (%s)", name, len(patches),
                    "test model" if name in test_models else "train model")

    write_manifest(out_dir, records, cfg.to_dict(), seed)
    return read_manifest(out_dir)
