"""
Arbitrary-scale point cloud upsampling network.

Pipeline for an input cloud x (n points) and scale factor R:

    point CNN -> RGC blocks (one of them a meta-RGC block whose two branch
    weights are generated from the scale vector) -> unpooling to
    n * r_max candidate points -> farthest point sampling of floor(R * n).

The k-NN graph is built once from the input coordinates and shared by the
point CNN and every block. Parameters live in a ``ParamStore``; the forward
functions are plain functions over it.
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Union

import numpy as np

from . import tensor as T
from .config import Config, ConfigRecord
from .errors import ConfigError
from .geom import KnnGraph, PointCloud, as_points, build_knn, farthest_point_sample
from .tensor import Tensor

logger = logging.getLogger(__name__)

SCALE_ENCODINGS = ("pairs", "all_r")
BRANCHES = ("center", "neighbor")


@dataclass
class NetConfig(ConfigRecord):
    """Network shape. Defaults are the full-size model; see ``Config.PROFILES``."""

    k: int = 8
    c: int = 128
    n_blocks: int = 22
    meta_block_index: int = 2
    r_max: int = 16
    c_hidden: int = 128
    l: int = 1
    # False replaces the meta-RGC block by a plain RGC block
    meta_enabled: bool = True
    scale_encoding: str = "pairs"

    def __post_init__(self):
        if self.k < 1 or self.c < 1 or self.c_hidden < 1:
            raise ConfigError(f"k, c and c_hidden must be positive: k={self.k} c={self.c} c_hidden={self.c_hidden}")
        if self.n_blocks < 1 or not 1 <= self.meta_block_index <= self.n_blocks:
            raise ConfigError(
                f"meta_block_index must be in [1, n_blocks], got {self.meta_block_index} with {self.n_blocks} blocks"
            )
        if self.r_max < 2:
            raise ConfigError(f"r_max must be >= 2, got {self.r_max}")
        if self.l != 1:
            raise ConfigError(f"only point-wise kernels (l=1) are supported, got l={self.l}")
        if self.scale_encoding not in SCALE_ENCODINGS:
            raise ConfigError(f"Unknown scale encoding: {self.scale_encoding}. Use one of {SCALE_ENCODINGS}")

    @classmethod
    def from_profile(cls, name: str, **overrides) -> "NetConfig":
        return cls.from_dict({**Config.profile_overrides(name), **overrides})


# ============================================================================
# Scale handling
# ============================================================================

def check_scale(scale: float, r_max: int) -> float:
    scale = float(scale)
    if not 1.0 < scale <= r_max:
        raise ConfigError(f"scale factor must satisfy 1 < R <= {r_max}, got {scale}")
    return scale


def make_scale_vector(scale: float, r_max: int, encoding: str = "pairs") -> np.ndarray:
    """
    Encode R as 2 * r_max numbers.

    ``pairs``: {max(0, R - i), R} for i = 1..ceil(R), then {-1, -1} padding.
    ``all_r``: every entry equals R.
    """
    scale = check_scale(scale, r_max)
    if encoding == "all_r":
        return np.full(2 * r_max, scale)
    if encoding != "pairs":
        raise ConfigError(f"Unknown scale encoding: {encoding}. Use one of {SCALE_ENCODINGS}")
    sv = np.full(2 * r_max, -1.0)
    for i in range(1, math.ceil(round(scale, 9)) + 1):
        sv[2 * (i - 1)] = max(0.0, scale - i)
        sv[2 * (i - 1) + 1] = scale
    return sv


def output_count(scale: float, n: int) -> int:
    """floor(R * n), tolerant to the representation error of decimal scales."""
    return int(math.floor(scale * n + 1e-9))


def scale_set(r_max: float, stride: float = 0.1) -> List[float]:
    """Training scales {1 + stride, 1 + 2 * stride, ..., r_max}."""
    scales = []
    i = 1
    while True:
        s = round(1.0 + stride * i, 10)
        if s > r_max + 1e-9:
            break
        scales.append(s)
        i += 1
    return scales


# ============================================================================
# Parameters
# ============================================================================

class ParamStore:
    """Named parameter tensors, in creation order."""

    def __init__(self):
        self._tensors: Dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._tensors:
            raise ConfigError(f"duplicate parameter name: {name}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> List[str]:
        return list(self._tensors)

    def count(self) -> int:
        return int(sum(t.size for t in self._tensors.values()))

    def zero_grad(self):
        for t in self._tensors.values():
            t.zero_grad()

    @staticmethod
    def is_meta_fc(name: str) -> bool:
        """True for the fully connected layers of the weight-generating subnetworks."""
        return name.startswith("meta.")


def meta_output_size(config: NetConfig) -> int:
    """Number of values one meta-subnetwork emits (c_in * c_out * l * l)."""
    return config.c * config.c * config.l * config.l


def _add_linear(store: ParamStore, prefix: str, fan_in: int, fan_out: int, rng: np.random.Generator):
    bound = 1.0 / math.sqrt(fan_in)
    store.add(f"{prefix}.w", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    store.add(f"{prefix}.b", np.zeros(fan_out))


def init_params(config: NetConfig, rng: np.random.Generator) -> ParamStore:
    """Uniform fan-in scaled weights, zero biases; deterministic for a seeded rng."""
    store = ParamStore()
    c = config.c
    _add_linear(store, "cnn.0", 3, c, rng)
    _add_linear(store, "cnn.1", c, c, rng)
    _add_linear(store, "cnn.2", c, c, rng)

    for j in range(1, config.n_blocks + 1):
        if j == config.meta_block_index and config.meta_enabled:
            continue
        _add_linear(store, f"block{j}.center", c, c, rng)
        _add_linear(store, f"block{j}.neighbor", c, c, rng)

    if config.meta_enabled:
        sv_len = 2 * config.r_max
        out = meta_output_size(config)
        for branch in BRANCHES:
            _add_linear(store, f"meta.{branch}.fc1", sv_len, config.c_hidden, rng)
            _add_linear(store, f"meta.{branch}.fc2", config.c_hidden, config.c_hidden, rng)
            _add_linear(store, f"meta.{branch}.fc3", config.c_hidden, out, rng)
            _add_linear(store, f"meta.{branch}.fc4", out, out, rng)
            _add_linear(store, f"meta.{branch}.skip", sv_len, out, rng)

    _add_linear(store, "unpool.center", c, config.r_max * 3, rng)
    _add_linear(store, "unpool.neighbor", c, config.r_max * 3, rng)
    logger.debug("initialized %d parameter tensors (%d values)", len(store), store.count())
    return store


# ============================================================================
# Blocks
# ============================================================================

def _linear(x: Tensor, params: ParamStore, prefix: str) -> Tensor:
    return T.linear(x, params[f"{prefix}.w"], params[f"{prefix}.b"])


def _neighbor_sum(features: Tensor, graph: KnnGraph) -> Tensor:
    return T.reduce(T.group_gather(features, graph.neighbors), axis=1, mode="sum")


def point_cnn_forward(x: Union[Tensor, np.ndarray], graph: KnnGraph, params: ParamStore) -> Tensor:
    """Shared point-wise MLP over each point's k neighbour coordinates, max-pooled to n x c."""
    x = T.as_tensor(x)
    n, k = graph.neighbors.shape
    h = T.reshape(T.group_gather(x, graph.neighbors), (n * k, 3))
    for i in range(3):
        h = T.relu(_linear(h, params, f"cnn.{i}"))
    c = h.shape[1]
    return T.reduce(T.reshape(h, (n, k, c)), axis=1, mode="max")


def rgc_forward(features: Tensor, graph: KnnGraph, params: ParamStore, prefix: str) -> Tensor:
    """relu(W_c f_p + W_n sum_{q in N(p)} f_q) + f_p."""
    center = _linear(features, params, f"{prefix}.center")
    neighbor = _linear(_neighbor_sum(features, graph), params, f"{prefix}.neighbor")
    return T.add(T.relu(T.add(center, neighbor)), features)


def meta_subnet_forward(sv: np.ndarray, params: ParamStore, branch: str, c_in: int, c_out: int,
                        l: int = 1) -> Tensor:
    """
    Generate a (c_in, c_out, l, l) weight tensor from the scale vector.

    FC1..FC3 are followed by relu; FC4 and the skip layer are linear so the
    generated weights can take either sign.
    """
    s = Tensor(np.asarray(sv, dtype=np.float64).reshape(1, -1))
    prefix = f"meta.{branch}"
    h = s
    for layer in ("fc1", "fc2", "fc3"):
        h = T.relu(_linear(h, params, f"{prefix}.{layer}"))
    h = _linear(h, params, f"{prefix}.fc4")
    skip = _linear(s, params, f"{prefix}.skip")
    return T.reshape(T.add(h, skip), (c_in, c_out, l, l))


def meta_rgc_forward(features: Tensor, graph: KnnGraph, sv: np.ndarray, params: ParamStore) -> Tensor:
    """RGC dataflow with both branch weights generated by the meta-subnetworks."""
    c = features.shape[1]
    w_center = T.reshape(meta_subnet_forward(sv, params, "center", c, c), (c, c))
    w_neighbor = T.reshape(meta_subnet_forward(sv, params, "neighbor", c, c), (c, c))
    center = T.linear(features, w_center)
    neighbor = T.linear(_neighbor_sum(features, graph), w_neighbor)
    return T.add(T.relu(T.add(center, neighbor)), features)


def unpool_forward(features: Tensor, x: Union[Tensor, np.ndarray], graph: KnnGraph,
                   params: ParamStore, r_max: int) -> Tensor:
    """
    Predict r_max offsets per input point and add them to the point.

    Output rows are ordered so the r_max children of input point i are
    contiguous, i ascending.
    """
    x = T.as_tensor(x)
    n = features.shape[0]
    offsets = T.add(_linear(features, params, "unpool.center"),
                    _linear(_neighbor_sum(features, graph), params, "unpool.neighbor"))
    children = T.add(T.reshape(offsets, (n, r_max, 3)), T.reshape(x, (n, 1, 3)))
    return T.reshape(children, (n * r_max, 3))


# ============================================================================
# Full model
# ============================================================================

def _check_input(x: Union[Tensor, np.ndarray, PointCloud], scale: float, config: NetConfig) -> Tensor:
    if isinstance(x, PointCloud):
        x = x.points
    x = T.as_tensor(x)
    check_scale(scale, config.r_max)
    n = x.shape[0]
    if n <= config.k:
        raise ConfigError(f"input needs more than k={config.k} points, got {n}")
    return x


def metapu_dense_forward(x, scale: float, params: ParamStore, config: NetConfig,
                         meta_scale: Optional[float] = None,
                         graph: Optional[KnnGraph] = None) -> Tensor:
    """
    Everything up to (not including) the farthest sampling head: n * r_max points.

    ``meta_scale`` overrides the scale fed to the meta block only.
    """
    x = _check_input(x, scale, config)
    graph = graph or build_knn(x.data, config.k)
    sv = make_scale_vector(meta_scale if meta_scale is not None else scale, config.r_max,
                           config.scale_encoding)

    features = point_cnn_forward(x, graph, params)
    for j in range(1, config.n_blocks + 1):
        if j == config.meta_block_index and config.meta_enabled:
            features = meta_rgc_forward(features, graph, sv, params)
        else:
            features = rgc_forward(features, graph, params, f"block{j}")
    return unpool_forward(features, x, graph, params, config.r_max)


def metapu_forward(x, scale: float, params: ParamStore, config: NetConfig,
                   meta_scale: Optional[float] = None) -> Tensor:
    """
    Upsample x to floor(R * n) points.

    The head runs farthest point sampling from the first child of input
    point 0; gradients reach the parameters through the selected points.
    """
    x = _check_input(x, scale, config)
    dense = metapu_dense_forward(x, scale, params, config, meta_scale=meta_scale)
    count = output_count(scale, x.shape[0])
    idx = farthest_point_sample(dense.data, count, seed_index=0)
    return T.gather_rows(dense, idx)


def upsample_cloud(cloud: PointCloud, scale: float, params: ParamStore, config: NetConfig,
                   meta_scale: Optional[float] = None) -> PointCloud:
    out = metapu_forward(cloud.points, scale, params, config, meta_scale=meta_scale)
    meta = dict(cloud.metadata)
    meta.update({"scale": float(scale), "meta_scale": meta_scale})
    return PointCloud(out.data, metadata=meta)


# ============================================================================
# Baselines
# ============================================================================

def replicate_upsample(x, scale: float, r_max: int) -> np.ndarray:
    """Zero-offset unpooling followed by the farthest sampling head."""
    pts = as_points(x)
    check_scale(scale, r_max)
    dense = np.repeat(pts, r_max, axis=0)
    idx = farthest_point_sample(dense, output_count(scale, len(pts)), seed_index=0)
    return dense[idx]


def dense_then_downsample(x, scale: float, params: ParamStore, config: NetConfig,
                          method: str = "farthest",
                          rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Upsample at r_max, then keep floor(R * n) points by FPS or at random."""
    x = _check_input(x, scale, config)
    dense = metapu_dense_forward(x, float(config.r_max), params, config).data
    count = output_count(scale, x.shape[0])
    if method == "farthest":
        return dense[farthest_point_sample(dense, count, seed_index=0)]
    if method == "random":
        rng = rng if rng is not None else np.random.default_rng(0)
        return dense[np.sort(rng.choice(len(dense), size=count, replace=False))]
    raise ConfigError(f"Unknown downsampling method: {method}. Use 'farthest' or 'random'")


# ============================================================================
# Receptive field
# ============================================================================

def closest_output_index(dense: np.ndarray, point: np.ndarray) -> int:
    d = ((np.asarray(dense) - np.asarray(point)) ** 2).sum(axis=1)
    return int(np.argmin(d))


def input_gradient_magnitudes(x, scale: float, params: ParamStore, config: NetConfig,
                              output_index: int) -> np.ndarray:
    """
    Frobenius norm of d out[output_index] / d x_i for every input point, head bypassed.

    One backward pass per output coordinate, then the norm over the 3x3 block.
    """
    pts = as_points(x.points if isinstance(x, PointCloud) else x)
    xt = Tensor(pts.copy(), requires_grad=True)
    dense = metapu_dense_forward(xt, scale, params, config)
    if not 0 <= output_index < dense.shape[0]:
        raise ConfigError(f"output index {output_index} out of range for {dense.shape[0]} points")
    row = T.gather_rows(dense, [output_index])
    squared = np.zeros(len(pts))
    for axis in range(3):
        xt.zero_grad()
        params.zero_grad()
        pick = np.zeros((1, 3))
        pick[0, axis] = 1.0
        T.reduce(T.mul(row, Tensor(pick))).backward()
        if xt.grad is not None:
            squared += (xt.grad ** 2).sum(axis=1)
    params.zero_grad()
    return np.sqrt(squared)


def receptive_field(x, scale: float, params: ParamStore, config: NetConfig,
                    output_index: int, threshold: float = 0.01) -> np.ndarray:
    """Input indices whose Jacobian norm exceeds ``threshold`` times the maximum."""
    mags = input_gradient_magnitudes(x, scale, params, config, output_index)
    peak = mags.max()
    if peak <= 0.0:
        return np.array([], dtype=np.int64)
    return np.flatnonzero(mags > threshold * peak)


def field_sizes(mags: np.ndarray, thresholds) -> Dict[float, int]:
    peak = mags.max()
    return {t: int((mags > t * peak).sum()) if peak > 0 else 0 for t in thresholds}
