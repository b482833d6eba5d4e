"""Unit tests for metrics.py: cloud metrics, mesh metrics, reports and aggregation."""

import numpy as np
import pytest

from metapu.errors import ConfigError, ShapeError
from metapu.geom import TriMesh, nearest_neighbor_distances, point_triangle_distance, sample_mesh_surface
from metapu.metrics import (
    MetricConfig,
    MetricReport,
    aggregate,
    chamfer,
    deviation_stats,
    emd_approx,
    emd_exact,
    evaluate_shape,
    fscore,
    nuc,
    point_mesh_distances,
    reports_frame,
)
from metapu.transport import SinkhornConfig


def grid(n_side=4, spacing=1.0):
    g = np.arange(n_side) * spacing
    return np.array([[x, y, 0.0] for x in g for y in g])


# ============================================================================
# Chamfer
# ============================================================================

def test_chamfer_identical_clouds_is_zero(rng):
    x = rng.normal(size=(30, 3))
    assert chamfer(x, x) == 0.0


def test_chamfer_single_points_hand_value():
    a = np.array([[0.0, 0.0, 0.0]])
    b = np.array([[0.3, 0.0, 0.4]])
    assert chamfer(a, b) == pytest.approx(2 * 0.25, rel=1e-12)


def test_chamfer_is_symmetric(rng):
    a, b = rng.normal(size=(20, 3)), rng.normal(size=(35, 3))
    assert chamfer(a, b) == pytest.approx(chamfer(b, a), rel=1e-12)


# ============================================================================
# EMD
# ============================================================================

def test_emd_exact_permutation_is_zero(rng):
    x = rng.normal(size=(25, 3))
    assert emd_exact(x, x[rng.permutation(25)]) == pytest.approx(0.0, abs=1e-12)


def test_emd_exact_translation_equals_shift_length(rng):
    x = rng.normal(size=(25, 3))
    shift = np.array([0.3, -0.4, 0.0])
    assert emd_exact(x, x + shift) == pytest.approx(0.5, rel=1e-9)


def test_emd_exact_rejects_unequal_sizes(rng):
    with pytest.raises(ShapeError, match="equal sizes"):
        emd_exact(rng.normal(size=(5, 3)), rng.normal(size=(6, 3)))


def test_emd_exact_rejects_large_clouds(rng):
    x = rng.normal(size=(20, 3))
    with pytest.raises(ConfigError, match="limited to 10"):
        emd_exact(x, x, max_points=10)


def test_emd_approx_close_to_exact(rng):
    x = rng.uniform(-1, 1, size=(30, 3))
    y = rng.uniform(-1, 1, size=(30, 3))
    exact = emd_exact(x, y)
    approx, _ = emd_approx(x, y, SinkhornConfig(epsilon=1e-3, max_iters=3000))
    assert approx == pytest.approx(exact, abs=0.05)


@pytest.mark.parametrize("seed", range(14))
def test_emd_approx_within_five_percent_of_exact_for_small_clouds(seed):
    rng = np.random.default_rng(seed)
    n = 2 + seed % 7
    x = rng.uniform(-1, 1, size=(n, 3))
    y = rng.uniform(-1, 1, size=(n, 3))
    approx, _ = emd_approx(x, y, SinkhornConfig(epsilon=1e-3, max_iters=3000))
    assert approx == pytest.approx(emd_exact(x, y), rel=0.05)


def test_emd_approx_doubles_when_singletons_move_twice_as_far():
    a = np.array([[0.1, -0.2, 0.3]])
    direction = np.array([[0.0, 0.6, 0.8]])
    near, _ = emd_approx(a, a + 0.25 * direction)
    far, _ = emd_approx(a, a + 0.5 * direction)
    assert near == pytest.approx(0.25, rel=0.05)
    assert far / near == pytest.approx(2.0, rel=0.05)


def test_emd_approx_doubles_under_a_rigid_pull(rng):
    x = rng.uniform(-1, 1, size=(6, 3))
    shift = np.array([0.3, -0.4, 0.0])
    cfg = SinkhornConfig(epsilon=1e-3, max_iters=3000)
    near, _ = emd_approx(x, x + shift, cfg)
    far, _ = emd_approx(x, x + 2.0 * shift, cfg)
    assert near == pytest.approx(0.5, rel=0.05)
    assert far / near == pytest.approx(2.0, rel=0.05)


@pytest.mark.parametrize("seed", range(10))
def test_emd_exact_bounds_directed_nearest_neighbour_means(seed):
    rng = np.random.default_rng(seed)
    n = 2 + seed % 7
    a = rng.normal(size=(n, 3))
    b = rng.normal(size=(n, 3)) + 0.5
    forward = nearest_neighbor_distances(a, b)[0].mean()
    backward = nearest_neighbor_distances(b, a)[0].mean()
    assert emd_exact(a, b) >= max(forward, backward) - 1e-12


def test_emd_approx_handles_unequal_sizes(rng):
    value, converged = emd_approx(rng.normal(size=(20, 3)), rng.normal(size=(31, 3)))
    assert value >= 0.0
    assert isinstance(converged, bool)


# ============================================================================
# F-score
# ============================================================================

def test_fscore_identical_is_one(rng):
    x = rng.normal(size=(40, 3))
    assert fscore(x, x) == 1.0


def test_fscore_disjoint_is_zero():
    y = grid()
    assert fscore(y + 100.0, y, tau=0.1) == 0.0


def test_fscore_half_matched_hand_value():
    y = grid()
    yp = np.vstack([y[:8], y[:8] + np.array([0.0, 0.0, 50.0])])
    # precision 8/16, recall 8/16
    assert fscore(yp, y, tau=0.1) == pytest.approx(0.5)


def test_fscore_threshold_is_inclusive():
    y = np.array([[0.0, 0.0, 0.0]])
    yp = np.array([[0.25, 0.0, 0.0]])
    assert fscore(yp, y, tau=0.25) == 1.0


def test_fscore_rejects_nonpositive_tau():
    y = grid()
    with pytest.raises(ConfigError):
        fscore(y, y, tau=0.0)


# ============================================================================
# Mesh metrics
# ============================================================================

def test_point_mesh_distances_match_brute_force(sphere_mesh, rng):
    pts = rng.uniform(-1.5, 1.5, size=(40, 3))
    tris = np.stack(sphere_mesh.corners(), axis=1)
    keep = sphere_mesh.areas > 0
    brute = np.array([min(point_triangle_distance(p, t) for t in tris[keep]) for p in pts])
    np.testing.assert_allclose(point_mesh_distances(pts, sphere_mesh), brute, rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("height", [0.05, 0.37, 2.0, -1.5])
def test_deviation_of_single_point_above_flat_triangle(height):
    mesh = TriMesh(vertices=np.array([[-100.0, -100.0, 0.0], [100.0, -100.0, 0.0], [0.0, 100.0, 0.0]]),
                   faces=np.array([[0, 1, 2]]))
    mean, std = deviation_stats(np.array([[0.1, 0.2, height]]), mesh)
    assert mean == pytest.approx(abs(height), rel=1e-9)
    assert std == 0.0


def test_vertices_lie_on_the_mesh(torus_mesh):
    mean, std = deviation_stats(torus_mesh.vertices, torus_mesh)
    assert mean == pytest.approx(0.0, abs=1e-12)
    assert std == pytest.approx(0.0, abs=1e-12)


def test_nuc_uniform_lower_than_clustered(sphere_mesh):
    uniform = sample_mesh_surface(sphere_mesh, 4000, np.random.default_rng(1)).points
    clustered = uniform[uniform[:, 2] > 0]
    u = nuc(uniform, sphere_mesh, p=0.008, n_seeds=100, rng=np.random.default_rng(2))
    c = nuc(clustered, sphere_mesh, p=0.008, n_seeds=100, rng=np.random.default_rng(2))
    assert u < 0.5
    assert c > 2 * u


def test_nuc_ignores_points_far_from_surface(sphere_mesh):
    far = np.full((50, 3), 10.0)
    assert nuc(far, sphere_mesh, p=0.008, n_seeds=10, rng=np.random.default_rng(0)) == 0.0


def test_nuc_is_deterministic_for_a_seed(sphere_mesh):
    pts = sample_mesh_surface(sphere_mesh, 500, np.random.default_rng(4)).points
    a = nuc(pts, sphere_mesh, p=0.004, n_seeds=20, rng=np.random.default_rng(9))
    b = nuc(pts, sphere_mesh, p=0.004, n_seeds=20, rng=np.random.default_rng(9))
    assert a == b


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1])
def test_nuc_rejects_bad_disk_fraction(sphere_mesh, p):
    with pytest.raises(ConfigError):
        nuc(sphere_mesh.vertices, sphere_mesh, p=p)


def test_nuc_rejects_single_seed(sphere_mesh):
    with pytest.raises(ConfigError, match="at least 2 seeds"):
        nuc(sphere_mesh.vertices, sphere_mesh, n_seeds=1)


# ============================================================================
# MetricConfig
# ============================================================================

def test_metric_config_always_reports_default_disk():
    cfg = MetricConfig(nuc_percentages=[0.002, 0.004])
    assert 0.008 in cfg.nuc_percentages


def test_metric_config_nested_sinkhorn_from_dict():
    cfg = MetricConfig.from_dict({"sinkhorn": {"epsilon": 0.01, "max_iters": 50}})
    assert isinstance(cfg.sinkhorn, SinkhornConfig)
    assert cfg.sinkhorn.max_iters == 50


def test_metric_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown keys"):
        MetricConfig.from_dict({"nuc_disks": 3})


def test_metric_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        MetricConfig(fscore_tau_fraction=0.0)
    with pytest.raises(ConfigError):
        MetricConfig(nuc_seeds=1)


# ============================================================================
# evaluate_shape / aggregation
# ============================================================================

def test_evaluate_shape_without_mesh(rng):
    y = rng.normal(size=(40, 3))
    report = evaluate_shape(y, y, "s0", 2.0)
    assert report.cd == 0.0
    assert report.fscore == 1.0
    assert report.emd_method == "exact"
    assert report.nuc == {}
    doc = report.to_json_dict()
    assert "dev_mean" not in doc
    assert "seconds" not in doc
    assert doc["flags"] == []


def test_evaluate_shape_uses_sinkhorn_for_unequal_sizes(rng):
    report = evaluate_shape(rng.normal(size=(30, 3)), rng.normal(size=(40, 3)), "s1", 2.5)
    assert report.emd_method == "sinkhorn"
    assert report.emd >= 0.0


def test_evaluate_shape_with_mesh_reports_every_disk(sphere_mesh):
    pts = sample_mesh_surface(sphere_mesh, 300, np.random.default_rng(5)).points
    cfg = MetricConfig(nuc_seeds=10)
    report = evaluate_shape(pts, pts, "sphere", 4.0, mesh=sphere_mesh, cfg=cfg)
    assert sorted(report.nuc) == ["nuc_p002", "nuc_p004", "nuc_p006", "nuc_p008", "nuc_p010"]
    assert report.deviation_mean == pytest.approx(0.0, abs=1e-9)
    assert "dev_std" in report.to_json_dict()


def test_evaluate_shape_is_reproducible(rng):
    a, b = rng.normal(size=(30, 3)), rng.normal(size=(45, 3))
    first = evaluate_shape(a, b, "x", 1.5).to_json_dict()
    second = evaluate_shape(a, b, "x", 1.5).to_json_dict()
    assert first == second


def test_aggregate_means_per_method_and_scale():
    reports = [
        MetricReport("a", 2.0, cd=1.0, emd=0.1, fscore=0.5),
        MetricReport("b", 2.0, cd=3.0, emd=0.3, fscore=0.7),
        MetricReport("a", 4.0, cd=5.0, emd=0.5, fscore=0.1),
        MetricReport("a", 2.0, cd=9.0, emd=0.9, fscore=0.0, method="replicate"),
    ]
    table = aggregate(reports)
    row = table[(table["method"] == "model") & (table["scale"] == 2.0)].iloc[0]
    assert row["cd"] == pytest.approx(2.0)
    assert row["fscore"] == pytest.approx(0.6)
    assert row["shapes"] == 2
    assert len(table) == 3
    assert list(table[table["method"] == "model"]["scale"]) == [2.0, 4.0]


def test_reports_frame_joins_flags():
    report = MetricReport("a", 2.0, cd=1.0, emd=0.1, fscore=0.5, flags=["emd_not_converged"])
    assert reports_frame([report]).iloc[0]["flags"] == "emd_not_converged"


def test_aggregate_of_nothing_is_empty():
    assert aggregate([]).empty
