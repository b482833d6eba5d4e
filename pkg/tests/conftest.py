"""Pytest configuration and shared fixtures for metapu tests.

Fixtures build small, seeded inputs so every test is deterministic:
- parametric meshes from metapu.shapes
- the tiny network profile and its parameters
- a toy network small enough for finite-difference checks
"""

import numpy as np
import pytest

from metapu.geom import normalize_unit_sphere, sample_mesh_surface
from metapu.net import NetConfig, init_params
from metapu.shapes import builtin_mesh


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training trend checks (deselected by default)")


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def sphere_mesh():
    return builtin_mesh("sphere", resolution=16)


@pytest.fixture(scope="session")
def torus_mesh():
    return builtin_mesh("torus", resolution=16)


@pytest.fixture(scope="session")
def tiny_config():
    return NetConfig.from_profile("tiny")


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, np.random.default_rng(7))


@pytest.fixture(scope="session")
def toy_config():
    """Small enough to finite-difference every parameter."""
    return NetConfig(k=3, c=4, n_blocks=2, meta_block_index=1, r_max=2, c_hidden=4)


@pytest.fixture
def toy_params(toy_config):
    return init_params(toy_config, np.random.default_rng(11))


@pytest.fixture
def sphere_cloud(sphere_mesh):
    """60 unit-normalized points sampled on the sphere."""
    cloud = sample_mesh_surface(sphere_mesh, 60, np.random.default_rng(3))
    return normalize_unit_sphere(cloud)[0]
