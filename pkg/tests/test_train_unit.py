"""Unit tests for train.py: schedule, Adam, clipping and the training loop on a toy network."""

import math

import numpy as np
import pandas as pd
import pytest

from metapu.checkpoint import load_checkpoint
from metapu.data import DataConfig, build_dataset, read_manifest, resolve_meshes
from metapu.errors import ConfigError, DataFormatError, NonFiniteLossError
from metapu.loss import LossTerms
from metapu.net import ParamStore, init_params, metapu_forward, scale_set
from metapu.tensor import Tensor
from metapu.train import (
    TRACE_COLUMNS,
    AdamMoments,
    TrainConfig,
    adam_step,
    clip_gradients,
    cosine_lr,
    gradients,
    learning_rates,
    load_train_patches,
    train_loop,
    write_trace,
)


@pytest.fixture(scope="module")
def toy_manifest(tmp_path_factory):
    """Three training patches and one test patch of a torus, 64 dense points each."""
    root = tmp_path_factory.mktemp("toy_data")
    cfg = DataConfig(patches_per_model=4, n_max=16, patch_dense_factor=4, builtin_resolution=12)
    return build_dataset(resolve_meshes(["torus"], resolution=12), root, cfg, seed=0)


def toy_train_config(**overrides):
    values = dict(steps=4, batch_size=2, r_max=2, scale_stride=0.1, log_every=0, seed=5)
    values.update(overrides)
    return TrainConfig(**values)


def single_param(value, grad=None):
    store = ParamStore()
    p = store.add("w", np.asarray(value, dtype=np.float64))
    p.grad = None if grad is None else np.asarray(grad, dtype=np.float64)
    return store


# ============================================================================
# Learning-rate schedule
# ============================================================================

def test_cosine_lr_endpoints_and_midpoint():
    assert cosine_lr(0, 100, 1e-3, 1e-5) == pytest.approx(1e-3)
    assert cosine_lr(50, 100, 1e-3, 1e-5) == pytest.approx((1e-3 + 1e-5) / 2)
    assert cosine_lr(100, 100, 1e-3, 1e-5) == pytest.approx(1e-5)


def test_cosine_lr_never_below_floor():
    assert cosine_lr(500, 100, 1e-3, 1e-5) == pytest.approx(1e-5)
    assert all(cosine_lr(s, 37, 1e-4, 1e-5) >= 1e-5 for s in range(40))


def test_cosine_lr_is_monotone():
    values = [cosine_lr(s, 20, 1e-3, 1e-5) for s in range(21)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_learning_rates_split_meta_fc(toy_params):
    rates = learning_rates(toy_params, lr_fc=1e-3, lr_other=1e-4)
    assert set(rates) == set(toy_params.names())
    for name, lr in rates.items():
        assert lr == (1e-3 if name.startswith("meta.") else 1e-4)
    assert any(lr == 1e-3 for lr in rates.values())


# ============================================================================
# Adam
# ============================================================================

def test_adam_first_step_moves_by_lr_times_sign():
    store = single_param([1.0, 1.0, 1.0], grad=[2.0, -0.5, 0.0])
    moments = AdamMoments.zeros(store)
    adam_step(store, gradients(store), moments, {"w": 0.1}, step=1)
    np.testing.assert_allclose(store["w"].data, [0.9, 1.1, 1.0], rtol=1e-6)
    assert moments.t == 1


def test_adam_second_step_hand_value():
    store = single_param([0.0], grad=[1.0])
    moments = AdamMoments.zeros(store)
    adam_step(store, gradients(store), moments, {"w": 0.01}, step=1)
    store["w"].grad = np.array([3.0])
    adam_step(store, gradients(store), moments, {"w": 0.01}, step=2)
    m = 0.9 * 0.1 + 0.1 * 3.0
    v = 0.999 * 0.001 + 0.001 * 9.0
    m_hat, v_hat = m / (1 - 0.9 ** 2), v / (1 - 0.999 ** 2)
    expected = -0.01 - 0.01 * m_hat / (math.sqrt(v_hat) + 1e-8)
    assert store["w"].data[0] == pytest.approx(expected, rel=1e-9)


def test_adam_missing_gradient_raises():
    store = single_param([1.0])
    with pytest.raises(ConfigError, match="missing gradient for parameter w"):
        adam_step(store, {}, AdamMoments(), {"w": 0.1}, step=1)


def test_gradients_fill_untouched_parameters_with_zeros():
    store = single_param([[1.0, 2.0]])
    np.testing.assert_array_equal(gradients(store)["w"], [[0.0, 0.0]])


# ============================================================================
# Gradient clipping
# ============================================================================

def test_clip_gradients_scales_to_max_norm():
    store = single_param([0.0, 0.0], grad=[6.0, 8.0])
    assert clip_gradients(store, 5.0) == pytest.approx(10.0)
    np.testing.assert_allclose(store["w"].grad, [3.0, 4.0])


def test_clip_gradients_leaves_small_gradients():
    store = single_param([0.0, 0.0], grad=[0.3, 0.4])
    assert clip_gradients(store, 5.0) == pytest.approx(0.5)
    np.testing.assert_array_equal(store["w"].grad, [0.3, 0.4])


def test_clip_gradients_disabled():
    store = single_param([0.0], grad=[100.0])
    assert clip_gradients(store, None) == pytest.approx(100.0)
    assert store["w"].grad[0] == 100.0


# ============================================================================
# TrainConfig
# ============================================================================

def test_train_config_defaults():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.lr_fc, cfg.lr_other, cfg.lr_floor) == (18, 1e-3, 1e-4, 1e-5)
    assert cfg.r_max == 16
    assert cfg.total_steps(100) == 60 * 6


def test_train_config_fixed_steps():
    assert TrainConfig(steps=7).total_steps(1000) == 7


@pytest.mark.parametrize("overrides", [
    {"batch_size": 0},
    {"steps": 0},
    {"lr_fc": 0.0},
    {"r_max": 1},
    {"scale_stride": 0.0},
    {"clip_norm": -1.0},
])
def test_train_config_validation(overrides):
    with pytest.raises(ConfigError):
        TrainConfig(**overrides)


def test_train_config_nested_loss_from_dict():
    cfg = TrainConfig.from_dict({"loss": {"weights": {"uni": 0.0}}})
    assert cfg.loss.weights.uni == 0.0


# ============================================================================
# train_loop
# ============================================================================

def test_train_loop_trace_and_checkpoint(toy_manifest, toy_config, tmp_path):
    result = train_loop(toy_manifest, toy_config, toy_train_config(), checkpoint_path=tmp_path / "toy.mpu")
    trace = result.trace
    assert list(trace.columns) == TRACE_COLUMNS
    assert list(trace["step"]) == [1, 2, 3, 4]
    assert set(trace["scale"]) <= set(scale_set(2))
    assert np.isfinite(trace["loss"]).all()
    assert (trace["lr_other"].diff().dropna() <= 0).all()
    assert result.checkpoint.step == 4
    assert result.checkpoint.adam_step == 4
    assert load_checkpoint(tmp_path / "toy.mpu").step == 4


def test_train_loop_all_r_encoding_round_trips(toy_manifest, toy_config, tmp_path):
    config = toy_config.replace(scale_encoding="all_r")
    result = train_loop(toy_manifest, config, toy_train_config(steps=3), checkpoint_path=tmp_path / "all_r.mpu")
    assert np.isfinite(result.trace["loss"]).all()
    loaded = load_checkpoint(tmp_path / "all_r.mpu")
    assert loaded.step == 3
    assert loaded.net_config == config
    assert loaded.net_config.scale_encoding == "all_r"
    for name, t in result.checkpoint.params.items():
        np.testing.assert_array_equal(loaded.params[name].data, t.data)
    x = toy_manifest.load_cloud(toy_manifest.split("test")[0]).points[:16]
    np.testing.assert_array_equal(metapu_forward(x, 1.5, loaded.params, loaded.net_config).data,
                                  metapu_forward(x, 1.5, result.checkpoint.params, config).data)
    with pytest.raises(ConfigError, match="differs"):
        train_loop(toy_manifest, toy_config, toy_train_config(steps=4), resume=loaded)


def test_train_loop_changes_parameters(toy_manifest, toy_config):
    result = train_loop(toy_manifest, toy_config, toy_train_config(steps=2))
    initial = init_params(toy_config, np.random.default_rng(5))
    changed = [name for name, t in result.checkpoint.params.items()
               if not np.array_equal(t.data, initial[name].data)]
    assert changed


def test_train_loop_is_deterministic(toy_manifest, toy_config):
    a = train_loop(toy_manifest, toy_config, toy_train_config(steps=2))
    b = train_loop(toy_manifest, toy_config, toy_train_config(steps=2))
    pd.testing.assert_frame_equal(a.trace, b.trace)
    for name, t in a.checkpoint.params.items():
        np.testing.assert_array_equal(t.data, b.checkpoint.params[name].data)


def test_resume_replays_the_uninterrupted_run(toy_manifest, toy_config, tmp_path):
    cfg = toy_train_config(steps=4, checkpoint_every=2)
    full = train_loop(toy_manifest, toy_config, cfg, checkpoint_path=tmp_path / "full.mpu")

    def stop_at_three(row):
        if row["step"] == 3:
            raise KeyboardInterrupt

    with pytest.raises(KeyboardInterrupt):
        train_loop(toy_manifest, toy_config, cfg, checkpoint_path=tmp_path / "cut.mpu", on_step=stop_at_three)
    partial = load_checkpoint(tmp_path / "cut.mpu")
    assert partial.step == 2

    resumed = train_loop(toy_manifest, toy_config, cfg, resume=partial, checkpoint_path=tmp_path / "cut.mpu")
    assert list(resumed.trace["step"]) == [3, 4]
    pd.testing.assert_frame_equal(resumed.trace.reset_index(drop=True),
                                  full.trace.iloc[2:].reset_index(drop=True))
    for name, t in full.checkpoint.params.items():
        np.testing.assert_array_equal(resumed.checkpoint.params[name].data, t.data)
    assert (tmp_path / "full.mpu").read_bytes() == (tmp_path / "cut.mpu").read_bytes()


def test_resume_rejects_other_network(toy_manifest, toy_config, tmp_path):
    result = train_loop(toy_manifest, toy_config, toy_train_config(steps=1))
    other = toy_config.replace(c=5)
    with pytest.raises(ConfigError, match="differs"):
        train_loop(toy_manifest, other, toy_train_config(steps=2), resume=result.checkpoint)


def test_train_loop_rejects_mismatched_r_max(toy_manifest, toy_config):
    with pytest.raises(ConfigError, match="r_max"):
        train_loop(toy_manifest, toy_config, toy_train_config(r_max=3))


def test_non_finite_loss_dumps_batch(toy_manifest, toy_config, tmp_path, mocker):
    mocker.patch("metapu.train.compound_loss",
                 return_value=LossTerms(total=Tensor(np.array(np.nan)), rec=np.nan, uni=0.0, rep=0.0))
    with pytest.raises(NonFiniteLossError) as info:
        train_loop(toy_manifest, toy_config, toy_train_config(), checkpoint_path=tmp_path / "bad.mpu")
    dump = info.value.dump_path
    assert dump is not None
    with np.load(dump) as arrays:
        assert int(arrays["step"]) == 1
        assert "input_0" in arrays.files


def test_on_step_sees_every_row(toy_manifest, toy_config):
    rows = []
    train_loop(toy_manifest, toy_config, toy_train_config(steps=3), on_step=rows.append)
    assert [r["step"] for r in rows] == [1, 2, 3]
    assert set(TRACE_COLUMNS) <= set(rows[0])


def test_load_train_patches_requires_train_split(tmp_path):
    cfg = DataConfig(patches_per_model=2, n_max=8, builtin_resolution=12)
    manifest = build_dataset(resolve_meshes(["torus"], resolution=12), tmp_path, cfg, seed=0)
    for record in manifest.records:
        record.split = "test"
    with pytest.raises(DataFormatError, match="no training patches"):
        load_train_patches(manifest)


# ============================================================================
# Trace file
# ============================================================================

def test_write_trace_appends_without_header(tmp_path):
    first = pd.DataFrame([dict.fromkeys(TRACE_COLUMNS, 1)])
    second = pd.DataFrame([dict.fromkeys(TRACE_COLUMNS, 2)])
    path = write_trace(tmp_path / "trace.csv", first)
    write_trace(path, second, append=True)
    table = pd.read_csv(path)
    assert list(table.columns) == TRACE_COLUMNS
    assert list(table["step"]) == [1, 2]


def test_manifest_fixture_layout(toy_manifest):
    assert len(toy_manifest.split("train")) == 3
    assert read_manifest(toy_manifest.root).data_config().n_max == 16
