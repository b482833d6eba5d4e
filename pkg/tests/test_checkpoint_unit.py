"""Unit tests for checkpoint.py: binary layout, corruption detection and hashing."""

import io
import json
import struct

import numpy as np
import pytest

from metapu.checkpoint import (
    Checkpoint,
    _write_tensor,
    checkpoint_hash,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from metapu.config import Config
from metapu.errors import CheckpointError, DataFormatError
from metapu.train import AdamMoments


@pytest.fixture
def toy_checkpoint(toy_config, toy_params):
    rng = np.random.default_rng(4)
    rng.normal(size=3)
    moments = AdamMoments.zeros(toy_params)
    for name in moments.m:
        moments.m[name] += 0.25
        moments.v[name] += 0.5
    return Checkpoint(net_config=toy_config, params=toy_params, step=12, adam_step=12,
                      m=moments.m, v=moments.v, rng_state=rng.bit_generator.state,
                      run_config={"profile": "toy", "seed": 4})


def raw_header(header: dict) -> bytes:
    body = json.dumps(header).encode("utf-8")
    return Config.CHECKPOINT_MAGIC + struct.pack("<II", Config.CHECKPOINT_VERSION, len(body)) + body


# ============================================================================
# Round trip
# ============================================================================

def test_save_and_load_restore_everything(tmp_path, toy_checkpoint):
    path = save_checkpoint(tmp_path / "run" / "toy.mpu", toy_checkpoint)
    loaded = load_checkpoint(path)
    assert loaded.net_config == toy_checkpoint.net_config
    assert loaded.params.names() == toy_checkpoint.params.names()
    for name, t in toy_checkpoint.params.items():
        np.testing.assert_array_equal(loaded.params[name].data, t.data)
        np.testing.assert_array_equal(loaded.m[name], toy_checkpoint.m[name])
        np.testing.assert_array_equal(loaded.v[name], toy_checkpoint.v[name])
    assert loaded.step == 12
    assert loaded.adam_step == 12
    assert loaded.run_config == {"profile": "toy", "seed": 4}


def test_generator_state_survives(tmp_path, toy_checkpoint):
    loaded = load_checkpoint(save_checkpoint(tmp_path / "toy.mpu", toy_checkpoint))
    original = np.random.default_rng()
    original.bit_generator.state = toy_checkpoint.rng_state
    restored = np.random.default_rng()
    restored.bit_generator.state = loaded.rng_state
    np.testing.assert_array_equal(original.normal(size=5), restored.normal(size=5))


def test_loaded_params_are_trainable(tmp_path, toy_checkpoint):
    loaded = load_checkpoint(save_checkpoint(tmp_path / "toy.mpu", toy_checkpoint))
    assert all(t.requires_grad for _, t in loaded.params.items())


def test_encoding_is_deterministic(toy_checkpoint):
    assert encode_checkpoint(toy_checkpoint) == encode_checkpoint(toy_checkpoint)


def test_checkpoint_without_moments(toy_config, toy_params):
    ckpt = decode_checkpoint(encode_checkpoint(Checkpoint(net_config=toy_config, params=toy_params)))
    assert ckpt.m == {}
    assert ckpt.rng_state is None


def test_save_leaves_no_temporary_file(tmp_path, toy_checkpoint):
    save_checkpoint(tmp_path / "toy.mpu", toy_checkpoint)
    assert [p.name for p in tmp_path.iterdir()] == ["toy.mpu"]


def test_hash_tracks_content(tmp_path, toy_checkpoint):
    a = save_checkpoint(tmp_path / "a.mpu", toy_checkpoint)
    b = save_checkpoint(tmp_path / "b.mpu", toy_checkpoint)
    assert checkpoint_hash(a) == checkpoint_hash(b)
    toy_checkpoint.step = 13
    c = save_checkpoint(tmp_path / "c.mpu", toy_checkpoint)
    assert checkpoint_hash(a) != checkpoint_hash(c)
    assert len(checkpoint_hash(a)) == 64


# ============================================================================
# Corruption
# ============================================================================

def test_bad_magic(toy_checkpoint):
    data = b"XXXX" + encode_checkpoint(toy_checkpoint)[4:]
    with pytest.raises(CheckpointError, match="bad magic"):
        decode_checkpoint(data)


def test_version_mismatch_names_both_versions(toy_checkpoint):
    data = bytearray(encode_checkpoint(toy_checkpoint))
    data[4:8] = struct.pack("<I", 9)
    with pytest.raises(CheckpointError) as info:
        decode_checkpoint(bytes(data))
    assert "version 9" in str(info.value)
    assert f"version {Config.CHECKPOINT_VERSION}" in str(info.value)


@pytest.mark.parametrize("cut", [1, 9, 100])
def test_truncation_detected(toy_checkpoint, cut):
    data = encode_checkpoint(toy_checkpoint)
    with pytest.raises(CheckpointError, match="truncated"):
        decode_checkpoint(data[:-cut])


def test_truncated_inside_header():
    with pytest.raises(CheckpointError, match="truncated"):
        decode_checkpoint(Config.CHECKPOINT_MAGIC + struct.pack("<I", Config.CHECKPOINT_VERSION))


def test_trailing_bytes_detected(toy_checkpoint):
    with pytest.raises(CheckpointError, match="trailing"):
        decode_checkpoint(encode_checkpoint(toy_checkpoint) + b"\x00")


def test_malformed_header():
    body = b"{not json"
    data = Config.CHECKPOINT_MAGIC + struct.pack("<II", Config.CHECKPOINT_VERSION, len(body)) + body
    with pytest.raises(CheckpointError, match="malformed checkpoint header"):
        decode_checkpoint(data)


def test_header_with_invalid_net_config(toy_config):
    header = {"net_config": {**toy_config.to_dict(), "r_max": 1}, "tensor_count": 0}
    with pytest.raises(CheckpointError, match="malformed checkpoint header"):
        decode_checkpoint(raw_header(header))


def test_unknown_tensor_record(toy_config):
    buf = io.BytesIO()
    buf.write(raw_header({"net_config": toy_config.to_dict(), "tensor_count": 1}))
    _write_tensor(buf, "other/x", np.zeros(2))
    with pytest.raises(CheckpointError, match="unknown tensor record"):
        decode_checkpoint(buf.getvalue())


def test_incomplete_moments(toy_config):
    buf = io.BytesIO()
    buf.write(raw_header({"net_config": toy_config.to_dict(), "tensor_count": 1}))
    _write_tensor(buf, "adam.m/cnn.0.w", np.zeros((3, 4)))
    with pytest.raises(CheckpointError, match="incomplete"):
        decode_checkpoint(buf.getvalue())


def test_checkpoint_errors_are_data_errors(tmp_path):
    path = tmp_path / "junk.mpu"
    path.write_bytes(b"junk")
    with pytest.raises(DataFormatError) as info:
        load_checkpoint(path)
    assert str(path) in str(info.value)
