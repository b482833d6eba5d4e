"""
Binary checkpoint format.

Layout (little-endian):

    b"MPU1" | u32 version | u32 header length | header JSON (utf-8)
    then per tensor: u32 name length | name | u32 rank | u64 dims... | float64 payload

The header holds the network config, the step counter, the generator state,
the optimizer step and the run config echo, plus the tensor count so a
truncated file is detected before anything is returned. Tensor names are
``param/<name>``, ``adam.m/<name>`` and ``adam.v/<name>``.
"""
import hashlib
import io
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Dict, Iterator, Optional, Tuple, Union

import numpy as np

from .config import Config
from .errors import CheckpointError, ConfigError
from .net import NetConfig, ParamStore

logger = logging.getLogger(__name__)

PARAM_PREFIX = "param/"
M_PREFIX = "adam.m/"
V_PREFIX = "adam.v/"


@dataclass
class Checkpoint:
    net_config: NetConfig
    params: ParamStore
    step: int = 0
    adam_step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    # np.random.Generator.bit_generator.state
    rng_state: Optional[dict] = None
    run_config: dict = field(default_factory=dict)

    def tensors(self) -> Iterator[Tuple[str, np.ndarray]]:
        for name, t in self.params.items():
            yield PARAM_PREFIX + name, t.data
        for name in self.m:
            yield M_PREFIX + name, self.m[name]
            yield V_PREFIX + name, self.v[name]


def _write_tensor(fh: BinaryIO, name: str, array: np.ndarray):
    encoded = name.encode("utf-8")
    array = np.ascontiguousarray(array, dtype="<f8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<I", array.ndim))
    fh.write(struct.pack(f"<{array.ndim}Q", *array.shape))
    fh.write(array.tobytes())


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    tensors = list(ckpt.tensors())
    header = {
        "net_config": ckpt.net_config.to_dict(),
        "step": ckpt.step,
        "adam_step": ckpt.adam_step,
        "rng_state": ckpt.rng_state,
        "run_config": ckpt.run_config,
        "tensor_count": len(tensors),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(Config.CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", Config.CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(header_bytes)))
    buf.write(header_bytes)
    for name, array in tensors:
        _write_tensor(buf, name, array)
    return buf.getvalue()


def save_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> Path:
    """Write the checkpoint atomically (temporary file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    os.replace(tmp, path)
    logger.debug("saved checkpoint step=%d to %s", ckpt.step, path)
    return path


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what}", str(self.path))
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(data: bytes, path: Union[str, Path] = "<memory>") -> Checkpoint:
    """
    Parse checkpoint bytes; nothing is returned unless the whole file is valid.

    Raises:
        CheckpointError: bad magic, unknown version, malformed header,
            truncated tensor data or trailing bytes
    """
    path = Path(path)
    reader = _Reader(data, path)
    magic = reader.take(4, "magic")
    if magic != Config.CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {Config.CHECKPOINT_MAGIC!r}", str(path))
    (version,) = reader.unpack("<I", "version")
    if version != Config.CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version}; this build reads version {Config.CHECKPOINT_VERSION}",
            str(path),
        )
    (header_len,) = reader.unpack("<I", "header length")
    try:
        header = json.loads(reader.take(header_len, "header").decode("utf-8"))
        net_config = NetConfig.from_dict(header["net_config"])
        count = int(header["tensor_count"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ConfigError) as e:
        raise CheckpointError(f"malformed checkpoint header: {e}", str(path)) from e

    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<I", "tensor name length")
        name = reader.take(name_len, "tensor name").decode("utf-8")
        (rank,) = reader.unpack("<I", f"rank of {name}")
        dims = reader.unpack(f"<{rank}Q", f"shape of {name}")
        size = int(np.prod(dims, dtype=np.int64))
        payload = reader.take(8 * size, f"values of {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
    if reader.pos != len(data):
        raise CheckpointError(f"{len(data) - reader.pos} unexpected trailing bytes", str(path))

    params = ParamStore()
    m, v = {}, {}
    for name, array in tensors.items():
        if name.startswith(PARAM_PREFIX):
            params.add(name[len(PARAM_PREFIX):], array)
        elif name.startswith(M_PREFIX):
            m[name[len(M_PREFIX):]] = array
        elif name.startswith(V_PREFIX):
            v[name[len(V_PREFIX):]] = array
        else:
            raise CheckpointError(f"unknown tensor record {name!r}", str(path))
    if set(m) != set(v):
        raise CheckpointError("optimizer moments are incomplete", str(path))

    return Checkpoint(
        net_config=net_config,
        params=params,
        step=int(header.get("step", 0)),
        adam_step=int(header.get("adam_step", 0)),
        m=m,
        v=v,
        rng_state=header.get("rng_state"),
        run_config=header.get("run_config") or {},
    )


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    ckpt = decode_checkpoint(path.read_bytes(), path)
    logger.debug("loaded checkpoint step=%d from %s (%d parameter tensors)", ckpt.step, path, len(ckpt.params))
    return ckpt


def checkpoint_hash(path: Union[str, Path]) -> str:
    """sha256 of the checkpoint file, for provenance records."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
