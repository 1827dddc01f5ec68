"""Binary checkpoint format.

Layout (little-endian, no padding)::

    b"TSA1"  u32 version(=1)  u32 count
    count x [ u32 name_len, name (utf-8), u32 rank, rank x u32 extent,
              prod(extents) x f64 ]

Besides model tensors a file may carry ``meta.*`` entries (model config,
epoch) and ``adam.*`` entries (optimizer moments and step count).
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"TSA1"
VERSION = 1

CONFIG_KEY = "meta.config"
EPOCH_KEY = "meta.epoch"
ADAM_STEP_KEY = "adam.step"


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class UnknownTensorError(CheckpointError):
    pass


class ExtentMismatchError(CheckpointError):
    pass


class MissingTensorError(CheckpointError):
    pass


def encode_tensors(tensors) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        parts.append(np.ascontiguousarray(a).tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    pos = 0

    def take(nbytes: int, what: str) -> bytes:
        nonlocal pos
        if pos + nbytes > len(buf):
            raise TruncatedCheckpointError(
                f"file ends inside {what} (needs {nbytes} bytes at offset {pos}, size {len(buf)})"
            )
        chunk = buf[pos:pos + nbytes]
        pos += nbytes
        return chunk

    if len(buf) < 4:
        raise TruncatedCheckpointError("file shorter than the magic header")
    if take(4, "magic") != MAGIC:
        raise BadMagicError(f"not a checkpoint: magic is {buf[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this reader handles {VERSION}")
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for i in range(count):
        (nlen,) = struct.unpack("<I", take(4, f"name length of tensor {i}"))
        name = take(nlen, f"name of tensor {i}").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, f"rank of {name}"))
        extents = struct.unpack(f"<{rank}I", take(4 * rank, f"extents of {name}"))
        size = int(np.prod(extents, dtype=np.int64))
        values = np.frombuffer(take(8 * size, f"values of {name}"), dtype="<f8")
        out[name] = values.reshape(extents).astype(np.float64)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after the last tensor")
    return out


def write_tensors(path, tensors) -> None:
    Path(path).write_bytes(encode_tensors(tensors))


def read_tensors(path) -> "OrderedDict[str, np.ndarray]":
    return decode_tensors(Path(path).read_bytes())


def save_checkpoint(params, path, epoch: int | None = None,
                    include_optimizer: bool = False) -> None:
    """Write model tensors (plus config, and optionally epoch and Adam state)."""
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    tensors[CONFIG_KEY] = params.config.as_vector()
    if epoch is not None:
        tensors[EPOCH_KEY] = np.array([float(epoch)])
    for name, t in params.store.items():
        tensors[name] = t.data
    if include_optimizer:
        steps = {st.step for st in params.store.state.values()}
        if len(steps) > 1:
            raise CheckpointError("parameters disagree on their Adam step count")
        tensors[ADAM_STEP_KEY] = np.array([float(steps.pop() if steps else 0)])
        for name in params.store:
            st = params.store.state[name]
            tensors[f"adam.m.{name}"] = st.m
            tensors[f"adam.v.{name}"] = st.v
    write_tensors(path, tensors)


def load_checkpoint(path, config=None):
    """Rebuild :class:`~tsain.model.TsainParams` from a file.

    The architecture comes from the stored config unless ``config`` is
    given, in which case every stored tensor must fit that architecture.
    Returns the params with ``epoch`` set from the file (0 when absent).
    """
    from .model import ModelConfig, init_params

    tensors = read_tensors(path)
    if config is None:
        if CONFIG_KEY not in tensors:
            raise MissingTensorError(f"{CONFIG_KEY} absent and no config supplied")
        config = ModelConfig.from_vector(tensors[CONFIG_KEY])
    params = init_params(config)
    store = params.store
    seen = set()
    adam: dict[str, np.ndarray] = {}
    for name, arr in tensors.items():
        if name in (CONFIG_KEY, EPOCH_KEY):
            continue
        if name.startswith("adam."):
            adam[name] = arr
            continue
        if name not in store:
            raise UnknownTensorError(f"checkpoint tensor {name!r} has no place in this model")
        target = store[name]
        if arr.shape != target.shape:
            raise ExtentMismatchError(
                f"tensor {name!r}: checkpoint extents {arr.shape}, model expects {target.shape}"
            )
        seen.add(name)
    missing = [n for n in store if n not in seen]
    if missing:
        raise MissingTensorError(f"checkpoint lacks {len(missing)} tensors, e.g. {missing[0]!r}")
    for name in adam:
        if name == ADAM_STEP_KEY:
            continue
        base = name[len("adam.m."):]
        if base not in store:
            raise UnknownTensorError(f"optimizer tensor {name!r} refers to an unknown parameter")
        if adam[name].shape != store[base].shape:
            raise ExtentMismatchError(f"optimizer tensor {name!r} has extents {adam[name].shape}")

    for name in seen:
        store[name].data[...] = tensors[name]
    if ADAM_STEP_KEY in adam:
        step = int(adam[ADAM_STEP_KEY][0])
        for name in store:
            st = store.state[name]
            st.step = step
            if f"adam.m.{name}" in adam:
                st.m[...] = adam[f"adam.m.{name}"]
                st.v[...] = adam[f"adam.v.{name}"]
    params.epoch = int(tensors[EPOCH_KEY][0]) if EPOCH_KEY in tensors else 0
    return params
