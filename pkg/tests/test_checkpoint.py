import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tsain.checkpoint import (
    BadMagicError, CheckpointError, ExtentMismatchError, MissingTensorError, TruncatedCheckpointError,
    UnknownTensorError, VersionMismatchError, decode_tensors, encode_tensors, load_checkpoint,
    read_tensors, save_checkpoint, write_tensors,
)
from tsain.model import ModelConfig, init_params, tsain_forward
from tsain.numerics import Tensor4, no_grad

SMALL = ModelConfig(channels=4, k1=1, k2=1, rsab_count=1, drb_count=1, pyramid_levels=2)


def test_byte_layout():
    buf = encode_tensors({"ab": np.array([[1.5, -2.0]])})
    expected = (b"TSA1" + struct.pack("<III", 1, 1, 2) + b"ab" + struct.pack("<III", 2, 1, 2)
                + struct.pack("<2d", 1.5, -2.0))
    assert buf == expected


@settings(max_examples=30, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=8),
                       st.lists(st.floats(allow_nan=False, width=64), min_size=0, max_size=6),
                       max_size=4))
def test_encode_decode_roundtrip(d):
    tensors = {k: np.array(v, dtype=float) for k, v in d.items()}
    back = decode_tensors(encode_tensors(tensors))
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].tobytes() == tensors[k].tobytes()


def test_model_roundtrip_bit_exact(tmp_path, rng):
    params = init_params(SMALL, seed=3)
    for _, t in params.store.items():
        t.data[...] = rng.normal(size=t.data.shape)
    path = tmp_path / "m.ckpt"
    save_checkpoint(params, path, epoch=4)
    back = load_checkpoint(path)
    assert back.config == SMALL and back.epoch == 4
    for name, t in params.store.items():
        assert back.store[name].data.tobytes() == t.data.tobytes()
    i0 = Tensor4(rng.uniform(size=(1, 1, 8, 8)))
    i2 = Tensor4(rng.uniform(size=(1, 1, 8, 8)))
    with no_grad():
        assert tsain_forward(i0, i2, params).data.tobytes() == tsain_forward(i0, i2, back).data.tobytes()
    save_checkpoint(back, tmp_path / "again.ckpt", epoch=4)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_optimizer_state_roundtrip(tmp_path):
    params = init_params(SMALL)
    for name, t in params.store.items():
        st_ = params.store.state[name]
        st_.m[...] = 0.25
        st_.v[...] = 0.5
        st_.step = 9
    save_checkpoint(params, tmp_path / "o.ckpt", include_optimizer=True)
    back = load_checkpoint(tmp_path / "o.ckpt")
    for name in params.store:
        assert back.store.state[name].step == 9
        assert np.all(back.store.state[name].m == 0.25)


@pytest.fixture
def saved(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(init_params(SMALL), path)
    return path


def test_bad_magic(saved):
    saved.write_bytes(b"XXXX" + saved.read_bytes()[4:])
    with pytest.raises(BadMagicError):
        load_checkpoint(saved)


def test_version(saved):
    raw = saved.read_bytes()
    saved.write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(VersionMismatchError):
        load_checkpoint(saved)


@pytest.mark.parametrize("cut", [2, 10, 100, -1])
def test_truncated(saved, cut):
    raw = saved.read_bytes()
    saved.write_bytes(raw[:cut])
    with pytest.raises(TruncatedCheckpointError):
        load_checkpoint(saved)


def test_trailing_bytes(saved):
    saved.write_bytes(saved.read_bytes() + b"\0")
    with pytest.raises(CheckpointError):
        load_checkpoint(saved)


def test_unknown_tensor(saved):
    t = read_tensors(saved)
    t["bogus.weight"] = np.zeros(3)
    write_tensors(saved, t)
    with pytest.raises(UnknownTensorError, match="bogus"):
        load_checkpoint(saved)


def test_missing_tensor(saved):
    t = read_tensors(saved)
    del t["recon.tail.bias"]
    write_tensors(saved, t)
    with pytest.raises(MissingTensorError):
        load_checkpoint(saved)


def test_extent_mismatch_names_tensor(saved):
    with pytest.raises(ExtentMismatchError, match="extract.head.weight"):
        load_checkpoint(saved, ModelConfig(channels=5, k1=1, k2=1, rsab_count=1, drb_count=1, pyramid_levels=2))


def test_distinct_error_types():
    kinds = {BadMagicError, VersionMismatchError, TruncatedCheckpointError, UnknownTensorError,
             ExtentMismatchError}
    assert len(kinds) == 5 and all(issubclass(k, CheckpointError) for k in kinds)
