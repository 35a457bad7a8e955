import struct

import numpy as np
import pytest

from detailnet.checkpoint import MAGIC, Checkpoint, decode, encode, load_checkpoint, save_checkpoint
from detailnet.errors import CorruptionError, FormatError, ShapeError, VersionError
from detailnet.network import NetworkConfig, build_network


@pytest.fixture
def ckpt_bytes(toy_net):
    moments = {"head.weight": (np.full((1, 64, 3, 3), 0.5, np.float32), np.full((1, 64, 3, 3), 2.0, np.float32))}
    ck = Checkpoint(42, b'{"seed": 1}', {n: t.data for n, t in toy_net.params.items()}, moments)
    return encode(ck)


def test_round_trip_bitwise(tmp_path, toy_net):
    moments = {"head.bias": (np.array([1e-3], np.float32), np.array([1e-6], np.float32))}
    path = tmp_path / "w.ckpt"
    save_checkpoint(path, toy_net.params, 17, b"state", moments)
    ck = load_checkpoint(path)
    assert ck.step == 17 and ck.rng_state == b"state"
    assert list(ck.tensors) == list(toy_net.params)
    for name, t in toy_net.params.items():
        assert ck.tensors[name].dtype == t.data.dtype
        assert np.array_equal(ck.tensors[name], t.data), name
    m, v = ck.moments["head.bias"]
    assert np.array_equal(m, moments["head.bias"][0]) and np.array_equal(v, moments["head.bias"][1])
    assert not (tmp_path / "w.ckpt.tmp").exists()


def test_float64_and_scalar_tensors_round_trip():
    ck = Checkpoint(0, b"", {"a": np.arange(6, dtype=np.float64).reshape(2, 3), "s": np.array(3.5)})
    back = decode(encode(ck))
    assert back.tensors["a"].dtype == np.float64 and np.array_equal(back.tensors["a"], ck.tensors["a"])
    assert back.tensors["s"].shape == () and back.tensors["s"] == 3.5


def test_header_layout(ckpt_bytes):
    assert ckpt_bytes[:4] == MAGIC
    version, step = struct.unpack("<IQ", ckpt_bytes[4:16])
    assert (version, step) == (1, 42)


def test_bad_magic(ckpt_bytes):
    with pytest.raises(FormatError):
        decode(b"XXXX" + ckpt_bytes[4:])


def test_version_mismatch(ckpt_bytes):
    data = ckpt_bytes[:4] + struct.pack("<I", 99) + ckpt_bytes[8:]
    with pytest.raises(VersionError):
        decode(data)


@pytest.mark.parametrize("cut", [10, 30, 500, -1])
def test_truncation(ckpt_bytes, cut):
    with pytest.raises(CorruptionError):
        decode(ckpt_bytes[:cut])


def test_bit_flip_detected(ckpt_bytes):
    data = bytearray(ckpt_bytes)
    data[len(data) // 2] ^= 0x01
    with pytest.raises(CorruptionError):
        decode(bytes(data))


def test_trailing_garbage(ckpt_bytes):
    with pytest.raises(CorruptionError):
        decode(ckpt_bytes + b"\0\0\0\0")


def test_mismatched_config_names_tensor(tmp_path, toy_net):
    path = tmp_path / "w.ckpt"
    save_checkpoint(path, toy_net.params, 0)
    other = build_network(NetworkConfig.from_preset("toy", stem_channels=16), 0)
    with pytest.raises(ShapeError, match="stem.conv.weight"):
        load_checkpoint(path).apply_to(other.params)


def test_apply_to_restores_values(tmp_path, toy_net):
    path = tmp_path / "w.ckpt"
    save_checkpoint(path, toy_net.params, 0)
    fresh = build_network(NetworkConfig.from_preset("toy"), seed=99)
    load_checkpoint(path).apply_to(fresh.params)
    assert all(np.array_equal(fresh.params[n].data, toy_net.params[n].data) for n in fresh.params)
