import struct
import zlib

import numpy as np
import pytest

from clipmap.checkpoint import (
    decode_bundle,
    encode_bundle,
    load_bundle,
    load_maps,
    load_model,
    save_bundle,
    save_maps,
    save_model,
)
from clipmap.errors import CheckpointError
from clipmap.mapping import CompressionSpec, init_maps

from conftest import tiny_configs

DTYPES = [np.float64, np.float32, np.int64, np.uint8]


def random_bundle(rng):
    tensors = {}
    for i in range(int(rng.integers(0, 6))):
        dtype = DTYPES[int(rng.integers(0, 4))]
        shape = tuple(int(s) for s in rng.integers(0, 4, int(rng.integers(0, 4))))
        if np.issubdtype(dtype, np.floating):
            arr = rng.normal(size=shape).astype(dtype)
        else:
            arr = rng.integers(0, 200, size=shape).astype(dtype)
        tensors[f"t{i}.{'ü' * (i % 2)}name"] = arr
    return tensors


def test_layout_of_a_known_bundle():
    buf = encode_bundle({"ab": np.array([1.5, -2.0])})
    assert buf[:4] == b"CMAP"
    assert struct.unpack_from("<II", buf, 4) == (1, 1)
    assert struct.unpack_from("<I", buf, 12) == (2,) and buf[16:18] == b"ab"
    code, rank = struct.unpack_from("<BI", buf, 18)
    assert (code, rank) == (1, 1)
    assert struct.unpack_from("<QQ", buf, 23) == (2, 0)
    payload = buf[39:-4]
    assert payload == np.array([1.5, -2.0], dtype="<f8").tobytes()
    assert struct.unpack("<I", buf[-4:])[0] == zlib.crc32(payload)


def test_round_trip_is_bit_exact(rng):
    for _ in range(100):
        tensors = random_bundle(rng)
        back, meta = decode_bundle(encode_bundle(tensors, {"k": 1}))
        assert meta == {"k": 1}
        assert list(back) == list(tensors)
        for name, arr in tensors.items():
            assert back[name].dtype == arr.dtype and back[name].shape == arr.shape
            assert back[name].tobytes() == arr.tobytes()


def test_corrupted_payload_byte_is_detected(rng):
    buf = bytearray(encode_bundle({"w": rng.normal(size=(4, 4)), "b": np.arange(5)}))
    header_len = len(buf) - 4 - (16 * 8 + 5 * 8)
    for pos in range(header_len, len(buf) - 4):
        bad = bytearray(buf)
        bad[pos] ^= 0xFF
        with pytest.raises(CheckpointError, match="CRC"):
            decode_bundle(bytes(bad))


def test_malformed_containers(rng):
    good = encode_bundle({"w": np.ones(3)})
    with pytest.raises(CheckpointError):
        decode_bundle(b"XXXX" + good[4:])
    with pytest.raises(CheckpointError):
        decode_bundle(good[:10])
    with pytest.raises(CheckpointError):
        decode_bundle(good[:4] + struct.pack("<I", 9) + good[8:])
    with pytest.raises(CheckpointError):
        decode_bundle(good[:-8] + good[-4:])


def test_files_and_typed_helpers(tmp_path, tiny_teacher):
    save_bundle(tmp_path / "x.ckpt", {"a": np.arange(3)})
    assert not list(tmp_path.glob("*.tmp"))
    assert np.array_equal(load_bundle(tmp_path / "x.ckpt")[0]["a"], np.arange(3))
    save_model(tmp_path / "m.ckpt", tiny_teacher, role="teacher")
    assert load_model(tmp_path / "m.ckpt").checksum() == tiny_teacher.checksum()
    spec = CompressionSpec.uniform(16, 8, 2, 1)
    maps = init_maps(spec, *tiny_configs(), method="random", seed=2)
    save_maps(tmp_path / "maps.ckpt", maps, spec)
    back, back_spec = load_maps(tmp_path / "maps.ckpt")
    assert back_spec == spec
    assert all(np.array_equal(v, back.state_dict()[k]) for k, v in maps.state_dict().items())
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "maps.ckpt")
    with pytest.raises(CheckpointError):
        load_bundle(tmp_path / "missing.ckpt")
