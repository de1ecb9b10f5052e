"""GDNV container: roundtrip fidelity and malformed-input rejection."""

import struct

import numpy as np
import pytest

from ghostvlad.checkpoint import (
    MAGIC,
    VERSION,
    CheckpointError,
    array_to_text,
    load_arrays,
    save_arrays,
    text_to_array,
)


def test_roundtrip_bit_identical(tmp_path):
    rng = np.random.default_rng(11)
    arrays = {
        "conv.weight": rng.normal(size=(4, 3, 3, 3)).astype(np.float32),
        "bn.gamma": rng.normal(size=(4,)).astype(np.float32),
        "scalarish": np.float32(2.5).reshape(()),
        "empty.rank1": np.zeros((0,), dtype=np.float32),
    }
    path = tmp_path / "m.gdnv"
    save_arrays(path, arrays)
    back = load_arrays(path)
    assert list(back) == list(arrays)
    for name, original in arrays.items():
        assert back[name].dtype == np.float32
        assert back[name].shape == original.shape
        assert back[name].tobytes() == np.ascontiguousarray(original).tobytes()


def test_save_is_deterministic_for_same_dict(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.ones(3, np.float32)}
    p1, p2 = tmp_path / "1.gdnv", tmp_path / "2.gdnv"
    save_arrays(p1, arrays)
    save_arrays(p2, dict(arrays))
    assert p1.read_bytes() == p2.read_bytes()


def test_header_fields(tmp_path):
    path = tmp_path / "m.gdnv"
    save_arrays(path, {"x": np.zeros((2, 5), np.float32)})
    raw = path.read_bytes()
    assert raw[:4] == MAGIC == b"GDNV"
    assert struct.unpack_from("<I", raw, 4)[0] == VERSION == 1
    name_len = struct.unpack_from("<I", raw, 8)[0]
    assert raw[12 : 12 + name_len] == b"x"
    rank_off = 12 + name_len
    assert struct.unpack_from("<I", raw, rank_off)[0] == 2
    assert struct.unpack_from("<2Q", raw, rank_off + 4) == (2, 5)
    assert raw[rank_off + 4 + 16] == 0  # dtype tag: float32


def test_float64_input_is_stored_as_float32(tmp_path):
    path = tmp_path / "m.gdnv"
    save_arrays(path, {"x": np.array([1.0, 2.0], dtype=np.float64)})
    back = load_arrays(path)["x"]
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, np.array([1.0, 2.0], np.float32))


def test_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.gdnv"
    path.write_bytes(b"NOPE" + struct.pack("<I", 1))
    with pytest.raises(CheckpointError, match="not a GDNV"):
        load_arrays(path)


def test_rejects_bad_version(tmp_path):
    path = tmp_path / "bad.gdnv"
    path.write_bytes(MAGIC + struct.pack("<I", 9))
    with pytest.raises(CheckpointError, match="version"):
        load_arrays(path)


def test_rejects_truncation(tmp_path):
    good = tmp_path / "good.gdnv"
    save_arrays(good, {"x": np.ones((8, 8), np.float32)})
    raw = good.read_bytes()
    for cut in (6, 10, len(raw) - 1):
        bad = tmp_path / f"cut{cut}.gdnv"
        bad.write_bytes(raw[:cut])
        with pytest.raises(CheckpointError, match="truncated|not a GDNV"):
            load_arrays(bad)


def test_rejects_unknown_dtype_tag(tmp_path):
    good = tmp_path / "good.gdnv"
    save_arrays(good, {"x": np.ones(2, np.float32)})
    raw = bytearray(good.read_bytes())
    # tag byte sits after magic+version+name_len+name+rank+dims
    tag_offset = 8 + 4 + 1 + 4 + 8
    assert raw[tag_offset] == 0
    raw[tag_offset] = 7
    bad = tmp_path / "bad.gdnv"
    bad.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="dtype tag"):
        load_arrays(bad)


def test_rejects_duplicate_names(tmp_path):
    good = tmp_path / "good.gdnv"
    save_arrays(good, {"x": np.ones(2, np.float32)})
    raw = good.read_bytes()
    bad = tmp_path / "dup.gdnv"
    bad.write_bytes(raw + raw[8:])  # append the same record again
    with pytest.raises(CheckpointError, match="duplicate"):
        load_arrays(bad)


def test_text_tunnel_roundtrip():
    for text in ("q_0003", "place-12/view 4", "naïve-ünïcode", ""):
        arr = text_to_array(text)
        assert arr.dtype == np.float32
        assert array_to_text(arr) == text


def test_text_tunnel_survives_container(tmp_path):
    ids = "\n".join(f"img_{i:04d}" for i in range(20))
    path = tmp_path / "ids.gdnv"
    save_arrays(path, {"index.ids": text_to_array(ids)})
    assert array_to_text(load_arrays(path)["index.ids"]) == ids
