import io

import numpy as np
import pytest

from core.errors import DataError
from core.tensorio import (
    MAGIC,
    decode_bundle,
    decode_tensor,
    encode_bundle,
    encode_tensor,
    read_bundle,
    read_tensor,
    write_bundle,
    write_tensor,
)


def test_floats_are_stored_as_float32(tmp_path):
    arr = np.linspace(0.0, 1.0, 24).reshape(2, 3, 4)
    write_tensor(tmp_path / "a.cft", arr)
    back = read_tensor(tmp_path / "a.cft")
    assert back.dtype == np.float32
    assert back.shape == (2, 3, 4)
    np.testing.assert_allclose(back, arr, atol=1e-7)


@pytest.mark.parametrize("arr,dtype", [
    (np.array([1, -2, 3], dtype=np.int32), np.int64),
    (np.array([True, False]), np.int64),
    (np.array([0, 255], dtype=np.uint8), np.uint8),
])
def test_integer_codes(arr, dtype):
    back = decode_tensor(io.BytesIO(encode_tensor(arr)))
    assert back.dtype == dtype
    np.testing.assert_array_equal(back, arr.astype(dtype))


def test_header_layout():
    raw = encode_tensor(np.zeros((2, 5), dtype=np.float32))
    assert raw.startswith(MAGIC)
    assert np.frombuffer(raw[8:24], dtype="<u4").tolist() == [1, 2, 2, 5]
    assert raw[24] == 0
    assert len(raw) == 25 + 10 * 4


def test_scalars_and_consecutive_records():
    stream = io.BytesIO(encode_tensor(np.float32(2.5)) + encode_tensor(np.arange(3)))
    first = decode_tensor(stream)
    assert first.shape == () and first == 2.5
    np.testing.assert_array_equal(decode_tensor(stream), [0, 1, 2])
    assert decode_tensor(stream) is None


def test_corrupt_records_are_data_errors(tmp_path):
    good = encode_tensor(np.ones((3, 3)))
    with pytest.raises(DataError):
        decode_tensor(io.BytesIO(b"NOTATENS" + good[8:]))
    with pytest.raises(DataError):
        decode_tensor(io.BytesIO(good[:-3]))
    with pytest.raises(DataError):
        decode_tensor(io.BytesIO(good[:8] + np.array([9], dtype="<u4").tobytes() + good[12:]))
    with pytest.raises(DataError):
        decode_tensor(io.BytesIO(good[:24] + bytes([7]) + good[25:]))
    with pytest.raises(DataError):
        encode_tensor(np.array([1 + 2j]))
    (tmp_path / "empty.cft").write_bytes(b"")
    with pytest.raises(DataError):
        read_tensor(tmp_path / "empty.cft")
    with pytest.raises(DataError):
        read_tensor(tmp_path / "absent.cft")


def test_bundle_keeps_names_order_and_meta(tmp_path):
    tensors = {"w1": np.ones((2, 2)), "counts": np.arange(4), "b1": np.zeros(2)}
    write_bundle(tmp_path / "m.cft", tensors, {"kind": "sample", "steps": 3})
    back, meta = read_bundle(tmp_path / "m.cft")
    assert list(back) == ["w1", "counts", "b1"]
    assert meta == {"kind": "sample", "steps": 3}
    np.testing.assert_array_equal(back["counts"], np.arange(4))


def test_bundle_errors(tmp_path):
    with pytest.raises(DataError):
        decode_bundle(io.BytesIO(encode_tensor(np.ones(3))))
    raw = encode_bundle({"a": np.ones(2), "b": np.ones(3)})
    with pytest.raises(DataError):
        decode_bundle(io.BytesIO(raw[: -len(encode_tensor(np.ones(3)))]))
    bad_index = encode_tensor(np.frombuffer(b"{not json", dtype=np.uint8))
    with pytest.raises(DataError):
        decode_bundle(io.BytesIO(bad_index))
    with pytest.raises(DataError):
        read_bundle(tmp_path / "absent.cft")
