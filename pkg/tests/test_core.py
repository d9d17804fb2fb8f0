import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cpdm.core import (Prng, decode_tensor, elementwise, encode_tensor, gaussian,
                       load_tensor, save_tensor)
from cpdm.errors import FormatError, ShapeError


def test_gaussian_moments():
    x = gaussian(Prng(7, "noise"), [10**6]).astype(np.float64)
    assert abs(x.mean()) <= 0.004
    assert 0.99 <= x.var() <= 1.01


def test_gaussian_deterministic():
    a = gaussian(Prng(7, "noise"), [4, 5])
    b = gaussian(Prng(7, "noise"), [4, 5])
    assert a.dtype == np.float32
    assert a.tobytes() == b.tobytes()


def test_labels_give_independent_streams():
    a = gaussian(Prng(7, "a"), [20000]).astype(np.float64)
    b = gaussian(Prng(7, "b"), [20000]).astype(np.float64)
    assert not np.array_equal(a, b)
    assert abs(np.corrcoef(a, b)[0, 1]) < 4 / np.sqrt(20000)


def test_child_streams_are_stable():
    p = Prng(3, "root")
    assert p.child("x").gaussian([3]).tobytes() == Prng(3, "root/x").gaussian([3]).tobytes()


@pytest.mark.parametrize("shape", [[0], [3, 0], []])
def test_gaussian_rejects_bad_shape(shape):
    with pytest.raises(ShapeError):
        gaussian(Prng(0), shape)


def test_elementwise_examples():
    x = Prng(1).gaussian([3, 4])
    assert np.array_equal(elementwise("add", x, 0), x)
    assert np.array_equal(elementwise("exp", np.zeros((2, 2))), np.ones((2, 2), np.float32))
    assert np.array_equal(elementwise("add", elementwise("scale", x, -1), x), np.zeros_like(x))
    assert elementwise("clamp", x, (-0.1, 0.1)).max() <= np.float32(0.1)
    assert np.array_equal(elementwise("mul", x, x), x * x)


def test_elementwise_shape_mismatch():
    with pytest.raises(ShapeError):
        elementwise("sub", np.zeros((2, 2)), np.zeros((2, 3)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.lists(st.integers(1, 5), min_size=1, max_size=4).map(tuple),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_roundtrip_bit_exact(t):
    out = decode_tensor(encode_tensor(t))
    assert out.shape == t.shape
    assert out.tobytes() == t.tobytes()


def test_save_load_file(tmp_path):
    t = Prng(0).gaussian([2, 3, 4])
    save_tensor(t, tmp_path / "t.cpdt")
    assert load_tensor(tmp_path / "t.cpdt").tobytes() == t.tobytes()


def test_header_layout():
    buf = encode_tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
    assert buf[:4] == b"CPDT"
    assert struct.unpack_from("<HBB2I", buf, 4) == (1, 0, 2, 2, 3)
    assert len(buf) == 4 + 4 + 8 + 24


def test_bad_magic_offset_zero():
    buf = b"XXXX" + encode_tensor(np.zeros(2))[4:]
    with pytest.raises(FormatError) as e:
        decode_tensor(buf)
    assert e.value.offset == 0


def test_bad_version_and_dtype():
    good = bytearray(encode_tensor(np.zeros(2)))
    v = bytearray(good)
    v[4] = 2
    with pytest.raises(FormatError) as e:
        decode_tensor(bytes(v))
    assert e.value.offset == 4
    d = bytearray(good)
    d[6] = 1
    with pytest.raises(FormatError) as e:
        decode_tensor(bytes(d))
    assert e.value.offset == 6


def test_truncated_payload():
    header = b"CPDT" + struct.pack("<HBB2I", 1, 0, 2, 2, 2)
    with pytest.raises(FormatError, match="truncated"):
        decode_tensor(header + b"\0" * 12)


def test_trailing_bytes_rejected():
    with pytest.raises(FormatError):
        decode_tensor(encode_tensor(np.zeros(2)) + b"\0")
