import numpy as np
import pytest
from hypothesis import given, strategies as st

from rnnpool.errors import ShapeError
from rnnpool.tensor import (PatchSpec, TensorMap, byte_size, dtype_name, extract_patch, to_kib,
                            to_mib, write_patch)


def test_zero_padded_corner_patch():
    tmap = TensorMap(np.ones((4, 4, 1), dtype=np.float32))
    out = extract_patch(tmap, PatchSpec(3, 3, 2, 2, "zero"))
    assert out.data[..., 0].tolist() == [[1, 0], [0, 0]]


def test_full_patch_is_copy():
    data = np.arange(24, dtype=np.float32).reshape(2, 4, 3)
    tmap = TensorMap(data)
    out = extract_patch(tmap, PatchSpec(0, 0, 2, 4, "reject"))
    assert np.array_equal(out.data, data)


def test_every_valid_patch_matches_indexing(rng):
    data = rng.standard_normal((8, 8, 3)).astype(np.float32)
    tmap = TensorMap(data)
    for top in range(6):
        for left in range(6):
            got = extract_patch(tmap, PatchSpec(top, left, 3, 3, "reject")).data
            for i in range(3):
                for j in range(3):
                    for k in range(3):
                        assert got[i, j, k] == data[top + i, left + j, k]


def test_reject_policy_raises():
    tmap = TensorMap.zeros(4, 4, 1)
    with pytest.raises(IndexError):
        extract_patch(tmap, PatchSpec(3, 3, 2, 2, "reject"))


def test_invalid_maps_and_specs():
    with pytest.raises(ShapeError):
        TensorMap(np.zeros((0, 3, 1)))
    with pytest.raises(ShapeError):
        TensorMap(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        PatchSpec(0, 0, 0, 2)
    with pytest.raises(ValueError):
        PatchSpec(0, 0, 1, 1, "wrap")


def test_tensormap_is_read_only():
    tmap = TensorMap.zeros(2, 2, 1)
    with pytest.raises(ValueError):
        tmap.data[0, 0, 0] = 1.0


def test_byte_sizes():
    assert byte_size(112, 112, 32, "float32") == 1_605_632
    total = byte_size(112, 112, 32) + byte_size(112, 112, 16)
    assert total == 2_408_448
    assert int(to_mib(total) * 100) == 229      # 2.2969 MiB, truncated to two decimals
    q = byte_size(80, 60, 32, "int8") + byte_size(80, 60, 16, "int8")
    assert q == 230_400
    assert to_kib(q) == 225.0


def test_dtype_aliases():
    assert dtype_name("f32") == "float32"
    assert dtype_name(np.float64) == "float64"
    assert dtype_name("i8") == "int8"
    with pytest.raises(ValueError):
        dtype_name("float16")


@given(st.integers(1, 50), st.integers(1, 50), st.integers(1, 50), st.integers(1, 5))
def test_byte_size_is_linear(h, w, c, k):
    assert byte_size(h * k, w, c) == k * byte_size(h, w, c)
    assert byte_size(h, w * k, c, "int8") == k * byte_size(h, w, c, "int8")
    assert byte_size(h, w, c * k, "float64") == k * byte_size(h, w, c, "float64")


@given(st.integers(-3, 6), st.integers(-3, 6), st.integers(1, 4), st.integers(1, 4))
def test_extract_then_write_back_is_identity(top, left, r, c):
    data = np.arange(5 * 5 * 2, dtype=np.float32).reshape(5, 5, 2)
    tmap = TensorMap(data)
    spec = PatchSpec(top, left, r, c)
    back = write_patch(tmap, spec, extract_patch(tmap, spec))
    assert np.array_equal(back.data, data)
