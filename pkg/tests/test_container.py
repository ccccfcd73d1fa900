import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tetcnn import container
from tetcnn.container import ContainerError


def _arrays():
    return {"a": np.arange(6, dtype=np.int64).reshape(2, 3), "b": np.linspace(0, 1, 5), "s": np.array(2.5)}


def test_roundtrip(tmp_path):
    p = tmp_path / "x.bin"
    container.save(p, "demo", {"n": 3, "name": "shell", "lam": [1.5, None]}, _arrays())
    kind, version, header, arrays = container.load(p, "demo")
    assert (kind, version) == ("demo", 1)
    assert header == {"n": 3, "name": "shell", "lam": [1.5, None]}
    for k, v in _arrays().items():
        np.testing.assert_array_equal(arrays[k], v)
        assert arrays[k].shape == v.shape


def test_encoding_is_deterministic():
    a = container.encode("demo", {"z": 1, "a": {"y": 2, "b": 3}}, _arrays())
    b = container.encode("demo", {"z": 1, "a": {"b": 3, "y": 2}}, _arrays())
    assert a == b


def test_wrong_kind_rejected(tmp_path):
    p = tmp_path / "x.bin"
    container.save(p, "demo", {}, _arrays())
    with pytest.raises(ContainerError, match="expected a checkpoint"):
        container.load(p, "checkpoint")


def test_missing_file_is_a_container_error(tmp_path):
    with pytest.raises(ContainerError, match="cannot read"):
        container.load(tmp_path / "nope.bin")


def test_truncated_blob():
    with pytest.raises(ContainerError, match="truncated"):
        container.decode(b"short")


@settings(max_examples=40, deadline=None)
@given(position=st.floats(0.0, 1.0, exclude_max=True), flip=st.integers(1, 255))
def test_any_single_byte_corruption_is_detected(position, flip):
    blob = bytearray(container.encode("demo", {"k": [1, 2]}, _arrays()))
    i = int(position * len(blob))
    blob[i] ^= flip
    with pytest.raises(ContainerError):
        container.decode(bytes(blob))


def test_atomic_write_leaves_no_temp_files(tmp_path):
    container.write_atomic(tmp_path / "f.txt", b"one")
    container.write_atomic(tmp_path / "f.txt", b"two")
    assert (tmp_path / "f.txt").read_bytes() == b"two"
    assert [p.name for p in tmp_path.iterdir()] == ["f.txt"]
