import beartype  # to trigger the runtime typechecking
import numpy as np
import pytest

from temporal_lattice.datatypes import PointCloud
from temporal_lattice.errors import DataFormatError
from temporal_lattice.lattice import SparseLattice
from temporal_lattice.lattice_ops import distribute
from temporal_lattice.snapshot import (
    decode_snapshot,
    encode_snapshot,
    load_fixture,
    load_snapshot,
    save_fixture,
    save_snapshot,
)


def test_snapshot_layout_is_little_endian_header_keys_values():
    keys = np.array([[0, 0, 0, 0], [3, -1, -1, -1]])
    values = np.array([[1.5, -2.0], [0.25, 4.0]])
    payload = encode_snapshot(keys, values)
    assert len(payload) == 24 + 2 * 4 * 4 + 2 * 2 * 4
    assert np.frombuffer(payload[:24], dtype="<i8").tolist() == [3, 2, 2]
    assert np.frombuffer(payload[24:56], dtype="<i4").tolist() == [0, 0, 0, 0, 3, -1, -1, -1]
    assert np.frombuffer(payload[56:], dtype="<f4").tolist() == [1.5, -2.0, 0.25, 4.0]


def test_snapshot_file_preserves_row_order(tmp_path, rng):
    lattice = SparseLattice(dim=3)
    distribute(PointCloud(positions=rng.normal(scale=2.0, size=(40, 3))), lattice)
    lattice.values = rng.normal(size=(len(lattice), 3))
    save_snapshot(tmp_path / "lattice.bin", lattice)
    loaded = load_snapshot(tmp_path / "lattice.bin")
    assert np.array_equal(loaded.keys, lattice.keys)
    assert np.array_equal(loaded.values, lattice.values.astype(np.float32))
    assert loaded.lookup(tuple(lattice.keys[7])) == 7


def test_truncated_snapshot_reports_offset():
    payload = encode_snapshot(np.zeros((3, 4), dtype=np.int64), np.ones((3, 2)))
    with pytest.raises(DataFormatError) as excinfo:
        decode_snapshot(payload[:-3], path="broken.bin")
    assert excinfo.value.path == "broken.bin"
    assert excinfo.value.offset is not None
    with pytest.raises(DataFormatError):
        decode_snapshot(payload[:10])


def test_operator_fixture_roundtrip(tmp_path, rng):
    arrays = {"weight": rng.normal(size=(9, 2, 3)), "bias": np.zeros(3), "logits": rng.normal(size=(5, 7))}
    directory = save_fixture(tmp_path, "conv", arrays, manifest={"op": "lattice_convolution"})
    loaded, document = load_fixture(directory)
    assert document["op"] == "lattice_convolution"
    for name, array in arrays.items():
        assert loaded[name].shape == array.shape
        assert np.array_equal(loaded[name], array.astype(np.float32))
