import beartype  # to trigger the runtime typechecking
import numpy as np
import pytest
from loguru import logger

from temporal_lattice.datatypes import PointCloud
from temporal_lattice.errors import InvariantViolation, ShapeError
from temporal_lattice.lattice import (
    SparseLattice,
    all_neighbor_keys,
    elevate,
    elevate_many,
    neighbor_key,
    sigma_vector,
    simplex_keys_and_weights,
)
from temporal_lattice.lattice_ops import distribute


def _documented_basis(d: int) -> np.ndarray:
    """Basis written out element by element, independent of the library helper."""
    basis = np.zeros((d + 1, d))
    for i in range(d):
        s = (d + 1) * np.sqrt(2.0 / 3.0) / np.sqrt((i + 1) * (i + 2))
        for row in range(d + 1):
            if row <= i:
                basis[row, i] = s
            elif row == i + 1:
                basis[row, i] = -(i + 1) * s
    return basis


# --- Elevation ---


def test_elevate_origin_maps_to_origin():
    assert np.array_equal(elevate(np.zeros(3), np.full(3, 0.6)), np.zeros(4))


def test_elevate_lands_in_hyperplane(rng):
    elevated = elevate_many(rng.normal(scale=20.0, size=(500, 3)), 0.6)
    assert np.abs(elevated.sum(axis=1)).max() < 1e-9


def test_elevate_matches_basis_product():
    p = np.array([1.0, 2.0, 3.0])
    expected = _documented_basis(3) @ p
    assert np.allclose(elevate(p, np.ones(3)), expected, atol=1e-9)


def test_elevate_scales_before_elevating():
    p = np.array([0.3, -1.2, 2.4])
    assert np.allclose(elevate(p, 0.6), _documented_basis(3) @ (p / 0.6), atol=1e-9)


def test_elevate_rejects_bad_input():
    with pytest.raises(InvariantViolation):
        elevate(np.array([0.0, np.nan, 1.0]), 0.6)
    with pytest.raises(InvariantViolation):
        elevate(np.zeros(3), np.array([0.6, 0.0, 0.6]))


# --- Enclosing simplex ---


@pytest.mark.parametrize("point", [(0, 0, 0, 0), (4, -4, 0, 0), (8, 0, -4, -4)])
def test_remainder_zero_point_gets_full_weight(point):
    lattice = SparseLattice(dim=3)
    footprint = lattice.find_enclosing_simplex(np.array(point, dtype=float), allow_insert=True)
    corner = [tuple(k) for k in footprint.keys].index(tuple(point))
    assert footprint.barycentric[corner] == pytest.approx(1.0, abs=1e-9)
    others = np.delete(footprint.barycentric, corner)
    assert np.allclose(others, 0.0, atol=1e-9)


def test_simplex_keys_and_weights_properties(rng):
    elevated = elevate_many(rng.normal(scale=5.0, size=(300, 3)), 1.0)
    keys, bary = simplex_keys_and_weights(elevated)
    assert keys.shape == (300, 4, 4)
    assert np.all(keys.sum(axis=2) == 0)
    assert np.all(bary >= -1e-12)
    assert np.abs(bary.sum(axis=1) - 1.0).max() < 1e-9
    # Corner r is a remainder-r point: every coordinate is congruent to r mod d+1
    for r in range(4):
        assert np.all(np.mod(keys[:, r, :], 4) == r)


def test_barycentric_weights_solve_the_vertex_basis(rng):
    for _ in range(20):
        x = elevate(rng.normal(scale=3.0, size=3), 1.0)
        keys, bary = simplex_keys_and_weights(x[None, :])
        corners = keys[0].astype(float)
        system = np.vstack([corners.T, np.ones((1, 4))])
        solved, *_ = np.linalg.lstsq(system, np.append(x, 1.0), rcond=None)
        assert np.allclose(bary[0], solved, atol=1e-9)


def test_find_enclosing_simplex_reports_absent_corners():
    lattice = SparseLattice(dim=3)
    footprint = lattice.find_enclosing_simplex(elevate(np.array([0.1, 0.2, 0.3]), 0.6))
    assert np.all(footprint.vertex_indices == -1)
    assert len(lattice) == 0
    inserted = lattice.find_enclosing_simplex(elevate(np.array([0.1, 0.2, 0.3]), 0.6), allow_insert=True)
    assert sorted(inserted.vertex_indices.tolist()) == [0, 1, 2, 3]


def test_find_enclosing_simplex_shape_check():
    with pytest.raises(ShapeError):
        SparseLattice(dim=3).find_enclosing_simplex(np.zeros(3))


# --- Neighbors ---


def test_neighbor_key_offset_convention():
    assert neighbor_key((0, 0, 0, 0), 0, 1) == (3, -1, -1, -1)
    assert neighbor_key((0, 0, 0, 0), 2, -1) == (1, 1, -3, 1)


def test_one_hop_neighborhood_has_eight_keys():
    keys = all_neighbor_keys((0, 0, 0, 0))
    assert len(keys) == 8
    assert len(set(keys)) == 8
    assert all(sum(k) == 0 for k in keys)


def test_neighbor_offsets_are_inverses(rng):
    for _ in range(10):
        key = tuple(int(c) for c in rng.integers(-10, 10, size=3))
        key = key + (-sum(key),)
        for axis in range(4):
            assert neighbor_key(neighbor_key(key, axis, 1), axis, -1) == key


def test_neighbor_table_is_symmetric(rng):
    lattice = SparseLattice(dim=3, sigma=1.0)
    distribute(PointCloud(positions=rng.uniform(-2, 2, size=(80, 3))), lattice)
    table = lattice.neighbor_table()
    assert table.shape == (len(lattice), 8)
    for v in range(len(lattice)):
        for column, u in enumerate(table[v]):
            if u >= 0:
                assert table[u, column ^ 1] == v


def test_neighbor_table_grows_with_the_lattice(rng):
    lattice = SparseLattice(dim=3, sigma=1.0)
    earlier = []
    for _ in range(4):
        distribute(PointCloud(positions=rng.uniform(-3, 3, size=(40, 3))), lattice)
        table = lattice.neighbor_table()
        earlier.append((table, table.copy()))
    rebuilt = SparseLattice.from_keys(lattice.keys, sigma=1.0).neighbor_table()
    assert np.array_equal(lattice.neighbor_table(), rebuilt)
    assert lattice.neighbor_table() is lattice.neighbor_table()
    for table, snapshot in earlier:
        assert np.array_equal(table, snapshot)
        assert table.max() < table.shape[0]
    logger.info(f"✓ table extended over {len(earlier)} stages to {len(lattice)} rows")


def test_keys_stay_valid_across_buffer_growth():
    lattice = SparseLattice(dim=3)
    lattice.lookup_or_insert((0, 0, 0, 0))
    first = lattice.keys
    for i in range(1, 40):
        lattice.lookup_or_insert((3 * i, -i, -i, -i))
    assert np.array_equal(first, [[0, 0, 0, 0]])
    assert lattice.keys.shape == (40, 4)
    assert not lattice.keys.flags.writeable


# --- Per-axis scale ---


def test_sigma_vector_broadcasts_a_scalar():
    assert np.array_equal(sigma_vector(0.5, 3), [0.5, 0.5, 0.5])
    assert np.array_equal(sigma_vector([0.5, 0.5, 1.0], 3), [0.5, 0.5, 1.0])


@pytest.mark.parametrize("sigma,error", [([0.5, 1.0], ShapeError), ([0.5, 0.0, 1.0], InvariantViolation), (-1.0, InvariantViolation)])
def test_sigma_vector_rejects_bad_scales(sigma, error):
    with pytest.raises(error):
        sigma_vector(sigma, 3)


def test_per_axis_sigma_elevates_each_axis():
    point = np.array([0.3, -0.4, 1.2])
    assert np.allclose(elevate(point, [0.5, 0.5, 2.0]), elevate(point / [0.5, 0.5, 2.0], 1.0))


# --- Storage ---


def test_lookup_or_insert_is_idempotent():
    lattice = SparseLattice(dim=3)
    assert lattice.lookup_or_insert((0, 0, 0, 0)) == 0
    assert lattice.lookup_or_insert((0, 0, 0, 0)) == 0
    assert len(lattice) == 1
    assert lattice.values.shape == (1, 0)


def test_lookup_or_insert_appends_in_call_order():
    lattice = SparseLattice(dim=3, value_dim=2)
    keys = [(3, -1, -1, -1), (0, 0, 0, 0), (-3, 1, 1, 1)]
    assert [lattice.lookup_or_insert(k) for k in keys] == [0, 1, 2]
    assert np.array_equal(lattice.values, np.zeros((3, 2)))
    assert lattice.lookup((1, 1, 1, 1)) == -1


def test_lookup_or_insert_rejects_off_hyperplane_key():
    with pytest.raises(InvariantViolation):
        SparseLattice(dim=3).lookup_or_insert((1, 0, 0, 0))


def test_index_assignment_is_deterministic(rng):
    positions = rng.normal(scale=3.0, size=(200, 3))
    first, second = SparseLattice(dim=3), SparseLattice(dim=3)
    distribute(PointCloud(positions=positions), first)
    distribute(PointCloud(positions=positions), second)
    assert first.keys.tobytes() == second.keys.tobytes()


def test_rebuilding_from_keys_reproduces_indices(rng):
    lattice = SparseLattice(dim=3)
    distribute(PointCloud(positions=rng.normal(size=(50, 3))), lattice)
    rebuilt = SparseLattice.from_keys(lattice.keys)
    assert np.array_equal(rebuilt.lookup_many(lattice.keys), np.arange(len(lattice)))


def test_shared_point_maps_to_same_simplex_across_clouds(rng):
    lattice = SparseLattice(dim=3)
    shared = rng.normal(scale=2.0, size=(10, 3))
    first = distribute(PointCloud(positions=np.vstack([shared, rng.normal(size=(20, 3))])), lattice)
    before = len(lattice)
    second = distribute(PointCloud(positions=np.vstack([rng.normal(scale=4.0, size=(30, 3)), shared])), lattice)
    assert len(lattice) >= before
    assert np.array_equal(first.simplex_index[:10], second.simplex_index[-10:])


def test_all_keys_sum_to_zero_after_random_inserts(rng):
    lattice = SparseLattice(dim=3)
    for _ in range(5):
        distribute(PointCloud(positions=rng.normal(scale=6.0, size=(100, 3))), lattice)
    assert np.all(lattice.keys.sum(axis=1) == 0)
    logger.info(f"✓ {len(lattice)} keys on the hyperplane")


def test_empty_cloud_gives_empty_lattice():
    lattice = SparseLattice(dim=3)
    bags = distribute(PointCloud(positions=np.zeros((0, 3))), lattice)
    assert len(lattice) == 0
    assert bags.simplex_index.shape == (0, 4)


def test_duplicate_points_contribute_twice():
    lattice = SparseLattice(dim=3)
    bags = distribute(PointCloud(positions=np.array([[0.2, 0.1, 0.4], [0.2, 0.1, 0.4]])), lattice)
    assert len(lattice) == 4
    assert np.array_equal(bags.counts(), np.full(4, 2))
