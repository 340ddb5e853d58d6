import beartype  # to trigger the runtime typechecking
import numpy as np
import pytest

from temporal_lattice import autodiff as ad
from temporal_lattice.datatypes import PointCloud
from temporal_lattice.errors import ShapeError
from temporal_lattice.lattice import SparseLattice, all_neighbor_keys, elevate_many, simplex_keys_and_weights
from temporal_lattice.lattice_ops import (
    ConvParams,
    LatticeHierarchy,
    LinearParams,
    coarse_keys,
    deform_slice,
    distribute,
    downsample,
    downsample_lattice,
    lattice_convolution,
    pointnet_aggregate,
    resnet_block,
    slice_values,
    upsample,
)


def _cloud(rng, points, spread=2.0, features=1):
    return PointCloud(
        positions=rng.uniform(-spread, spread, size=(points, 3)),
        features=rng.uniform(0.0, 1.0, size=(points, features)),
    )


def _linear(weight, bias):
    return LinearParams(ad.parameter(np.asarray(weight, dtype=float)), ad.parameter(np.asarray(bias, dtype=float)))


def _conv(weight, bias):
    return ConvParams(ad.parameter(np.asarray(weight, dtype=float)), ad.parameter(np.asarray(bias, dtype=float)))


def _relu(x):
    return np.maximum(x, 0.0)


def _brute_force_conv(values, lattice, weight, bias, preactivate=True):
    x = _relu(values) if preactivate else values
    out = np.zeros((len(lattice), weight.shape[2]))
    for v, key in enumerate(lattice.keys):
        out[v] = bias + x[v] @ weight[0]
        for tap, neighbor in enumerate(all_neighbor_keys(tuple(key)), start=1):
            row = lattice.lookup(neighbor)
            if row >= 0:
                out[v] += x[row] @ weight[tap]
    return out


# --- Distribute ---


def test_single_point_creates_one_simplex():
    lattice = SparseLattice(dim=3)
    bags = distribute(PointCloud(positions=np.array([[0.3, -0.2, 0.7]]), features=np.ones((1, 1))), lattice)
    assert len(lattice) == 4
    assert np.array_equal(bags.counts(), np.ones(4))


def test_every_point_lands_in_d_plus_one_bags(rng):
    lattice = SparseLattice(dim=3)
    bags = distribute(_cloud(rng, 37), lattice)
    assert bags.vertex_index.shape == (37 * 4,)
    assert np.array_equal(np.bincount(bags.point_index), np.full(37, 4))
    assert bags.counts().sum() == 37 * 4


def test_identical_clouds_give_identical_bags(rng):
    cloud = _cloud(rng, 25)
    lattice = SparseLattice(dim=3)
    first = distribute(cloud, lattice)
    count = len(lattice)
    second = distribute(cloud, lattice)
    assert len(lattice) == count
    pairs = lambda bags: set(zip(bags.point_index.tolist(), bags.vertex_index.tolist()))  # noqa: E731
    assert pairs(first) == pairs(second)


def test_record_offsets_are_point_minus_vertex(rng):
    lattice = SparseLattice(dim=3, sigma=1.0)
    cloud = _cloud(rng, 5)
    bags = distribute(cloud, lattice)
    vertex_positions = lattice.vertex_positions()
    expected = cloud.positions[bags.point_index] - vertex_positions[bags.vertex_index]
    assert np.allclose(bags.offsets, expected)


# --- PointNet ---


def test_pointnet_singleton_bag_is_the_embedding(float64):
    lattice = SparseLattice(dim=3)
    bags = distribute(PointCloud(positions=np.array([[0.1, 0.2, 0.3]]), features=np.array([[0.5]])), lattice)
    params = _linear(np.arange(8.0).reshape(4, 2) / 10.0, [0.1, -0.1])
    out = pointnet_aggregate(bags, params).data
    records = np.concatenate([bags.offsets, bags.features], axis=1)
    assert np.allclose(out[bags.vertex_index], records @ params.weight.data + params.bias.data)


def test_pointnet_duplicated_records_change_nothing(float64, rng):
    lattice = SparseLattice(dim=3)
    bags = distribute(_cloud(rng, 12), lattice)
    params = _linear(rng.normal(size=(4, 3)), rng.normal(size=3))
    doubled = bags._replace(
        point_index=np.tile(bags.point_index, 2),
        vertex_index=np.tile(bags.vertex_index, 2),
        offsets=np.tile(bags.offsets, (2, 1)),
        features=np.tile(bags.features, (2, 1)),
    )
    assert np.array_equal(pointnet_aggregate(bags, params).data, pointnet_aggregate(doubled, params).data)


def test_pointnet_matches_explicit_max_loop(float64, rng):
    lattice = SparseLattice(dim=3)
    bags = distribute(_cloud(rng, 3, spread=0.3), lattice)
    params = _linear(rng.normal(size=(4, 5)), rng.normal(size=5))
    out = pointnet_aggregate(bags, params).data
    for v in range(len(lattice)):
        embeddings = [
            np.concatenate([bags.offsets[r], bags.features[r]]) @ params.weight.data + params.bias.data
            for r in np.flatnonzero(bags.vertex_index == v)
        ]
        assert np.allclose(out[v], np.max(embeddings, axis=0))


# --- Convolution ---


def test_center_identity_kernel_is_relu(float64, rng):
    lattice = SparseLattice(dim=3)
    distribute(_cloud(rng, 20), lattice)
    weight = np.zeros((9, 3, 3))
    weight[0] = np.eye(3)
    values = rng.normal(size=(len(lattice), 3))
    out = lattice_convolution(ad.constant(values), lattice, _conv(weight, np.zeros(3)))
    assert np.allclose(out.data, _relu(values))


def test_isolated_vertex_only_sees_its_center_tap(float64, rng):
    lattice = SparseLattice(dim=3)
    lattice.lookup_or_insert((0, 0, 0, 0))
    weight = rng.normal(size=(9, 2, 2))
    values = np.array([[0.5, -1.0]])
    out = lattice_convolution(ad.constant(values), lattice, _conv(weight, [0.1, 0.2]))
    assert np.allclose(out.data[0], _relu(values[0]) @ weight[0] + [0.1, 0.2])


def test_convolution_matches_brute_force_loop(float64, rng):
    lattice = SparseLattice(dim=3, sigma=1.0)
    distribute(_cloud(rng, 6, spread=1.5), lattice)
    assert len(lattice) >= 5
    weight, bias = rng.normal(size=(9, 3, 4)), rng.normal(size=4)
    values = rng.normal(size=(len(lattice), 3))
    out = lattice_convolution(ad.constant(values), lattice, _conv(weight, bias))
    assert np.allclose(out.data, _brute_force_conv(values, lattice, weight, bias))


def test_convolution_is_linear_without_preactivation(float64, rng):
    lattice = SparseLattice(dim=3)
    distribute(_cloud(rng, 30), lattice)
    params = _conv(rng.normal(size=(9, 2, 3)), np.zeros(3))
    x, y = rng.normal(size=(len(lattice), 2)), rng.normal(size=(len(lattice), 2))

    def f(v):
        return lattice_convolution(ad.constant(v), lattice, params, preactivate=False).data

    assert np.allclose(f(2.0 * x - 3.0 * y), 2.0 * f(x) - 3.0 * f(y), atol=1e-6)


def test_convolution_rejects_mismatches(rng):
    lattice = SparseLattice(dim=3)
    distribute(_cloud(rng, 5), lattice)
    values = ad.constant(np.zeros((len(lattice), 2)))
    with pytest.raises(ShapeError):
        lattice_convolution(values, lattice, _conv(np.zeros((9, 3, 3)), np.zeros(3)))
    with pytest.raises(ShapeError):
        lattice_convolution(values, lattice, _conv(np.zeros((7, 2, 3)), np.zeros(3)))
    with pytest.raises(ShapeError):
        lattice_convolution(ad.constant(np.zeros((1, 2))), lattice, _conv(np.zeros((9, 2, 3)), np.zeros(3)))


# --- ResNet ---


def test_resnet_with_zero_kernels_is_identity(float64, rng):
    lattice = SparseLattice(dim=3)
    distribute(_cloud(rng, 15), lattice)
    values = rng.normal(size=(len(lattice), 4))
    zero = _conv(np.zeros((9, 4, 4)), np.zeros(4))
    out = resnet_block(ad.constant(values), lattice, zero, zero)
    assert out.shape == values.shape
    assert np.array_equal(out.data, values)


def test_resnet_composes_two_preactivated_convolutions(float64, rng):
    lattice = SparseLattice(dim=3)
    distribute(_cloud(rng, 10), lattice)
    w1, b1, w2, b2 = rng.normal(size=(9, 3, 3)), rng.normal(size=3), rng.normal(size=(9, 3, 3)), rng.normal(size=3)
    values = rng.normal(size=(len(lattice), 3))
    out = resnet_block(ad.constant(values), lattice, _conv(w1, b1), _conv(w2, b2))
    hidden = _brute_force_conv(values, lattice, w1, b1)
    assert np.allclose(out.data, values + _brute_force_conv(hidden, lattice, w2, b2))


def test_resnet_rejects_channel_change(rng):
    lattice = SparseLattice(dim=3)
    distribute(_cloud(rng, 5), lattice)
    values = ad.constant(np.zeros((len(lattice), 2)))
    with pytest.raises(ShapeError):
        resnet_block(values, lattice, _conv(np.zeros((9, 2, 3)), np.zeros(3)), _conv(np.zeros((9, 3, 2)), np.zeros(2)))


# --- Resolution changes ---


def test_origin_vertex_coarsens_to_origin():
    fine = SparseLattice(dim=3)
    fine.lookup_or_insert((0, 0, 0, 0))
    coarse, parents = downsample_lattice(fine)
    assert coarse.keys.tolist() == [[0, 0, 0, 0]]
    assert parents.tolist() == [0]


def test_doubled_keys_coarsen_to_their_half(rng):
    lattice = SparseLattice(dim=3)
    distribute(_cloud(rng, 3, spread=1.0), lattice)
    keys = lattice.keys[:10]
    assert np.array_equal(coarse_keys(2 * keys), keys)


def test_coarse_lattice_never_outgrows_fine(rng):
    for _ in range(5):
        fine = SparseLattice(dim=3)
        distribute(_cloud(rng, 60, spread=4.0), fine)
        coarse, parents = downsample_lattice(fine)
        assert len(coarse) <= len(fine)
        assert np.all(coarse.keys.sum(axis=1) == 0)
        # Each parent is a corner of the simplex enclosing the halved fine key
        corners, _ = simplex_keys_and_weights(fine.keys / 2.0)
        parent_keys = coarse.keys[parents]
        assert all(any(np.array_equal(p, c) for c in cs) for p, cs in zip(parent_keys, corners))


def test_downsample_then_upsample_keeps_a_constant_field(float64, rng):
    hierarchy = LatticeHierarchy(dim=3, sigma=0.6, levels=1)
    distribute(_cloud(rng, 80, spread=3.0), hierarchy.lattices[0])
    hierarchy.propagate()
    weight = np.zeros((9, 2, 2))
    weight[0] = np.eye(2)
    constant = np.tile([1.25, 0.5], (len(hierarchy.lattices[0]), 1))
    coarse_values, coarse_live = downsample(ad.constant(constant), hierarchy, 0, _conv(weight, np.zeros(2)))
    assert coarse_live.all()
    restored = upsample(coarse_values, hierarchy.lattices[1], hierarchy.lattices[0].keys, coarse_live)
    assert np.allclose(restored.data, constant, atol=1e-5)


def test_downsample_rejects_row_mismatch(rng):
    hierarchy = LatticeHierarchy(dim=3, sigma=0.6, levels=1)
    distribute(_cloud(rng, 10), hierarchy.lattices[0])
    with pytest.raises(ShapeError):
        downsample(ad.constant(np.zeros((1, 2))), hierarchy, 0, _conv(np.zeros((9, 2, 2)), np.zeros(2)))


def test_upsample_of_coinciding_vertex_is_exact(float64):
    coarse = SparseLattice(dim=3)
    for key in [(0, 0, 0, 0), (3, -1, -1, -1), (-3, 1, 1, 1)]:
        coarse.lookup_or_insert(key)
    values = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    fine_keys = np.array([[6, -2, -2, -2], [0, 0, 0, 0], [-6, 2, 2, 2]])
    out = upsample(ad.constant(values), coarse, fine_keys)
    assert np.allclose(out.data, [[3.0, 4.0], [1.0, 2.0], [5.0, 6.0]])


def test_upsample_matches_dense_barycentric_solve(float64, rng):
    fine_keys = SparseLattice(dim=3)
    distribute(_cloud(rng, 8, spread=2.0), fine_keys)
    corners, _ = simplex_keys_and_weights(fine_keys.keys / 2.0)
    coarse = SparseLattice(dim=3)
    coarse.lookup_many(corners, allow_insert=True)
    values = rng.normal(size=(len(coarse), 3))
    out = upsample(ad.constant(values), coarse, fine_keys.keys)
    for row, key in enumerate(fine_keys.keys):
        x = key / 2.0
        system = np.vstack([corners[row].T.astype(float), np.ones((1, 4))])
        weights, *_ = np.linalg.lstsq(system, np.append(x, 1.0), rcond=None)
        expected = sum(w * values[coarse.lookup(tuple(c))] for w, c in zip(weights, corners[row]))
        assert np.allclose(out.data[row], expected, atol=1e-9)


def test_upsample_of_constant_is_constant(float64, rng):
    hierarchy = LatticeHierarchy(dim=3, sigma=0.6, levels=1)
    distribute(_cloud(rng, 50, spread=3.0), hierarchy.lattices[0])
    hierarchy.propagate()
    coarse = hierarchy.lattices[1]
    out = upsample(ad.constant(np.full((len(coarse), 2), -0.75)), coarse, hierarchy.lattices[0].keys)
    assert np.allclose(out.data, -0.75)


# --- Slicing ---


def test_partition_of_unity_for_a_thousand_points(float64, rng):
    lattice = SparseLattice(dim=3)
    bags = distribute(_cloud(rng, 1000, spread=6.0), lattice)
    out = slice_values(ad.constant(np.full((len(lattice), 1), 2.5)), bags.simplex_index, bags.barycentric)
    assert np.abs(out.data - 2.5).max() < 1e-6


def test_deform_slice_with_zero_offsets_is_plain_slicing(float64, rng):
    lattice = SparseLattice(dim=3)
    bags = distribute(_cloud(rng, 40), lattice)
    values = rng.normal(size=(len(lattice), 3))
    zero_net = _linear(np.zeros((12, 4)), np.zeros(4))
    out = deform_slice(ad.constant(values), bags.simplex_index, bags.barycentric, zero_net)
    assert np.allclose(out.data, slice_values(ad.constant(values), bags.simplex_index, bags.barycentric).data)
    constant = deform_slice(ad.constant(np.full((len(lattice), 3), 0.3)), bags.simplex_index, bags.barycentric, zero_net)
    assert np.allclose(constant.data, 0.3)


def test_deform_slice_point_on_vertex_reads_that_row(float64):
    lattice = SparseLattice(dim=3)
    bags = distribute(PointCloud(positions=np.zeros((1, 3))), lattice)
    values = np.arange(8.0).reshape(4, 2)
    out = deform_slice(ad.constant(values), bags.simplex_index, bags.barycentric, _linear(np.zeros((8, 4)), np.zeros(4)))
    origin = lattice.lookup((0, 0, 0, 0))
    assert np.allclose(out.data[0], values[origin])


def test_deform_slice_hand_computed_offsets(float64):
    lattice = SparseLattice(dim=3)
    bags = distribute(PointCloud(positions=np.array([[0.2, 0.1, -0.3]])), lattice)
    values = np.array([[1.0], [2.0], [-1.0], [4.0]])
    delta = np.array([0.1, -0.2, 0.05, 0.0])
    out = deform_slice(ad.constant(values), bags.simplex_index, bags.barycentric, _linear(np.zeros((4, 4)), delta))
    b = bags.barycentric[0]
    x = values[bags.simplex_index[0], 0]
    expected = (b[0] + 0.1) * x[0] + (b[1] - 0.2) * x[1] + (b[2] + 0.05) * x[2] + b[3] * x[3]
    assert out.data[0, 0] == pytest.approx(expected)


def test_deform_slice_counts_missing_corners(float64):
    diagnostics = {}
    values = ad.constant(np.ones((2, 1)))
    simplex_index = np.array([[0, 1, -1, -1]])
    out = deform_slice(values, simplex_index, np.full((1, 4), 0.25), _linear(np.zeros((4, 4)), np.zeros(4)), diagnostics)
    assert diagnostics["missing_slice_vertices"] == 2
    assert out.data[0, 0] == pytest.approx(0.5)


def test_constant_features_survive_distribute_pointnet_slice(float64, rng):
    lattice = SparseLattice(dim=3)
    cloud = PointCloud(positions=rng.uniform(-3, 3, size=(200, 3)), features=np.full((200, 1), 0.7))
    bags = distribute(cloud, lattice)
    pointnet = _linear([[0.0], [0.0], [0.0], [1.0]], [0.0])
    values = pointnet_aggregate(bags, pointnet)
    out = deform_slice(values, bags.simplex_index, bags.barycentric, _linear(np.zeros((4, 4)), np.zeros(4)))
    assert np.abs(out.data - 0.7).max() < 1e-5


def test_elevation_of_lattice_vertices_is_consistent(rng):
    lattice = SparseLattice(dim=3, sigma=1.0)
    distribute(_cloud(rng, 10), lattice)
    assert np.allclose(elevate_many(lattice.vertex_positions(), 1.0), lattice.keys, atol=1e-9)
