"""
Differentiable operators on sparse lattices.

These are the building blocks of the U-shaped backbone: scattering points
onto lattice vertices (distribute), summarizing each vertex's points
(pointnet_aggregate), convolving over one-hop neighborhoods, moving between
lattice resolutions (downsample, upsample) and gathering vertex values back
to the points (deform_slice).

Values are ``autodiff.Tensor`` matrices whose rows follow the row order of
the lattice they live on. Rows of vertices that carry no information for the
current timestep are kept at zero by the caller through ``mask_rows``.
"""

from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np
from loguru import logger

from . import autodiff as ad
from .autodiff import Tensor
from .datatypes import PointCloud
from .errors import ShapeError
from .lattice import SparseLattice, elevate_many, neighbor_offsets, simplex_keys_and_weights


class LinearParams:
    """Weight (in, out) and bias (out,) of a dense layer."""

    def __init__(self, weight: Tensor, bias: Tensor):
        self.weight = weight
        self.bias = bias

    @classmethod
    def init(cls, rng: np.random.Generator, in_features: int, out_features: int, name: str, scale: float = 1.0):
        std = scale * np.sqrt(2.0 / max(in_features, 1))
        return cls(
            ad.parameter(rng.normal(0.0, std, size=(in_features, out_features)), name=f"{name}.weight"),
            ad.parameter(np.zeros(out_features), name=f"{name}.bias"),
        )

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> Dict[str, Tensor]:
        return {self.weight.name: self.weight, self.bias.name: self.bias}

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"Linear layer {self.weight.name} expects {self.in_features} inputs, got {x.shape[-1]}")
        return ad.matmul(x, self.weight) + self.bias


class ConvParams:
    """
    Lattice convolution kernel.

    Attributes:
        weight (Tensor): (2(d+1)+1, in_channels, out_channels). Tap 0 is the
            center vertex, taps 1.. follow ``neighbor_offsets`` order.
        bias (Tensor): (out_channels,).
    """

    def __init__(self, weight: Tensor, bias: Tensor):
        if weight.ndim != 3:
            raise ShapeError(f"Convolution weight must be (taps, in, out), got shape {weight.shape}")
        self.weight = weight
        self.bias = bias

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, in_channels: int, out_channels: int, name: str):
        taps = 2 * (dim + 1) + 1
        std = np.sqrt(2.0 / (taps * in_channels))
        return cls(
            ad.parameter(rng.normal(0.0, std, size=(taps, in_channels, out_channels)), name=f"{name}.weight"),
            ad.parameter(np.zeros(out_channels), name=f"{name}.bias"),
        )

    @property
    def taps(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[2]

    def parameters(self) -> Dict[str, Tensor]:
        return {self.weight.name: self.weight, self.bias.name: self.bias}


class VertexBags(NamedTuple):
    """
    Point records grouped by lattice vertex.

    Every point contributes one record to each of its d+1 simplex corners,
    stored point-major: records ``p*(d+1) .. p*(d+1)+d`` belong to point p.
    """

    point_index: np.ndarray
    vertex_index: np.ndarray
    offsets: np.ndarray
    features: np.ndarray
    simplex_index: np.ndarray
    barycentric: np.ndarray
    num_vertices: int

    def counts(self) -> np.ndarray:
        return np.bincount(self.vertex_index, minlength=self.num_vertices)

    def centroids(self, positions: np.ndarray) -> np.ndarray:
        """Mean position of the points touching each vertex; NaN for empty bags."""
        counts = self.counts()
        sums = np.zeros((self.num_vertices, positions.shape[1]))
        np.add.at(sums, self.vertex_index, positions[self.point_index])
        with np.errstate(invalid="ignore", divide="ignore"):
            return sums / counts[:, None]


def scaled_positions(cloud: PointCloud, sigma: np.ndarray) -> np.ndarray:
    if cloud.scaled_by is not None:
        return cloud.positions
    return cloud.positions / sigma


def distribute(cloud: PointCloud, lattice: SparseLattice) -> VertexBags:
    """
    Splat every point onto the d+1 corners of its enclosing simplex.

    Unknown corners are appended to the (shared) lattice. The record offset
    is the point position minus the corner's position, both in sigma-scaled
    input space.
    """
    if cloud.positions.shape[1] != lattice.dim:
        raise ShapeError(f"Cloud has dimension {cloud.positions.shape[1]}, lattice has {lattice.dim}")
    positions = scaled_positions(cloud, lattice.sigma)
    d1 = lattice.dim + 1
    before = len(lattice)
    simplex_index, bary = lattice.locate(elevate_many(positions, 1.0), allow_insert=True)
    vertex_positions = lattice.vertex_positions()

    m = positions.shape[0]
    point_index = np.repeat(np.arange(m), d1)
    vertex_index = simplex_index.reshape(-1)
    offsets = (positions[:, None, :] - vertex_positions[simplex_index]).reshape(m * d1, lattice.dim)
    features = np.repeat(cloud.features, d1, axis=0)
    logger.debug(f"Distributed {m} points onto {len(lattice)} vertices ({len(lattice) - before} new)")
    return VertexBags(
        point_index=point_index,
        vertex_index=vertex_index,
        offsets=offsets,
        features=features,
        simplex_index=simplex_index,
        barycentric=bary,
        num_vertices=len(lattice),
    )


def pointnet_aggregate(bags: VertexBags, params: LinearParams) -> Tensor:
    """
    One row per vertex: elementwise max over the linear embeddings of its records.

    Each record is embedded from (offset ++ features) by the shared linear
    layer. Vertices with an empty bag get a zero row.
    """
    inputs = ad.constant(np.concatenate([bags.offsets, bags.features], axis=1))
    return ad.segment_max(params(inputs), bags.vertex_index, bags.num_vertices)


def mask_rows(values: Tensor, live: Optional[np.ndarray]) -> Tensor:
    """Zero the rows of vertices that are not live."""
    if live is None or live.all():
        return values
    return ad.mul(values, live.astype(np.float64)[:, None])


def convolution_taps(lattice: SparseLattice) -> np.ndarray:
    """(k, 2(d+1)+1) row indices: the vertex itself, then its neighbors (-1 when absent)."""
    center = np.arange(len(lattice), dtype=np.int64)[:, None]
    return np.concatenate([center, lattice.neighbor_table()], axis=1)


def lattice_convolution(values: Tensor, lattice: SparseLattice, params: ConvParams, preactivate: bool = True) -> Tensor:
    """
    out_v = sum over taps of W_tap . x_tap(v) + b, absent neighbors contributing zero.

    Args:
        values: (k, in_channels) rows aligned with the lattice.
        lattice: The lattice whose neighbor structure defines the taps.
        params: Kernel with 2(d+1)+1 taps.
        preactivate: Apply ReLU to the input before the kernel.

    Raises:
        ShapeError: On a tap count, row count or channel mismatch.
    """
    expected_taps = 2 * (lattice.dim + 1) + 1
    if params.taps != expected_taps:
        raise ShapeError(f"Kernel has {params.taps} taps, a {lattice.dim}-dimensional lattice needs {expected_taps}")
    if values.shape[0] != len(lattice):
        raise ShapeError(f"Value matrix has {values.shape[0]} rows for {len(lattice)} vertices")
    if values.shape[1] != params.in_channels:
        raise ShapeError(f"Kernel expects {params.in_channels} input channels, got {values.shape[1]}")
    x = ad.relu(values) if preactivate else values
    taps = convolution_taps(lattice)
    gathered = ad.reshape(ad.gather_rows(x, taps), (taps.shape[0], params.taps * params.in_channels))
    kernel = ad.reshape(params.weight, (params.taps * params.in_channels, params.out_channels))
    return ad.matmul(gathered, kernel) + params.bias


def resnet_block(
    values: Tensor, lattice: SparseLattice, first: ConvParams, second: ConvParams, live: Optional[np.ndarray] = None
) -> Tensor:
    """
    out = x + Conv(ReLU(Conv(ReLU(x)))); channels must be preserved.

    With ``live`` the intermediate rows of vertices that are not live are
    zeroed, so vertices allocated by other clouds stay invisible.
    """
    channels = values.shape[1]
    for conv in (first, second):
        if conv.in_channels != channels or conv.out_channels != channels:
            raise ShapeError(
                f"ResNet block needs {channels}->{channels} kernels, got {conv.in_channels}->{conv.out_channels}"
            )
    hidden = mask_rows(lattice_convolution(values, lattice, first, preactivate=True), live)
    return values + lattice_convolution(hidden, lattice, second, preactivate=True)


# --- Multi-resolution ---


def coarse_keys(fine_keys: np.ndarray) -> np.ndarray:
    """
    Coarse key of every fine key.

    Halving a fine key gives its elevated position in the lattice of doubled
    scale; the coarse key is the corner of largest barycentric weight of the
    simplex enclosing that position, ties going to the lowest remainder.
    """
    fine_keys = np.asarray(fine_keys, dtype=np.int64)
    if fine_keys.shape[0] == 0:
        return fine_keys.copy()
    keys, bary = simplex_keys_and_weights(fine_keys / 2.0)
    nearest = np.argmax(bary, axis=1)
    return keys[np.arange(keys.shape[0]), nearest]


def downsample_lattice(fine: SparseLattice, coarse: Optional[SparseLattice] = None) -> Tuple[SparseLattice, np.ndarray]:
    """
    Build (or extend) the coarse lattice of ``fine``.

    Returns:
        coarse: Lattice with doubled sigma; at most as many vertices as ``fine``.
        parents: (k_fine,) coarse row of every fine vertex.
    """
    if coarse is None:
        coarse = SparseLattice(dim=fine.dim, sigma=fine.sigma * 2.0)
    parents = coarse.lookup_many(coarse_keys(fine.keys), allow_insert=True)
    return coarse, parents


class LatticeHierarchy:
    """
    The lattices of every resolution level for one sequence.

    Level 0 holds the points' simplex corners; level l+1 is the coarsening
    of level l. All levels are append-only, so row indices stay valid for
    the whole sequence, and the fine-to-coarse parent maps only ever grow.
    """

    def __init__(self, dim: int, sigma, levels: int, sequence_id: Optional[str] = None):
        base = SparseLattice(dim=dim, sigma=sigma)
        self.lattices: List[SparseLattice] = [base]
        for level in range(levels):
            self.lattices.append(SparseLattice(dim=dim, sigma=base.sigma * 2.0 ** (level + 1)))
        self._parents: List[np.ndarray] = [np.zeros(0, dtype=np.int64) for _ in range(levels)]
        self.sequence_id = sequence_id

    @property
    def levels(self) -> int:
        return len(self._parents)

    def vertex_counts(self) -> List[int]:
        return [len(lattice) for lattice in self.lattices]

    def parents(self, level: int) -> np.ndarray:
        """Parent map from level ``level`` to level ``level + 1``, extended to the current fine size."""
        fine, coarse = self.lattices[level], self.lattices[level + 1]
        known = self._parents[level].shape[0]
        if known < len(fine):
            new_keys = fine.keys[known:]
            rows = coarse.lookup_many(coarse_keys(new_keys), allow_insert=True)
            self._parents[level] = np.concatenate([self._parents[level], rows])
        return self._parents[level]

    def propagate(self) -> None:
        """Make every coarse level cover the current finer levels."""
        for level in range(self.levels):
            self.parents(level)


def downsample(
    values: Tensor,
    hierarchy: LatticeHierarchy,
    level: int,
    params: ConvParams,
    live: Optional[np.ndarray] = None,
) -> Tuple[Tensor, np.ndarray]:
    """
    Move values from ``level`` to ``level + 1``.

    Each coarse row is the mean of its live contributing fine rows, followed
    by a pre-activated lattice convolution on the coarse lattice.

    Returns:
        values: (k_coarse, out_channels).
        live: Coarse vertices with at least one live contributor.
    """
    parents = hierarchy.parents(level)
    coarse = hierarchy.lattices[level + 1]
    if values.shape[0] != parents.shape[0]:
        raise ShapeError(f"Downsample got {values.shape[0]} rows for {parents.shape[0]} fine vertices")
    weights = np.ones(parents.shape[0]) if live is None else live.astype(np.float64)
    counts = np.bincount(parents, weights=weights, minlength=len(coarse))
    pooled = ad.segment_sum(ad.mul(values, weights[:, None]), parents, len(coarse))
    pooled = ad.mul(pooled, (1.0 / np.maximum(counts, 1.0))[:, None])
    coarse_live = counts > 0
    out = lattice_convolution(pooled, coarse, params, preactivate=True)
    return mask_rows(out, coarse_live), coarse_live


def upsample_weights(
    coarse: SparseLattice, fine_keys: np.ndarray, coarse_live: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Coarse corners and interpolation weights for every fine key.

    Weights are renormalised over the corners that exist (and are live).
    """
    fine_keys = np.asarray(fine_keys, dtype=np.int64)
    d1 = coarse.dim + 1
    if fine_keys.shape[0] == 0:
        return np.zeros((0, d1), dtype=np.int64), np.zeros((0, d1))
    keys, bary = simplex_keys_and_weights(fine_keys / 2.0)
    index = coarse.lookup_many(keys)
    present = index >= 0
    if coarse_live is not None:
        present &= np.where(present, coarse_live[np.maximum(index, 0)], False)
    weights = bary * present
    total = weights.sum(axis=1, keepdims=True)
    weights = np.divide(weights, total, out=np.zeros_like(weights), where=total > 0)
    return np.where(present, index, -1), weights


def upsample(
    values: Tensor, coarse: SparseLattice, fine_keys: np.ndarray, coarse_live: Optional[np.ndarray] = None
) -> Tensor:
    """Barycentric interpolation of coarse values at the fine keys, in fine key order."""
    if values.shape[0] != len(coarse):
        raise ShapeError(f"Upsample got {values.shape[0]} rows for {len(coarse)} coarse vertices")
    index, weights = upsample_weights(coarse, fine_keys, coarse_live)
    corners = ad.gather_rows(values, index)
    return ad.sum_(ad.mul(corners, weights[:, :, None]), axis=1)


# --- Back to the points ---


def slice_values(values: Tensor, simplex_index: np.ndarray, barycentric: np.ndarray) -> Tensor:
    """Plain barycentric slicing: sum_i b_i * x_{v_i} per point."""
    corners = ad.gather_rows(values, simplex_index)
    return ad.sum_(ad.mul(corners, np.asarray(barycentric)[:, :, None]), axis=1)


def deform_slice(
    values: Tensor,
    simplex_index: np.ndarray,
    barycentric: np.ndarray,
    offset_net: LinearParams,
    diagnostics: Optional[Dict[str, int]] = None,
) -> Tensor:
    """
    Slice with learned weight offsets: sum_i (b_i + db_i) * x_{v_i}.

    The offsets db are predicted by ``offset_net`` from the concatenated
    values of the point's d+1 corners and are not renormalised. Absent
    corners contribute zero and are counted in ``diagnostics['missing_slice_vertices']``.
    """
    m, d1 = simplex_index.shape
    channels = values.shape[1]
    if offset_net.in_features != d1 * channels or offset_net.out_features != d1:
        raise ShapeError(
            f"Offset net must map {d1 * channels} -> {d1}, got {offset_net.in_features} -> {offset_net.out_features}"
        )
    missing = int((simplex_index < 0).sum())
    if missing:
        logger.warning(f"DeformSlice: {missing} simplex corners are absent from the lattice")
    if diagnostics is not None:
        diagnostics["missing_slice_vertices"] = diagnostics.get("missing_slice_vertices", 0) + missing
    corners = ad.gather_rows(values, simplex_index)
    offsets = offset_net(ad.reshape(corners, (m, d1 * channels)))
    weights = ad.add(offsets, np.asarray(barycentric))
    return ad.sum_(ad.mul(corners, ad.reshape(weights, (m, d1, 1))), axis=1)
