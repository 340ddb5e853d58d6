"""
Sparse permutohedral lattice.

Points of R^d are elevated into the hyperplane of R^(d+1) whose coordinates
sum to zero. That hyperplane is tessellated by the permutohedral lattice into
uniform simplices; every elevated point lies in exactly one simplex whose
d+1 corners are remainder-k lattice points for distinct k in {0..d}.

Vertices are stored sparsely: a hash map from integer key to row index plus
a value matrix whose rows follow insertion order. Rows are only ever
appended, so a lattice shared by all clouds of a sequence keeps the row index
of every vertex stable across timesteps.
"""

from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from .errors import InvariantViolation, ShapeError

LatticeKey = Tuple[int, ...]

DEFAULT_SIGMA = 0.6


def elevation_matrix(d: int) -> np.ndarray:
    """
    Basis matrix E of shape (d+1, d) mapping a scaled point into the lattice hyperplane.

    Column i has entry s_i on rows 0..i, -(i+1)*s_i on row i+1 and zero
    below, with s_i = (d+1)*sqrt(2/3)/sqrt((i+1)(i+2)). Every column sums to
    zero, so every elevated point does too.
    """
    if d < 1:
        raise ShapeError(f"Lattice dimension must be positive, got {d}")
    inv_std_dev = (d + 1) * np.sqrt(2.0 / 3.0)
    basis = np.zeros((d + 1, d), dtype=np.float64)
    for i in range(d):
        scale = inv_std_dev / np.sqrt((i + 1) * (i + 2))
        basis[: i + 1, i] = scale
        basis[i + 1, i] = -(i + 1) * scale
    return basis


def sigma_vector(sigma, d: int) -> np.ndarray:
    """Broadcast a scalar or per-axis lattice scale to a length-d vector."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.size not in (1, d):
        raise ShapeError(f"Expected one sigma or {d} per-axis values, got {sigma.size}")
    sigma = np.broadcast_to(sigma.reshape(-1), (d,)).copy()
    if not np.all(sigma > 0):
        raise InvariantViolation(f"sigma must be strictly positive, got {sigma.tolist()}")
    return sigma


def elevate(position, sigma) -> np.ndarray:
    """
    Scale a d-dimensional point by 1/sigma and elevate it into the lattice hyperplane.

    Args:
        position: d-vector.
        sigma: d-vector (or scalar) of per-axis lattice scales.

    Returns:
        np.ndarray: (d+1)-vector whose components sum to zero.

    Raises:
        InvariantViolation: If the position is not finite or sigma is not positive.
    """
    position = np.asarray(position, dtype=np.float64)
    return elevate_many(position[None, :], sigma)[0]


def elevate_many(positions: np.ndarray, sigma) -> np.ndarray:
    """Vectorised ``elevate`` over an (m, d) matrix."""
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 2:
        raise ShapeError(f"Expected an (m, d) matrix of positions, got shape {positions.shape}")
    if not np.all(np.isfinite(positions)):
        bad = np.argwhere(~np.isfinite(positions))[0]
        raise InvariantViolation(f"Cannot elevate non-finite position at row {bad[0]}, axis {bad[1]}")
    d = positions.shape[1]
    sigma = sigma_vector(sigma, d)
    return (positions / sigma) @ elevation_matrix(d).T


def validate_key(key: Sequence[int]) -> LatticeKey:
    key = tuple(int(c) for c in key)
    if sum(key) != 0:
        raise InvariantViolation(f"Lattice key {key} does not sum to zero")
    return key


def neighbor_offsets(d: int) -> np.ndarray:
    """
    The 2(d+1) one-hop offsets in the fixed (axis, sign) order.

    Axis-major, positive sign first: (0,+), (0,-), (1,+), (1,-), ...
    Offset o_axis has value d at position ``axis`` and -1 elsewhere.
    """
    offsets = []
    for axis in range(d + 1):
        base = np.full(d + 1, -1, dtype=np.int64)
        base[axis] = d
        offsets.append(base)
        offsets.append(-base)
    return np.stack(offsets)


def neighbor_key(key: Sequence[int], axis: int, sign: int) -> LatticeKey:
    """Key of the one-hop neighbor of ``key`` along ``axis`` in direction ``sign`` (+1/-1)."""
    key = np.asarray(key, dtype=np.int64)
    d = key.shape[0] - 1
    if not 0 <= axis <= d:
        raise ShapeError(f"Axis {axis} out of range for a {d}-dimensional lattice")
    if sign not in (1, -1):
        raise ShapeError(f"Sign must be +1 or -1, got {sign}")
    offset = np.full(d + 1, -1, dtype=np.int64)
    offset[axis] = d
    return tuple(int(c) for c in key + sign * offset)


def _canonical(d: int) -> np.ndarray:
    d1 = d + 1
    canonical = np.empty((d1, d1), dtype=np.int64)
    for remainder in range(d1):
        for j in range(d1):
            canonical[remainder, j] = remainder if j <= d - remainder else remainder - d1
    return canonical


def simplex_keys_and_weights(elevated: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Enclosing simplex of each elevated point.

    Rounds every point to its nearest remainder-0 lattice point, ranks the
    coordinate differentials and walks the canonical simplex from there.

    Args:
        elevated: (m, d+1) matrix of points in the lattice hyperplane.

    Returns:
        keys: (m, d+1, d+1) int64; ``keys[p, r]`` is the remainder-r corner of point p.
        barycentric: (m, d+1) nonnegative weights summing to one, aligned with ``keys``.
    """
    x = np.asarray(elevated, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"Expected an (m, d+1) matrix, got shape {x.shape}")
    m, d1 = x.shape
    d = d1 - 1

    scaled = x / d1
    up = np.ceil(scaled) * d1
    down = np.floor(scaled) * d1
    rem0 = np.where(up - x < x - down, up, down)
    total = np.rint(rem0.sum(axis=1) / d1).astype(np.int64)[:, None]

    diff = x - rem0
    idx = np.arange(d1)
    later = idx[None, :] > idx[:, None]
    earlier = idx[None, :] < idx[:, None]
    di = diff[:, :, None]
    dj = diff[:, None, :]
    rank = ((dj > di) & later).sum(axis=2) + ((dj >= di) & earlier).sum(axis=2)

    # Push the remainder-0 point back onto the hyperplane
    too_high = (total > 0) & (rank >= d1 - total)
    too_low = (total < 0) & (rank < -total)
    rem0 = rem0 - d1 * too_high + d1 * too_low
    rank = rank + total - d1 * too_high + d1 * too_low

    delta = (x - rem0) / d1
    bary = np.zeros((m, d1 + 1), dtype=np.float64)
    rows = np.broadcast_to(np.arange(m)[:, None], rank.shape)
    np.add.at(bary, (rows, d - rank), delta)
    np.add.at(bary, (rows, d1 - rank), -delta)
    bary[:, 0] += 1.0 + bary[:, d1]

    canonical = _canonical(d)
    keys = np.rint(rem0).astype(np.int64)[:, None, :] + canonical[idx[None, :, None], rank[:, None, :]]
    return keys, bary[:, :d1]


class SimplexFootprint(NamedTuple):
    """The d+1 corners enclosing one point. Absent corners have index -1."""

    vertex_indices: np.ndarray
    barycentric: np.ndarray
    keys: np.ndarray


class SparseLattice:
    """
    Append-only hash-map storage of lattice vertices and their values.

    Attributes:
        dim (int): Input dimension d.
        sigma (np.ndarray): Per-axis lattice scale, length d.
        value_dim (int): Number of value columns.
    """

    def __init__(
        self,
        dim: int = 3,
        sigma: Union[float, Sequence[float], np.ndarray] = DEFAULT_SIGMA,
        value_dim: int = 0,
        dtype=np.float32,
    ):
        if dim < 1:
            raise ShapeError(f"Lattice dimension must be positive, got {dim}")
        self.dim = dim
        self.sigma = sigma_vector(sigma, dim)
        self.value_dim = value_dim
        self._index: Dict[LatticeKey, int] = {}
        self._count = 0
        self._key_buffer = np.zeros((16, dim + 1), dtype=np.int64)
        self._values = np.zeros((0, value_dim), dtype=dtype)
        self._neighbor_table = np.zeros((0, 2 * (dim + 1)), dtype=np.int64)

    def __len__(self) -> int:
        return self._count

    @property
    def vertex_count(self) -> int:
        return self._count

    @property
    def keys(self) -> np.ndarray:
        """(k, d+1) int64 matrix C in row order, read-only."""
        view = self._key_buffer[: self._count]
        view.flags.writeable = False
        return view

    @property
    def values(self) -> np.ndarray:
        """(k, value_dim) matrix X in row order."""
        return self._values

    @values.setter
    def values(self, new_values: np.ndarray) -> None:
        new_values = np.asarray(new_values, dtype=self._values.dtype)
        if new_values.shape[0] != self._count:
            raise ShapeError(f"Value matrix has {new_values.shape[0]} rows for {self._count} vertices")
        self.value_dim = new_values.shape[1]
        self._values = new_values

    def lookup(self, key: Sequence[int]) -> int:
        """Row index of ``key`` or -1 when absent."""
        return self._index.get(tuple(int(c) for c in key), -1)

    def lookup_or_insert(self, key: Sequence[int]) -> int:
        """
        Row index of ``key``, appending it with a zero value row when new.

        Raises:
            InvariantViolation: If the key does not sum to zero.
        """
        key = validate_key(key)
        row = self._index.get(key)
        if row is not None:
            return row
        self._append([key])
        return self._count - 1

    def _append(self, keys: List[LatticeKey]) -> None:
        start = self._count
        end = start + len(keys)
        if end > self._key_buffer.shape[0]:
            # Earlier views keep the old buffer; rows below start never change
            grown = np.zeros((max(end, 2 * self._key_buffer.shape[0]), self.dim + 1), dtype=np.int64)
            grown[:start] = self._key_buffer[:start]
            self._key_buffer = grown
        self._key_buffer[start:end] = keys
        for offset, key in enumerate(keys):
            self._index[key] = start + offset
        self._count = end
        pad = np.zeros((len(keys), self.value_dim), dtype=self._values.dtype)
        self._values = np.concatenate([self._values, pad], axis=0)

    def lookup_many(self, keys: np.ndarray, allow_insert: bool = False) -> np.ndarray:
        """
        Row indices of an (..., d+1) array of keys, in row-major order.

        Unknown keys are appended in the order they are met when
        ``allow_insert`` is set, otherwise reported as -1.
        """
        keys = np.asarray(keys, dtype=np.int64)
        flat = keys.reshape(-1, self.dim + 1)
        if flat.size and np.any(flat.sum(axis=1) != 0):
            raise InvariantViolation("Refusing lattice keys that do not sum to zero")
        tuples = list(map(tuple, flat.tolist()))
        if allow_insert:
            new_keys = []
            seen = set()
            for key in tuples:
                if key not in self._index and key not in seen:
                    seen.add(key)
                    new_keys.append(key)
            if new_keys:
                self._append(new_keys)
        index = self._index
        rows = np.fromiter((index.get(key, -1) for key in tuples), dtype=np.int64, count=len(tuples))
        return rows.reshape(keys.shape[:-1])

    def locate(self, elevated: np.ndarray, allow_insert: bool = False) -> Tuple[np.ndarray, np.ndarray]:
        """
        Enclosing simplices of many elevated points.

        Returns:
            indices: (m, d+1) row indices, -1 for absent corners.
            barycentric: (m, d+1) weights.
        """
        keys, bary = simplex_keys_and_weights(elevated)
        return self.lookup_many(keys, allow_insert=allow_insert), bary

    def find_enclosing_simplex(self, elevated, allow_insert: bool = False) -> SimplexFootprint:
        elevated = np.asarray(elevated, dtype=np.float64)
        if elevated.shape != (self.dim + 1,):
            raise ShapeError(f"Expected an elevated ({self.dim + 1},)-vector, got shape {elevated.shape}")
        keys, bary = simplex_keys_and_weights(elevated[None, :])
        rows = self.lookup_many(keys[0], allow_insert=allow_insert)
        return SimplexFootprint(vertex_indices=rows, barycentric=bary[0], keys=keys[0])

    def neighbor_table(self) -> np.ndarray:
        """
        (k, 2(d+1)) row indices of the one-hop neighbors of every vertex.

        Columns follow ``neighbor_offsets`` order; -1 marks unallocated neighbors.
        Only rows added since the last call are looked up. Earlier rows that
        gain a neighbor among them are patched in a new array, so tables
        returned before stay valid for the lattice size they were built at.
        """
        done = self._neighbor_table.shape[0]
        if done == self._count:
            return self._neighbor_table
        offsets = neighbor_offsets(self.dim)
        fresh = self.keys[done:]
        table = np.concatenate([self._neighbor_table, self.lookup_many(fresh[:, None, :] + offsets[None, :, :])])
        if done:
            # Old row r points at fresh row f through column j iff key_r + offset_j == key_f
            back = self.lookup_many(fresh[:, None, :] - offsets[None, :, :])
            fresh_rows, columns = np.nonzero((back >= 0) & (back < done))
            table[back[fresh_rows, columns], columns] = done + fresh_rows
        logger.debug(f"Neighbor table extended from {done} to {self._count} rows")
        table.flags.writeable = False
        self._neighbor_table = table
        return table

    def vertex_positions(self) -> np.ndarray:
        """(k, d) position of every vertex in sigma-scaled input space."""
        return self.keys.astype(np.float64) @ np.linalg.pinv(elevation_matrix(self.dim)).T

    @classmethod
    def from_keys(cls, keys: np.ndarray, sigma=DEFAULT_SIGMA, values: Optional[np.ndarray] = None) -> "SparseLattice":
        """Rebuild a lattice from serialized keys; row order is the key order."""
        keys = np.asarray(keys, dtype=np.int64)
        lattice = cls(dim=keys.shape[1] - 1, sigma=sigma, value_dim=0 if values is None else values.shape[1])
        lattice.lookup_many(keys, allow_insert=True)
        if len(lattice) != keys.shape[0]:
            raise InvariantViolation("Serialized key list contains duplicates")
        if values is not None:
            lattice.values = values
        logger.debug(f"Rebuilt lattice with {len(lattice)} vertices")
        return lattice

    def __repr__(self) -> str:
        return f"SparseLattice(dim={self.dim}, vertices={len(self)}, value_dim={self.value_dim})"


# Free-function forms of the core operations


def find_enclosing_simplex(elevated, lattice: SparseLattice, allow_insert: bool = False) -> SimplexFootprint:
    return lattice.find_enclosing_simplex(elevated, allow_insert=allow_insert)


def lookup_or_insert(lattice: SparseLattice, key: Sequence[int]) -> int:
    return lattice.lookup_or_insert(key)


def all_neighbor_keys(key: Sequence[int]) -> List[LatticeKey]:
    d = len(key) - 1
    return [neighbor_key(key, axis, sign) for axis in range(d + 1) for sign in (1, -1)]
