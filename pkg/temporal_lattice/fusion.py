"""
Fusion of lattice features across timesteps.

All clouds of a sequence share one lattice, so the previous hidden state and
the current value matrix are row-aligned once the state is zero-padded to
the current vertex count. The recurrent cells then work row by row (GRU,
LSTM) or over one-hop neighborhoods (AFlow).
"""

from dataclasses import dataclass
from typing import Dict, Optional, Tuple, Union

import numpy as np
from loguru import logger

from . import autodiff as ad
from .autodiff import Tensor
from .datatypes import FusionCell
from .errors import InvariantViolation, ShapeError
from .lattice import SparseLattice
from .lattice_ops import LinearParams, mask_rows

AFLOW_INIT = 0.1


@dataclass
class TemporalState:
    """
    Hidden state written by one fusion site at one timestep.

    Attributes:
        hidden: (vertex_count_at_write, C) matrix H aligned with the shared lattice rows.
        cell: LSTM cell state, same shape as ``hidden``; None for other cells.
        vertex_count_at_write: Lattice size when the state was written.
        live: Rows holding written state; the others are zero.
    """

    hidden: Tensor
    cell: Optional[Tensor]
    vertex_count_at_write: int
    live: np.ndarray

    def __post_init__(self):
        if self.hidden.shape[0] != self.vertex_count_at_write:
            raise InvariantViolation(
                f"State has {self.hidden.shape[0]} rows but was written at {self.vertex_count_at_write} vertices"
            )

    def detach(self) -> "TemporalState":
        """Same values, cut from the tape; used between inference steps."""
        return TemporalState(
            hidden=ad.constant(self.hidden.data),
            cell=None if self.cell is None else ad.constant(self.cell.data),
            vertex_count_at_write=self.vertex_count_at_write,
            live=self.live.copy(),
        )


def _pad_rows(matrix: Tensor, rows: int) -> Tensor:
    missing = rows - matrix.shape[0]
    if missing == 0:
        return matrix
    return ad.concat([matrix, np.zeros((missing, matrix.shape[1]))], axis=0)


def align_states(prev: TemporalState, current_vertex_count: int) -> Tensor:
    """
    Zero-pad the previous hidden state to the current vertex count.

    Raises:
        InvariantViolation: If the lattice has fewer vertices than when the state was written.
    """
    if current_vertex_count < prev.vertex_count_at_write:
        raise InvariantViolation(
            f"Lattice shrank from {prev.vertex_count_at_write} to {current_vertex_count} vertices between timesteps"
        )
    logger.debug(f"Padding temporal state by {current_vertex_count - prev.vertex_count_at_write} rows")
    return _pad_rows(prev.hidden, current_vertex_count)


def align_cell(prev: TemporalState, current_vertex_count: int) -> Optional[Tensor]:
    """The LSTM cell state is padded exactly like the hidden state."""
    if prev.cell is None:
        return None
    return _pad_rows(prev.cell, current_vertex_count)


def align_live(prev: TemporalState, current_vertex_count: int) -> np.ndarray:
    live = np.zeros(current_vertex_count, dtype=bool)
    live[: prev.vertex_count_at_write] = prev.live
    return live


def _check_pair(h_prev: Tensor, x: Tensor) -> None:
    if h_prev.shape != x.shape:
        raise ShapeError(f"Fusion needs equal shapes, got state {h_prev.shape} and input {x.shape}")


# --- Cells ---


class GRUFusion:
    """Row-wise GRU over [x, h] with update, reset and candidate layers."""

    kind = FusionCell.GRU

    def __init__(self, rng: np.random.Generator, channels: int, name: str = "gru"):
        self.channels = channels
        self.update = LinearParams.init(rng, 2 * channels, channels, f"{name}.update", scale=0.5)
        self.reset = LinearParams.init(rng, 2 * channels, channels, f"{name}.reset", scale=0.5)
        self.candidate = LinearParams.init(rng, 2 * channels, channels, f"{name}.candidate", scale=0.5)

    def parameters(self) -> Dict[str, Tensor]:
        params = {}
        for layer in (self.update, self.reset, self.candidate):
            params.update(layer.parameters())
        return params


class LSTMFusion:
    """Row-wise LSTM over [x, h] with input, forget, output and candidate layers."""

    kind = FusionCell.LSTM

    def __init__(self, rng: np.random.Generator, channels: int, name: str = "lstm"):
        self.channels = channels
        self.input_gate = LinearParams.init(rng, 2 * channels, channels, f"{name}.input", scale=0.5)
        self.forget_gate = LinearParams.init(rng, 2 * channels, channels, f"{name}.forget", scale=0.5)
        self.output_gate = LinearParams.init(rng, 2 * channels, channels, f"{name}.output", scale=0.5)
        self.candidate = LinearParams.init(rng, 2 * channels, channels, f"{name}.candidate", scale=0.5)

    def parameters(self) -> Dict[str, Tensor]:
        params = {}
        for layer in (self.input_gate, self.forget_gate, self.output_gate, self.candidate):
            params.update(layer.parameters())
        return params


class AFlowFusion:
    """
    Abstract flow: fuse every vertex with its one-hop neighbors of the previous
    timestep, weighted by how close their features are to the vertex's own.

    Attributes:
        alpha, beta: Learnable scalars of the weighting w = (alpha - min(dist, alpha)) * beta.
        fuse_weights: Linear layer 2C -> C applied to (x_v ++ l_v) before a ReLU.
    """

    kind = FusionCell.AFlow

    def __init__(self, rng: np.random.Generator, channels: int, name: str = "aflow"):
        self.channels = channels
        self.alpha = ad.parameter(np.array(AFLOW_INIT), name=f"{name}.alpha")
        self.beta = ad.parameter(np.array(AFLOW_INIT), name=f"{name}.beta")
        self.fuse_weights = LinearParams.init(rng, 2 * channels, channels, f"{name}.fuse")

    def parameters(self) -> Dict[str, Tensor]:
        return {self.alpha.name: self.alpha, self.beta.name: self.beta, **self.fuse_weights.parameters()}


FusionModule = Union[GRUFusion, LSTMFusion, AFlowFusion]

CELL_TYPES = {
    FusionCell.GRU: GRUFusion,
    FusionCell.LSTM: LSTMFusion,
    FusionCell.AFlow: AFlowFusion,
}


def build_cell(kind: FusionCell, rng: np.random.Generator, channels: int, name: str) -> FusionModule:
    return CELL_TYPES[FusionCell(kind)](rng, channels, name=name)


# --- Cell equations ---


def gru_fuse(h_prev: Tensor, x: Tensor, params: GRUFusion) -> Tensor:
    """
    z = sigmoid(W_z[x, h] + b_z), r = sigmoid(W_r[x, h] + b_r),
    n = tanh(W_n[x, r*h] + b_n), h' = (1 - z) * n + z * h.
    """
    _check_pair(h_prev, x)
    xh = ad.concat([x, h_prev], axis=1)
    z = ad.sigmoid(params.update(xh))
    r = ad.sigmoid(params.reset(xh))
    n = ad.tanh(params.candidate(ad.concat([x, r * h_prev], axis=1)))
    return (1.0 - z) * n + z * h_prev


def lstm_fuse(h_prev: Tensor, c_prev: Tensor, x: Tensor, params: LSTMFusion) -> Tuple[Tensor, Tensor]:
    """c' = f * c + i * g and h' = o * tanh(c'), gates computed from [x, h]."""
    _check_pair(h_prev, x)
    _check_pair(c_prev, x)
    xh = ad.concat([x, h_prev], axis=1)
    i = ad.sigmoid(params.input_gate(xh))
    f = ad.sigmoid(params.forget_gate(xh))
    o = ad.sigmoid(params.output_gate(xh))
    g = ad.tanh(params.candidate(xh))
    c_new = f * c_prev + i * g
    return o * ad.tanh(c_new), c_new


def previous_neighbors(
    lattice: SparseLattice, previous_count: Optional[int] = None, previous_live: Optional[np.ndarray] = None
) -> np.ndarray:
    """
    Neighbor table restricted to vertices the previous state holds.

    A neighbor counts when its key is allocated, its row existed when the
    previous state was written and that row carries written state.
    """
    table = lattice.neighbor_table().copy()
    if previous_count is not None:
        table[table >= previous_count] = -1
    if previous_live is not None:
        present = table >= 0
        present[present] = previous_live[table[present]]
        table[~present] = -1
    return table


def aflow_weights(h_prev: Tensor, x: Tensor, neighbors: np.ndarray, params: AFlowFusion) -> Tuple[Tensor, Tensor]:
    """
    Neighbor rows and their weights w_i = (alpha - min(dist(x_v, h_i), alpha)) * beta.

    Returns:
        gathered: (k, 2(d+1), C) neighbor rows, zero for absent neighbors.
        weights: (k, 2(d+1)), zero for absent neighbors.
    """
    k, channels = x.shape
    gathered = ad.gather_rows(h_prev, neighbors)
    dist = ad.row_norm(gathered - ad.reshape(x, (k, 1, channels)))
    weights = (params.alpha - ad.minimum(dist, params.alpha)) * params.beta
    return gathered, ad.mul(weights, (neighbors >= 0).astype(np.float64))


def aflow_flow(
    lattice: SparseLattice,
    h_prev: Tensor,
    x: Tensor,
    params: AFlowFusion,
    previous_count: Optional[int] = None,
    previous_live: Optional[np.ndarray] = None,
) -> Tensor:
    """l_v = sum_i w_i h_i over the present one-hop neighbors of v in the previous state."""
    _check_pair(h_prev, x)
    if x.shape[0] != len(lattice):
        raise ShapeError(f"AFlow got {x.shape[0]} rows for {len(lattice)} vertices")
    neighbors = previous_neighbors(lattice, previous_count, previous_live)
    gathered, weights = aflow_weights(h_prev, x, neighbors, params)
    return ad.sum_(gathered * ad.reshape(weights, weights.shape + (1,)), axis=1)


def aflow_fuse(
    lattice: SparseLattice,
    h_prev: Tensor,
    x: Tensor,
    params: AFlowFusion,
    previous_count: Optional[int] = None,
    previous_live: Optional[np.ndarray] = None,
) -> Tensor:
    """
    h'_v = ReLU(W (x_v ++ l_v) + b), see ``aflow_flow``. The vertex's own
    previous row is not one of its neighbors.
    """
    flow = aflow_flow(lattice, h_prev, x, params, previous_count, previous_live)
    return ad.relu(params.fuse_weights(ad.concat([x, flow], axis=1)))


def aflow_direction(
    lattice: SparseLattice,
    h_prev: np.ndarray,
    x: np.ndarray,
    centroids: np.ndarray,
    previous_centroids: Optional[np.ndarray] = None,
    previous_count: Optional[int] = None,
    previous_live: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Coarse motion per vertex: from the vertex to its most similar previous neighbor.

    direction_v = centroid(argmin_i dist(x_v, h_i)) - centroid(v). Vertices
    without a present neighbor, or whose centroids are unknown (NaN), get a
    zero vector.

    Args:
        centroids: (k, 3) mean position of the current points touching each vertex.
        previous_centroids: Same for the previous cloud; defaults to ``centroids``.
    """
    h_prev = h_prev.data if isinstance(h_prev, Tensor) else np.asarray(h_prev, dtype=np.float64)
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if previous_centroids is None:
        previous_centroids = centroids
    neighbors = previous_neighbors(lattice, previous_count, previous_live)
    present = neighbors >= 0
    diff = h_prev[np.maximum(neighbors, 0)] - x[:, None, :]
    dist = np.where(present, np.linalg.norm(diff, axis=-1), np.inf)
    best = np.argmin(dist, axis=1)
    rows = np.arange(neighbors.shape[0])
    chosen = neighbors[rows, best]
    direction = previous_centroids[np.maximum(chosen, 0)] - centroids
    valid = present.any(axis=1) & np.all(np.isfinite(direction), axis=1)
    return np.where(valid[:, None], direction, 0.0)


# --- Site wiring ---


def fuse_site(
    cell: Optional[FusionModule],
    lattice: SparseLattice,
    x: Tensor,
    live: np.ndarray,
    prev: Optional[TemporalState],
) -> Tuple[Tensor, np.ndarray, Optional[TemporalState]]:
    """
    Apply one fusion site at one timestep.

    Without a cell the input passes through and no state is kept. At the
    first timestep (no previous state) the input becomes the state as is,
    with a zero LSTM cell state. Otherwise the previous state is aligned to
    the current lattice and fused with the input; rows that are live now or
    were live before are written.

    Returns:
        (output values, output liveness, new state)
    """
    if cell is None:
        return x, live, None
    k = x.shape[0]
    if prev is None:
        c0 = ad.constant(np.zeros(x.shape)) if isinstance(cell, LSTMFusion) else None
        return x, live, TemporalState(hidden=x, cell=c0, vertex_count_at_write=k, live=live.copy())

    h_prev = align_states(prev, k)
    out_live = live | align_live(prev, k)
    c_new = None
    if isinstance(cell, GRUFusion):
        h_new = gru_fuse(h_prev, x, cell)
    elif isinstance(cell, LSTMFusion):
        h_new, c_new = lstm_fuse(h_prev, align_cell(prev, k), x, cell)
        c_new = mask_rows(c_new, out_live)
    else:
        h_new = aflow_fuse(
            lattice, h_prev, x, cell, previous_count=prev.vertex_count_at_write, previous_live=align_live(prev, k)
        )
    h_new = mask_rows(h_new, out_live)
    return h_new, out_live, TemporalState(hidden=h_new, cell=c_new, vertex_count_at_write=k, live=out_live)
