"""
The recurrent U-shaped lattice network and its sequence-level entry points.

Block order for one timestep, finest level first:

    Distribute -> PointNet -> fusion(early) -> 2 x ResNet -> fusion(middle)
    -> [Downsample -> ResNet] per level -> fusion(bottleneck)
    -> [Upsample -> concat skip -> Conv -> ResNet] per level, with
       fusion(late) before the last ResNet
    -> DeformSlice -> Linear

All clouds of one sequence share the lattices of a ``LatticeHierarchy``;
fusion sites hand their ``TemporalState`` from one timestep to the next.
"""

from collections import deque
from typing import Deque, Dict, Iterable, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from . import autodiff as ad
from .autodiff import Tensor
from .datatypes import FUSION_SITES, FusionSpec, ModelConfig, PointCloud, SequenceConfig
from .errors import ConfigError, ConsistencyError, ShapeError
from .fusion import AFlowFusion, FusionModule, TemporalState, align_live, align_states, aflow_direction, build_cell, fuse_site
from .lattice_ops import (
    ConvParams,
    LatticeHierarchy,
    LinearParams,
    VertexBags,
    deform_slice,
    distribute,
    downsample,
    lattice_convolution,
    mask_rows,
    pointnet_aggregate,
    resnet_block,
    upsample,
)
from .optim import Adam
from .utils import optional_typecheck

ResNetParams = Tuple[ConvParams, ConvParams]


class FlowField(NamedTuple):
    """Per-vertex motion estimate of an AFlow site, in meters."""

    origins: np.ndarray
    directions: np.ndarray


class SequenceState:
    """
    Everything carried from one timestep to the next for one sequence.

    Attributes:
        hierarchy (LatticeHierarchy): Shared lattices of every level.
        sites (Dict[str, Optional[TemporalState]]): State of each fusion site.
        sequence_id (Optional[str]): Sequence the state belongs to.
        timestep (int): Number of clouds processed so far.
        flows (Dict[str, FlowField]): Latest AFlow directions, when recorded.
    """

    def __init__(self, model: "TemporalLatticeNet", sequence_id: Optional[str] = None):
        self.hierarchy = LatticeHierarchy(
            dim=model.config.dim, sigma=model.sequence.sigma, levels=model.config.levels, sequence_id=sequence_id
        )
        self.sites: Dict[str, Optional[TemporalState]] = {site: None for site in FUSION_SITES}
        self.sequence_id = sequence_id
        self.timestep = 0
        self.centroids: Dict[str, np.ndarray] = {}
        self.flows: Dict[str, FlowField] = {}

    def __repr__(self) -> str:
        return (
            f"SequenceState(sequence_id={self.sequence_id!r}, timestep={self.timestep}, "
            f"vertices={self.hierarchy.vertex_counts()})"
        )


class TemporalLatticeNet:
    """
    Parameters and forward pass of the recurrent lattice network.

    Attributes:
        config (ModelConfig): Widths, class count, fusion spec and seed.
        sequence (SequenceConfig): Lattice scale and sequence settings.
        spec (FusionSpec): Parsed fusion spec.
        cells (Dict[str, FusionModule]): Fusion cell per configured site.
        diagnostics (Dict[str, int]): Counters surfaced by the operators.
        record_flow (bool): Compute AFlow directions during forward passes.
    """

    def __init__(self, config: ModelConfig, sequence: Optional[SequenceConfig] = None):
        self.config = config
        self.sequence = sequence or SequenceConfig()
        self.spec = config.fusion_spec
        self.diagnostics: Dict[str, int] = {}
        self.record_flow = False
        if config.levels < 1:
            raise ConfigError(f"The network needs at least two widths (one downsampling level), got {config.widths}")

        rng = np.random.default_rng(config.seed)
        widths, d = config.widths, config.dim
        levels = config.levels
        self.pointnet = LinearParams.init(rng, d + config.feature_dim, widths[0], "pointnet")
        self.encoder_blocks = [self._resnet(rng, widths[0], f"encoder0.block{i}") for i in range(2)]
        self.down = [ConvParams.init(rng, d, widths[l], widths[l + 1], f"down{l + 1}") for l in range(levels)]
        self.down_blocks = [self._resnet(rng, widths[l + 1], f"encoder{l + 1}.block0") for l in range(levels)]
        self.reduce = [ConvParams.init(rng, d, widths[l] + widths[l + 1], widths[l], f"decoder{l}.reduce") for l in range(levels)]
        self.up_blocks = [self._resnet(rng, widths[l], f"decoder{l}.block0") for l in range(levels)]
        self.offset_net = LinearParams.init(rng, (d + 1) * widths[0], d + 1, "slice.offset", scale=0.1)
        self.classifier = LinearParams.init(rng, widths[0], config.num_classes, "classifier")

        site_widths = {"early": widths[0], "middle": widths[0], "bottleneck": widths[-1], "late": widths[0]}
        self.cells: Dict[str, FusionModule] = {
            site: build_cell(kind, rng, site_widths[site], f"fusion.{site}")
            for site, kind in self.spec.sites()
            if kind is not None
        }
        logger.debug(f"Built {self} with {self.parameter_count()} parameters")

    def _resnet(self, rng: np.random.Generator, channels: int, name: str) -> ResNetParams:
        d = self.config.dim
        return (
            ConvParams.init(rng, d, channels, channels, f"{name}.conv0"),
            ConvParams.init(rng, d, channels, channels, f"{name}.conv1"),
        )

    def __repr__(self) -> str:
        return f"TemporalLatticeNet(fusion={self.spec}, widths={self.config.widths}, classes={self.config.num_classes})"

    # --- Parameters ---

    def parameters(self) -> Dict[str, Tensor]:
        """All trainable tensors by name, in a fixed order."""
        params: Dict[str, Tensor] = {}
        params.update(self.pointnet.parameters())
        for block in self.encoder_blocks:
            for conv in block:
                params.update(conv.parameters())
        for level in range(self.config.levels):
            params.update(self.down[level].parameters())
            for conv in self.down_blocks[level]:
                params.update(conv.parameters())
            params.update(self.reduce[level].parameters())
            for conv in self.up_blocks[level]:
                params.update(conv.parameters())
        params.update(self.offset_net.parameters())
        params.update(self.classifier.parameters())
        for site in FUSION_SITES:
            if site in self.cells:
                params.update(self.cells[site].parameters())
        return params

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters().values()))

    def load_parameters(self, arrays: Dict[str, np.ndarray]) -> None:
        """
        Overwrite every parameter from ``arrays``.

        Raises:
            ShapeError: If a parameter is missing or has the wrong shape.
        """
        for name, param in self.parameters().items():
            if name not in arrays:
                raise ShapeError(f"Missing parameter '{name}'")
            value = np.asarray(arrays[name])
            if value.shape != param.shape:
                raise ShapeError(f"Parameter '{name}' has shape {value.shape}, expected {param.shape}")
            param.data = value.astype(param.dtype)

    # --- Forward pass of one timestep ---

    def step(self, cloud: PointCloud, state: SequenceState, with_logits: bool = True, fuse: bool = True) -> Optional[Tensor]:
        """
        Run one cloud through the network, updating ``state`` in place.

        Args:
            cloud: Cloud in the sequence's common frame.
            state: Lattices and fusion states of the sequence.
            with_logits: Also slice back to the points and classify.
            fuse: Use the fusion cells; when False every site passes through.

        Returns:
            Optional[Tensor]: (points, classes) logits when ``with_logits``.
        """
        if cloud.feature_dim != self.config.feature_dim:
            raise ShapeError(
                f"Cloud has {cloud.feature_dim} feature columns, the model expects {self.config.feature_dim}"
            )
        hierarchy = state.hierarchy
        fine = hierarchy.lattices[0]
        bags = distribute(cloud, fine)
        live = bags.counts() > 0
        context = (bags, cloud)

        x = pointnet_aggregate(bags, self.pointnet)
        x, live = self._fuse("early", 0, x, live, state, fuse, context)
        for block in self.encoder_blocks:
            x = mask_rows(resnet_block(x, fine, *block, live=live), live)
        x, live = self._fuse("middle", 0, x, live, state, fuse, context)

        skips = [(x, live)]
        levels = self.config.levels
        for level in range(levels):
            x, live = downsample(x, hierarchy, level, self.down[level], live)
            x = mask_rows(resnet_block(x, hierarchy.lattices[level + 1], *self.down_blocks[level], live=live), live)
            if level + 1 < levels:
                skips.append((x, live))
        x, live = self._fuse("bottleneck", levels, x, live, state, fuse, context)

        for level in reversed(range(levels)):
            skip, skip_live = skips[level]
            lattice = hierarchy.lattices[level]
            up = mask_rows(upsample(x, hierarchy.lattices[level + 1], lattice.keys, live), skip_live)
            x = lattice_convolution(ad.concat([skip, up], axis=1), lattice, self.reduce[level], preactivate=True)
            live = skip_live
            x = mask_rows(x, live)
            if level == 0:
                x, live = self._fuse("late", 0, x, live, state, fuse, context)
            x = mask_rows(resnet_block(x, lattice, *self.up_blocks[level], live=live), live)

        logger.debug(f"Timestep {state.timestep}: vertices per level {hierarchy.vertex_counts()}")
        if not with_logits:
            return None
        features = deform_slice(x, bags.simplex_index, bags.barycentric, self.offset_net, self.diagnostics)
        return self.classifier(features)

    def _fuse(
        self,
        site: str,
        level: int,
        x: Tensor,
        live: np.ndarray,
        state: SequenceState,
        fuse: bool,
        context: Tuple[VertexBags, PointCloud],
    ) -> Tuple[Tensor, np.ndarray]:
        cell = self.cells.get(site) if fuse else None
        lattice = state.hierarchy.lattices[level]
        prev = state.sites[site]
        if cell is not None and self.record_flow:
            self._record_flow(site, level, cell, x, prev, state, context)
        out, out_live, new_state = fuse_site(cell, lattice, x, live, prev)
        state.sites[site] = new_state
        return out, out_live

    def _record_flow(
        self,
        site: str,
        level: int,
        cell: FusionModule,
        x: Tensor,
        prev: Optional[TemporalState],
        state: SequenceState,
        context: Tuple[VertexBags, PointCloud],
    ) -> None:
        bags, cloud = context
        lattice = state.hierarchy.lattices[level]
        k = len(lattice)
        centroids = vertex_centroids(bags, cloud.meters(), state.hierarchy, level)
        previous = state.centroids.get(site)
        state.centroids[site] = centroids
        if not isinstance(cell, AFlowFusion) or prev is None or previous is None:
            return
        padded = np.full((k, centroids.shape[1]), np.nan)
        padded[: previous.shape[0]] = previous
        directions = aflow_direction(
            lattice,
            align_states(prev, k).data,
            x.data,
            centroids,
            previous_centroids=padded,
            previous_count=prev.vertex_count_at_write,
            previous_live=align_live(prev, k),
        )
        touched = np.all(np.isfinite(centroids), axis=1)
        state.flows[site] = FlowField(origins=centroids[touched], directions=directions[touched])


def vertex_centroids(bags: VertexBags, positions: np.ndarray, hierarchy: LatticeHierarchy, level: int) -> np.ndarray:
    """Mean position of the points reaching each vertex of ``level``; NaN where none do."""
    vertices = bags.vertex_index
    for step in range(level):
        vertices = hierarchy.parents(step)[vertices]
    k = len(hierarchy.lattices[level])
    counts = np.bincount(vertices, minlength=k)
    sums = np.zeros((k, positions.shape[1]))
    np.add.at(sums, vertices, positions[bags.point_index])
    with np.errstate(invalid="ignore", divide="ignore"):
        return sums / counts[:, None]


# --- Entry points ---


def build_model(
    spec: Union[FusionSpec, str, None] = None,
    config: Optional[ModelConfig] = None,
    sequence: Optional[SequenceConfig] = None,
) -> TemporalLatticeNet:
    """
    Build a network for a fusion spec.

    Args:
        spec: Fusion spec, parsed or in hyphen notation; overrides ``config.fusion``.
        config: Channel widths, class count and seed.
        sequence: Lattice scale and sequence settings.

    Raises:
        ConfigError: If the fusion spec names an unknown cell.
    """
    config = config or ModelConfig()
    if spec is not None:
        fusion = str(spec) if isinstance(spec, FusionSpec) else str(FusionSpec.parse(spec))
        config = config.model_copy(update={"fusion": fusion})
    return TemporalLatticeNet(config, sequence)


def forward_sequence(model: TemporalLatticeNet, clouds: Sequence[PointCloud], fuse: bool = True) -> Tensor:
    """
    Class logits for the points of the last cloud, fusing features of all earlier ones.

    The clouds must share a common frame. A fresh hierarchy is built, so
    the lattices grow only with these clouds.

    Raises:
        ConsistencyError: If ``clouds`` is empty.
    """
    if not clouds:
        raise ConsistencyError("forward_sequence needs at least one cloud")
    state = SequenceState(model, clouds[-1].sequence_id)
    logits = None
    for index, cloud in enumerate(clouds):
        logits = model.step(cloud, state, with_logits=index == len(clouds) - 1, fuse=fuse)
        state.timestep += 1
    return logits


def infer_step(
    model: TemporalLatticeNet, state: Optional[SequenceState], cloud: PointCloud
) -> Tuple[Tensor, SequenceState]:
    """
    Recursive inference: process one new cloud on top of the stored state.

    Chaining calls over c0..ct gives the same logits as
    ``forward_sequence(model, [c0, ..., ct])``. Passing ``state=None`` starts
    a new sequence.

    Raises:
        ConsistencyError: If the cloud belongs to another sequence than the state.
    """
    if state is None:
        state = SequenceState(model, cloud.sequence_id)
    elif state.sequence_id is not None and cloud.sequence_id is not None and state.sequence_id != cloud.sequence_id:
        raise ConsistencyError(
            f"Cloud of sequence '{cloud.sequence_id}' cannot continue the state of sequence '{state.sequence_id}'"
        )
    with ad.no_grad():
        logits = model.step(cloud, state, with_logits=True)
    state.timestep += 1
    return logits, state


def infer_chain(
    model: TemporalLatticeNet, clouds: Iterable[PointCloud], horizon: int, warmup: int = 0
) -> Iterator[Tuple[Tensor, SequenceState]]:
    """
    Recursive inference over a long stream of clouds with bounded state.

    The shared lattices only grow, so every ``horizon`` clouds the state is
    dropped and a new one is primed on the last ``warmup`` clouds before
    continuing. Between restarts the chain is plain ``infer_step``; the
    logits of a cloud equal ``forward_sequence`` over the clouds since the
    last restart, warm-up included.

    Yields:
        (logits, state) for every input cloud, in order.

    Raises:
        ConfigError: If ``horizon`` is not larger than ``warmup``.
    """
    if warmup < 0 or horizon <= warmup:
        raise ConfigError(f"Chain horizon ({horizon}) must exceed the warm-up length ({warmup})")
    recent: Deque[PointCloud] = deque(maxlen=warmup)
    state: Optional[SequenceState] = None
    for position, cloud in enumerate(clouds):
        if position and position % horizon == 0:
            counts = state.hierarchy.vertex_counts()
            state = None
            for previous in recent:
                _, state = infer_step(model, state, previous)
            logger.debug(f"Restarted chain at cloud {position} (dropped {counts} vertices, warm-up {warmup})")
        logits, state = infer_step(model, state, cloud)
        recent.append(cloud)
        yield logits, state


def merge_clouds(clouds: Sequence[PointCloud]) -> PointCloud:
    """Concatenate clouds sharing a frame into one; the last cloud's points come last."""
    if not clouds:
        raise ConsistencyError("Cannot merge an empty list of clouds")
    last = clouds[-1]
    labels = None
    if all(c.labels is not None for c in clouds):
        labels = np.concatenate([c.labels for c in clouds])
    return last.replace(
        positions=np.concatenate([c.positions for c in clouds]),
        features=np.concatenate([c.features for c in clouds]),
        labels=labels,
    )


def forward_accumulated(model: TemporalLatticeNet, clouds: Sequence[PointCloud]) -> Tensor:
    """
    Accumulated-cloud baseline: run the backbone once on the union of all
    clouds, without recurrence, and keep the logits of the last cloud's points.
    """
    merged = merge_clouds(clouds)
    state = SequenceState(model, merged.sequence_id)
    logits = model.step(merged, state, with_logits=True, fuse=False)
    last = clouds[-1].num_points
    return ad.gather_rows(logits, np.arange(merged.num_points - last, merged.num_points))


@optional_typecheck
def training_step(
    model: TemporalLatticeNet,
    clouds: List[PointCloud],
    labels: np.ndarray,
    optimizer: Adam,
    accumulate: bool = False,
) -> Optional[float]:
    """
    One optimisation step with back-propagation through every timestep.

    Args:
        model: Network to train.
        clouds: The n clouds of the sample, oldest first, in the anchor frame.
        labels: Labels of the last cloud.
        optimizer: Adam over ``model.parameters()``.
        accumulate: Train the accumulated-cloud baseline instead.

    Returns:
        Optional[float]: The loss, or None when every point carries the ignore label.
    """
    labels = np.asarray(labels, dtype=np.int64)
    ignore = model.config.ignore_label
    if not np.any(labels != ignore):
        logger.warning("Skipping training step: every point of the last cloud is unlabeled")
        return None
    optimizer.zero_grad()
    logits = forward_accumulated(model, clouds) if accumulate else forward_sequence(model, clouds)
    weights = None if model.config.class_weights is None else np.asarray(model.config.class_weights)
    loss = ad.cross_entropy(logits, labels, ignore_index=ignore, class_weights=weights)
    ad.backward(loss, optimizer.params.values())
    accepted = optimizer.step()
    value = float(loss.data)
    logger.debug(f"Training step loss {value:.5f} (accepted: {accepted})")
    return value
