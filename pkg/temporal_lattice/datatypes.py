"""
Pydantic models for everything that is configured, serialized or passed between modules.
"""

from __future__ import annotations

from enum import Enum
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .errors import ConfigError


class FusionCell(str, Enum):
    GRU = "GRU"
    LSTM = "LSTM"
    AFlow = "AFlow"


FUSION_SITES = ("early", "middle", "bottleneck", "late")


class FusionSpec(BaseModel):
    """
    Which recurrent cell sits at each of the four fusion sites.

    The hyphen notation lists early, middle, bottleneck and late in order,
    "/" marking a site without fusion, e.g. "GRU-GRU-AFlow-GRU" or "GRU-GRU-/-GRU".
    """

    early: Optional[FusionCell] = None
    middle: Optional[FusionCell] = None
    bottleneck: Optional[FusionCell] = None
    late: Optional[FusionCell] = None

    @classmethod
    def parse(cls, text: str) -> "FusionSpec":
        """
        Parse the hyphen notation.

        Raises:
            ConfigError: If the string does not have four slots or names an unknown cell.
        """
        tokens = text.strip().split("-")
        if len(tokens) != 4:
            raise ConfigError(f"Fusion spec '{text}' must have four hyphen-separated slots, got {len(tokens)}")
        lookup = {cell.value.lower(): cell for cell in FusionCell}
        slots = {}
        for site, token in zip(FUSION_SITES, tokens):
            token = token.strip()
            if token == "/":
                slots[site] = None
            elif token.lower() in lookup:
                slots[site] = lookup[token.lower()]
            else:
                raise ConfigError(
                    f"Unknown fusion cell '{token}' at the {site} site of '{text}'. Choices: GRU, LSTM, AFlow, /"
                )
        return cls(**slots)

    def sites(self) -> List[Tuple[str, Optional[FusionCell]]]:
        return [(site, getattr(self, site)) for site in FUSION_SITES]

    @property
    def has_fusion(self) -> bool:
        return any(cell is not None for _, cell in self.sites())

    def __str__(self) -> str:
        return "-".join("/" if cell is None else cell.value for _, cell in self.sites())


def _check_sigma(value):
    """A scalar or per-axis lattice scale, every entry strictly positive."""
    values = value if isinstance(value, list) else [value]
    if not values or any(v <= 0 for v in values):
        raise ValueError(f"sigma must be strictly positive, got {value}")
    return value


class SequenceConfig(BaseModel):
    """Sequence length n, cloud scope s, lattice scale and the reflectance toggle."""

    n: int = Field(default=4, ge=1)
    s: int = Field(default=3, ge=1)
    sigma: Union[float, List[float]] = 0.6
    use_reflectance: bool = True

    @field_validator("sigma")
    @classmethod
    def _positive_sigma(cls, value):
        return _check_sigma(value)


class ModelConfig(BaseModel):
    fusion: str = "GRU-GRU-AFlow-GRU"
    widths: List[int] = Field(default_factory=lambda: [16, 32, 64])
    num_classes: int = Field(default=7, ge=2)
    dim: int = Field(default=3, ge=1)
    feature_dim: int = Field(default=1, ge=0)
    ignore_label: int = 0
    class_weights: Optional[List[float]] = None
    seed: int = 0

    @field_validator("widths")
    @classmethod
    def _valid_widths(cls, value):
        if not value or any(w < 1 for w in value):
            raise ValueError(f"widths must be a nonempty list of positive integers, got {value}")
        return value

    @field_validator("fusion")
    @classmethod
    def _valid_fusion(cls, value):
        FusionSpec.parse(value)
        return value

    @model_validator(mode="after")
    def _weights_match_classes(self):
        if self.class_weights is not None and len(self.class_weights) != self.num_classes:
            raise ValueError(f"class_weights has {len(self.class_weights)} entries for {self.num_classes} classes")
        return self

    @property
    def fusion_spec(self) -> FusionSpec:
        return FusionSpec.parse(self.fusion)

    @property
    def levels(self) -> int:
        """Number of downsampling steps."""
        return len(self.widths) - 1


class OptimConfig(BaseModel):
    lr: float = 0.001
    lr_min: float = 0.0
    weight_decay: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    restart_period_epochs: float = Field(default=3.0, gt=0)


class AugmentConfig(BaseModel):
    enabled: bool = True
    rotate: bool = True
    mirror: bool = True
    translation_range: float = Field(default=2.0, ge=0)
    noise_sigma: float = Field(default=0.01, ge=0)


class ClassInfo(BaseModel):
    id: int
    name: str
    moving: bool = False


class SynthSceneConfig(BaseModel):
    """Desk-scale moving/static scene generator settings."""

    num_sequences: int = Field(default=2, ge=1)
    frame_count: int = Field(default=12, ge=1)
    num_static: int = Field(default=4, ge=0)
    num_moving: int = Field(default=3, ge=0)
    static_speed: Tuple[float, float] = (0.0, 0.0)
    moving_speed: Tuple[float, float] = (0.6, 1.2)
    points_per_object: int = Field(default=120, ge=1)
    ground_points: int = Field(default=300, ge=0)
    extent: float = Field(default=12.0, gt=0)
    noise_sigma: float = Field(default=0.01, ge=0)
    seed: int = 0

    @field_validator("static_speed", "moving_speed")
    @classmethod
    def _ordered_range(cls, value):
        if value[0] < 0 or value[1] < value[0]:
            raise ValueError(f"speed range must satisfy 0 <= low <= high, got {value}")
        return value


class DatasetManifest(BaseModel):
    name: str
    classes: List[ClassInfo]
    ignore_label: int = 0
    sequences: List[str] = Field(default_factory=list)
    synthetic: Optional[SynthSceneConfig] = None

    @property
    def num_classes(self) -> int:
        return max(c.id for c in self.classes) + 1


class RunConfig(BaseModel):
    """Every setting of one command line run, serialized into its output directory."""

    subcommand: str
    dataset_root: Optional[str] = None
    output_dir: str = "runs/latest"
    checkpoint: Optional[str] = None
    fusion: str = "GRU-GRU-AFlow-GRU"
    n: int = Field(default=4, ge=1)
    s: int = Field(default=3, ge=1)
    sigma: Union[float, List[float]] = 0.6
    widths: List[int] = Field(default_factory=lambda: [16, 32, 64])
    epochs: int = Field(default=10, ge=0)
    seed: int = 0
    use_reflectance: bool = True
    accumulate: bool = False
    max_samples: Optional[int] = None
    validation_sequences: List[str] = Field(default_factory=list)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)

    @field_validator("fusion")
    @classmethod
    def _valid_fusion(cls, value):
        FusionSpec.parse(value)
        return value

    @field_validator("sigma")
    @classmethod
    def _positive_sigma(cls, value):
        return _check_sigma(value)

    def sequence_config(self) -> SequenceConfig:
        return SequenceConfig(n=self.n, s=self.s, sigma=self.sigma, use_reflectance=self.use_reflectance)


class ParameterEntry(BaseModel):
    name: str
    shape: List[int]
    offset: int


class CheckpointManifest(BaseModel):
    format_version: int = 1
    package_version: str
    fusion: str
    model: ModelConfig
    sequence: SequenceConfig
    epoch: int = 0
    step: int = 0
    parameters: List[ParameterEntry]
    optimizer_scalars: Optional[Dict[str, float]] = None
    optimizer_moments: List[ParameterEntry] = Field(default_factory=list)


class IoUReport(BaseModel):
    per_class: Dict[str, Optional[float]]
    miou: Optional[float]
    static_miou: Optional[float] = None
    moving_miou: Optional[float] = None
    evaluated_points: int = 0


class PointCloud(BaseModel):
    """
    One scan P = (G, F) with optional labels and the pose into the common frame.

    Attributes:
        positions: (m, d) positions G, meters unless ``scaled_by`` is set.
        features: (m, f_d) feature matrix F (reflectance, or zero columns).
        labels: Optional (m,) integer labels.
        pose: 4x4 rigid transform of this scan into the world frame.
        scaled_by: The sigma the positions were divided by, when already scaled.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    positions: np.ndarray
    features: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    pose: np.ndarray = Field(default_factory=lambda: np.eye(4))
    sequence_id: Optional[str] = None
    frame_index: Optional[int] = None
    scaled_by: Optional[List[float]] = None

    @field_validator("positions")
    @classmethod
    def _finite_positions(cls, value):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim != 2:
            raise ValueError(f"positions must be an (m, d) matrix, got shape {value.shape}")
        if not np.all(np.isfinite(value)):
            raise ValueError("positions contain non-finite values")
        return value

    @field_validator("pose")
    @classmethod
    def _rigid_pose(cls, value):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != (4, 4):
            raise ValueError(f"pose must be 4x4, got shape {value.shape}")
        return value

    @model_validator(mode="after")
    def _aligned_rows(self):
        m = self.positions.shape[0]
        if self.features is None:
            self.features = np.zeros((m, 0), dtype=np.float64)
        else:
            self.features = np.asarray(self.features, dtype=np.float64).reshape(m, -1)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (m,):
                raise ValueError(f"labels have shape {self.labels.shape} for {m} points")
        return self

    @property
    def num_points(self) -> int:
        return self.positions.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def meters(self) -> np.ndarray:
        """Positions in meters, undoing the sigma scaling when it was applied."""
        if self.scaled_by is None:
            return self.positions
        return self.positions * np.asarray(self.scaled_by)

    def replace(self, **changes) -> "PointCloud":
        data = {
            "positions": self.positions,
            "features": self.features,
            "labels": self.labels,
            "pose": self.pose,
            "sequence_id": self.sequence_id,
            "frame_index": self.frame_index,
            "scaled_by": self.scaled_by,
        }
        data.update(changes)
        return PointCloud(**data)


class SequenceSample(BaseModel):
    """n clouds in the anchor cloud's frame, oldest first."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    clouds: List[PointCloud]
    indices: List[int]
    ignore_label: int = 0
    sequence_id: Optional[str] = None

    @model_validator(mode="after")
    def _indices_match(self):
        if len(self.clouds) != len(self.indices):
            raise ValueError(f"{len(self.clouds)} clouds but {len(self.indices)} dataset indices")
        return self

    @property
    def anchor(self) -> PointCloud:
        return self.clouds[-1]
