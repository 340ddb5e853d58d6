# Core entry points; the submodules hold the rest
from .datatypes import FusionSpec, ModelConfig, PointCloud, RunConfig, SequenceConfig, SequenceSample
from .errors import (
    ConfigError,
    ConsistencyError,
    DataFormatError,
    InvariantViolation,
    ShapeError,
    TemporalLatticeError,
)
from .lattice import SparseLattice
from .model import TemporalLatticeNet, build_model, forward_sequence, infer_step, training_step
from .version import VERSION

# Single source of truth lives in version.py, updated by bumpver.
__version__ = VERSION

__all__ = [
    "FusionSpec",
    "ModelConfig",
    "PointCloud",
    "RunConfig",
    "SequenceConfig",
    "SequenceSample",
    "TemporalLatticeError",
    "ConfigError",
    "ConsistencyError",
    "DataFormatError",
    "InvariantViolation",
    "ShapeError",
    "SparseLattice",
    "TemporalLatticeNet",
    "build_model",
    "forward_sequence",
    "infer_step",
    "training_step",
    "__version__",
]
