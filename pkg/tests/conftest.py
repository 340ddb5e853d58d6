import os

import beartype  # to trigger the runtime typechecking
import numpy as np
import pytest

from temporal_lattice import autodiff as ad
from temporal_lattice.datatypes import ModelConfig, SequenceConfig, SynthSceneConfig
from temporal_lattice.synthetic import write_dataset


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture
def float64():
    """Run the test body with 64-bit tensors, as the gradient checks do."""
    with ad.default_dtype(np.float64):
        yield


@pytest.fixture
def tiny_config() -> ModelConfig:
    """Two resolution levels with a handful of channels; runs in milliseconds."""
    return ModelConfig(fusion="GRU-GRU-AFlow-GRU", widths=[4, 6], num_classes=7, feature_dim=1, seed=0)


@pytest.fixture
def tiny_sequence() -> SequenceConfig:
    return SequenceConfig(n=3, s=1, sigma=0.6)


@pytest.fixture
def small_synth_config() -> SynthSceneConfig:
    return SynthSceneConfig(
        num_sequences=2,
        frame_count=5,
        num_static=3,
        num_moving=2,
        points_per_object=25,
        ground_points=40,
        extent=8.0,
        seed=7,
    )


@pytest.fixture
def synthetic_root(tmp_path, small_synth_config):
    """A small synthetic dataset on disk in the SemanticKITTI layout."""
    root = tmp_path / "synthetic"
    write_dataset(root, small_synth_config)
    return root


@pytest.fixture
def run_slow():
    """
    Gate for the training-based acceptance tests.

    Requires the following environment variable:
    - TEMPORAL_LATTICE_RUN_SLOW (set to 1/true/yes)
    """
    if os.environ.get("TEMPORAL_LATTICE_RUN_SLOW", "").lower() not in ("1", "true", "yes"):
        pytest.skip(
            "Set TEMPORAL_LATTICE_RUN_SLOW=1 to run the slow training tests (several minutes of CPU)."
        )
