import json

import beartype  # to trigger the runtime typechecking
import numpy as np
import pytest
from loguru import logger
from pydantic import ValidationError

from temporal_lattice import autodiff as ad
from temporal_lattice.checkpoint import load_checkpoint
from temporal_lattice.data_io import SequenceDataset, iter_samples
from temporal_lattice.datatypes import OptimConfig, RunConfig, SynthSceneConfig
from temporal_lattice.evaluation import moving_static_accuracy
from temporal_lattice.model import forward_sequence
from temporal_lattice.synthetic import SYNTH_CLASSES, write_dataset
from temporal_lattice.training import METRICS_NAME, Trainer, model_config_for


def _config(tmp_path, **changes):
    settings = dict(
        subcommand="train",
        output_dir=str(tmp_path / "run"),
        widths=[4, 6],
        n=2,
        s=1,
        epochs=1,
        max_samples=3,
        seed=0,
    )
    settings.update(changes)
    return RunConfig(**settings)


@pytest.mark.parametrize("use_reflectance", [True, False])
def test_one_epoch_with_and_without_reflectance(synthetic_root, tmp_path, use_reflectance):
    config = _config(tmp_path, use_reflectance=use_reflectance)
    dataset = SequenceDataset(synthetic_root, use_reflectance=use_reflectance)
    trainer = Trainer(config, dataset)
    assert trainer.model.config.feature_dim == (1 if use_reflectance else 0)
    history = trainer.train()
    assert len(history) == 1
    assert history[0]["loss"] is not None and np.isfinite(history[0]["loss"])
    assert "train_miou" in history[0]
    lines = (tmp_path / "run" / METRICS_NAME).read_text().splitlines()
    assert sum(json.loads(line)["event"] == "step" for line in lines) == 3
    model, manifest = load_checkpoint(tmp_path / "run" / "checkpoints" / "epoch_001")
    assert manifest.step == 3
    assert model.config.feature_dim == trainer.model.config.feature_dim


def test_identical_seeds_give_identical_metrics(synthetic_root, tmp_path):
    dataset = SequenceDataset(synthetic_root)
    first = Trainer(_config(tmp_path / "a"), dataset).train()
    second = Trainer(_config(tmp_path / "b"), dataset).train()
    assert first == second


def test_accumulated_baseline_trains(synthetic_root, tmp_path):
    history = Trainer(_config(tmp_path, accumulate=True, fusion="/-/-/-/"), SequenceDataset(synthetic_root)).train()
    assert history[0]["loss"] is not None


def test_validation_split_is_reported(synthetic_root, tmp_path):
    config = _config(tmp_path, validation_sequences=["01"])
    trainer = Trainer(config, SequenceDataset(synthetic_root, sequences=["00"]), SequenceDataset(synthetic_root, sequences=["01"]))
    record = trainer.train()[0]
    assert "val_miou" in record
    assert "train_miou" not in record


def test_model_config_follows_the_dataset(synthetic_root, tmp_path):
    dataset = SequenceDataset(synthetic_root)
    model_config = model_config_for(_config(tmp_path), dataset)
    assert model_config.num_classes == 7
    assert model_config.widths == [4, 6]


def test_per_axis_sigma_trains_and_is_checkpointed(synthetic_root, tmp_path):
    trainer = Trainer(_config(tmp_path, sigma=[0.6, 0.6, 1.2]), SequenceDataset(synthetic_root))
    history = trainer.train()
    assert np.isfinite(history[0]["loss"])
    _, manifest = load_checkpoint(tmp_path / "run" / "checkpoints" / "epoch_001")
    assert manifest.sequence.sigma == [0.6, 0.6, 1.2]


@pytest.mark.parametrize("sigma", [0.0, [0.6, -0.6, 1.2], []])
def test_run_config_rejects_non_positive_sigma(tmp_path, sigma):
    with pytest.raises(ValidationError):
        _config(tmp_path, sigma=sigma)


def _moving_static_scores(model, dataset, config):
    predictions, labels = [], []
    with ad.no_grad():
        for sample in iter_samples(dataset, config.n, config.s, config.sigma, prefetch=0):
            predictions.append(np.argmax(forward_sequence(model, sample.clouds).data, axis=1))
            labels.append(sample.anchor.labels)
    predictions, labels = np.concatenate(predictions), np.concatenate(labels)
    return (
        moving_static_accuracy(predictions, labels, SYNTH_CLASSES),
        moving_static_accuracy(predictions, labels, SYNTH_CLASSES, balanced=True),
    )


def test_recurrence_separates_moving_from_static(run_slow, tmp_path):
    """
    Every object is a car or a person, half of them parked and half moving,
    so a single cloud carries no cue for the moving/static decision.
    """
    scene = SynthSceneConfig(
        num_sequences=4, frame_count=12, num_static=2, num_moving=2, ground_points=0, extent=40.0, seed=1
    )
    root = tmp_path / "data"
    write_dataset(root, scene)
    training = SequenceDataset(root, sequences=["00", "01", "02"])
    validation = SequenceDataset(root, sequences=["03"])
    scores = {}
    for fusion in ("GRU-GRU-AFlow-GRU", "/-/-/-/"):
        config = _config(
            tmp_path / fusion.replace("/", "none"),
            fusion=fusion,
            widths=[16, 32, 64],
            n=4,
            s=1,
            epochs=9,
            max_samples=None,
        )
        assert config.optim == OptimConfig()
        trainer = Trainer(config, training, validation)
        trainer.train()
        scores[fusion] = _moving_static_scores(trainer.model, validation, config)
        logger.info(f"✓ {fusion}: moving/static accuracy {scores[fusion][0]:.3f}, balanced {scores[fusion][1]:.3f}")
    plain, balanced = scores["GRU-GRU-AFlow-GRU"]
    assert plain >= 0.90 and balanced >= 0.90
    plain, balanced = scores["/-/-/-/"]
    assert plain <= 0.60 and balanced <= 0.60
