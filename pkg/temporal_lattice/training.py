"""
Epoch loop: training steps over assembled samples, validation mIoU,
JSON-lines metrics and one checkpoint per epoch.
"""

import json
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from loguru import logger
from tqdm import tqdm

from . import autodiff as ad
from .checkpoint import save_checkpoint
from .data_io import SequenceDataset, iter_samples, sample_keys
from .datatypes import ModelConfig, RunConfig
from .evaluation import ConfusionMatrix, moving_static_accuracy, moving_static_report
from .model import TemporalLatticeNet, build_model, forward_accumulated, forward_sequence, training_step
from .optim import Adam

METRICS_NAME = "metrics.jsonl"


def model_config_for(config: RunConfig, dataset: SequenceDataset) -> ModelConfig:
    return ModelConfig(
        fusion=config.fusion,
        widths=config.widths,
        num_classes=dataset.manifest.num_classes,
        feature_dim=1 if config.use_reflectance else 0,
        ignore_label=dataset.ignore_label,
        seed=config.seed,
    )


def evaluate_samples(
    model: TemporalLatticeNet,
    dataset: SequenceDataset,
    config: RunConfig,
    max_samples: Optional[int] = None,
) -> Dict[str, Optional[float]]:
    """mIoU and moving/static accuracy of windowed predictions on every labeled sample."""
    cm = ConfusionMatrix(model.config.num_classes, dataset.ignore_label)
    predictions, labels = [], []
    samples = iter_samples(dataset, config.n, config.s, config.sigma, max_samples=max_samples, prefetch=0)
    with ad.no_grad():
        for sample in samples:
            if sample.anchor.labels is None:
                continue
            forward = forward_accumulated if config.accumulate else forward_sequence
            predicted = np.argmax(forward(model, sample.clouds).data, axis=1)
            cm.accumulate(predicted, sample.anchor.labels)
            predictions.append(predicted)
            labels.append(sample.anchor.labels)
    report = moving_static_report(cm, dataset.classes)
    accuracy = None
    if predictions:
        accuracy = moving_static_accuracy(
            np.concatenate(predictions), np.concatenate(labels), dataset.classes, dataset.ignore_label
        )
    return {"miou": report.miou, "moving_miou": report.moving_miou, "moving_static_accuracy": accuracy}


class Trainer:
    """
    Train one model on one dataset.

    Attributes:
        config (RunConfig): Run settings; written to ``run_config.json``.
        dataset (SequenceDataset): Training sequences.
        validation (Optional[SequenceDataset]): Held-out sequences; the
            training data is evaluated instead when None.
        model (TemporalLatticeNet): The network being trained.
        optimizer (Adam): Optimizer over the model parameters.
    """

    def __init__(
        self,
        config: RunConfig,
        dataset: SequenceDataset,
        validation: Optional[SequenceDataset] = None,
        model: Optional[TemporalLatticeNet] = None,
    ):
        self.config = config
        self.dataset = dataset
        self.validation = validation
        self.model = model or build_model(config=model_config_for(config, dataset), sequence=config.sequence_config())
        self.optimizer = Adam(self.model.parameters(), config.optim)
        self.rng = np.random.default_rng(config.seed)
        self.output_dir = Path(config.output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.metrics_path = self.output_dir / METRICS_NAME
        self.step = 0

    def log_metrics(self, record: dict) -> None:
        with self.metrics_path.open("a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def checkpoint(self, epoch: int) -> Path:
        return save_checkpoint(
            self.output_dir / "checkpoints" / f"epoch_{epoch:03d}",
            self.model,
            self.optimizer,
            epoch=epoch,
            step=self.step,
        )

    def train(self) -> List[dict]:
        """
        Run every epoch; returns the per-epoch metric records.

        With zero epochs only the initial checkpoint is written.
        """
        config = self.config
        self.metrics_path.write_text("")
        last = self.checkpoint(0)
        num_samples = len(sample_keys(self.dataset, config.n, config.s))
        if config.max_samples is not None:
            num_samples = min(num_samples, config.max_samples)
        if num_samples == 0 and config.epochs:
            logger.warning(f"No complete sample windows for n={config.n}, s={config.s}; nothing to train on")
        logger.info(f"Training {self.model} for {config.epochs} epochs on {num_samples} samples per epoch")

        history = []
        for epoch in range(1, config.epochs + 1):
            losses = []
            samples = iter_samples(
                self.dataset,
                config.n,
                config.s,
                config.sigma,
                rng=self.rng,
                augment_config=config.augment,
                shuffle=True,
                max_samples=config.max_samples,
            )
            progress = tqdm(samples, total=num_samples, desc=f"epoch {epoch}", leave=False)
            for index, sample in enumerate(progress):
                self.optimizer.set_progress(epoch - 1 + index / max(num_samples, 1))
                labels = sample.anchor.labels
                if labels is None:
                    logger.warning(f"Sample {sample.sequence_id}:{sample.indices[-1]} has no labels, skipped")
                    continue
                loss = training_step(self.model, sample.clouds, labels, self.optimizer, accumulate=config.accumulate)
                if loss is None:
                    continue
                self.step += 1
                losses.append(loss)
                progress.set_postfix(loss=f"{loss:.4f}")
                self.log_metrics(
                    {"event": "step", "epoch": epoch, "step": self.step, "loss": loss, "lr": self.optimizer.current_lr()}
                )

            evaluation = evaluate_samples(
                self.model, self.validation or self.dataset, config, max_samples=config.max_samples
            )
            split = "val" if self.validation is not None else "train"
            record = {
                "event": "epoch",
                "epoch": epoch,
                "step": self.step,
                "loss": float(np.mean(losses)) if losses else None,
                "lr": self.optimizer.current_lr(),
                f"{split}_miou": evaluation["miou"],
                f"{split}_moving_miou": evaluation["moving_miou"],
                f"{split}_moving_static_accuracy": evaluation["moving_static_accuracy"],
                "rejected_steps": self.optimizer.state.rejected_steps,
            }
            self.log_metrics(record)
            history.append(record)
            last = self.checkpoint(epoch)
            logger.info(f"Epoch {epoch}: loss {record['loss']}, {split} mIoU {evaluation['miou']}")
        logger.info(f"Final checkpoint: {last}")
        return history
