"""
Adam with decoupled weight decay and a cosine annealing schedule with warm restarts.
"""

import math
from typing import Dict, Mapping, Optional

import numpy as np
from loguru import logger

from .autodiff import Tensor
from .datatypes import OptimConfig
from .errors import ShapeError
from .utils import optional_typecheck


class OptimState:
    """
    Per-parameter Adam moments plus step and schedule bookkeeping.

    Attributes:
        first_moment (Dict[str, np.ndarray]): m, keyed by parameter name.
        second_moment (Dict[str, np.ndarray]): v, keyed by parameter name.
        step (int): Number of accepted updates.
        rejected_steps (int): Updates skipped because a gradient was not finite.
        period_epochs (float): Epochs between two warm restarts.
        epoch_progress (float): Training progress in (fractional) epochs.
    """

    def __init__(self, period_epochs: float = 3.0):
        self.first_moment: Dict[str, np.ndarray] = {}
        self.second_moment: Dict[str, np.ndarray] = {}
        self.step = 0
        self.rejected_steps = 0
        self.period_epochs = period_epochs
        self.epoch_progress = 0.0

    def scalars(self) -> Dict[str, float]:
        return {
            "step": self.step,
            "rejected_steps": self.rejected_steps,
            "period_epochs": self.period_epochs,
            "epoch_progress": self.epoch_progress,
        }

    def load_scalars(self, scalars: Mapping[str, float]) -> None:
        self.step = int(scalars["step"])
        self.rejected_steps = int(scalars["rejected_steps"])
        self.period_epochs = float(scalars["period_epochs"])
        self.epoch_progress = float(scalars["epoch_progress"])


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: OptimState,
    lr: float,
    weight_decay: float,
    betas=(0.9, 0.999),
    eps: float = 1e-8,
) -> bool:
    """
    One Adam update with bias correction and decoupled weight decay.

    The decay term ``lr * weight_decay * param`` is applied from the
    pre-update parameter, separately from the adaptive step.

    Args:
        params: Parameters keyed by name; updated in place.
        grads: Gradients keyed by the same names.
        state: Moments and counters; created lazily per parameter.
        lr: Learning rate.
        weight_decay: Decoupled weight decay factor.

    Returns:
        bool: False when the step was rejected because a gradient was not finite.

    Raises:
        ShapeError: If a gradient does not match its parameter's shape.
    """
    for name, param in params.items():
        grad = grads[name]
        if grad.shape != param.shape:
            raise ShapeError(f"Gradient for '{name}' has shape {grad.shape}, parameter has {param.shape}")
    if not all(np.all(np.isfinite(grads[name])) for name in params):
        state.rejected_steps += 1
        logger.warning(f"Rejected optimizer step with non-finite gradient ({state.rejected_steps} so far)")
        return False

    beta1, beta2 = betas
    state.step += 1
    correction1 = 1.0 - beta1**state.step
    correction2 = 1.0 - beta2**state.step
    for name, param in params.items():
        grad = grads[name].astype(param.dtype, copy=False)
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        state.first_moment[name] = m
        state.second_moment[name] = v
        update = (m / correction1) / (np.sqrt(v / correction2) + eps)
        param.data = (param.data - lr * (weight_decay * param.data + update)).astype(param.dtype, copy=False)
    return True


@optional_typecheck
def cosine_lr(epoch_progress: float, lr_max: float, lr_min: float, period: float) -> float:
    """
    Cosine annealing from lr_max down to lr_min over ``period`` epochs.

    Progress past the period wraps around (warm restart); progress equal to
    the period still returns lr_min.
    """
    if period <= 0:
        raise ValueError(f"Restart period must be positive, got {period}")
    if epoch_progress > period:
        epoch_progress = math.fmod(epoch_progress, period)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * epoch_progress / period))


class Adam:
    """
    Stateful wrapper around ``adam_step`` reading gradients from the parameters.

    Attributes:
        params (Dict[str, Tensor]): Trainable parameters by name.
        config (OptimConfig): Learning rate, weight decay and schedule settings.
        state (OptimState): Moments and counters.
    """

    def __init__(self, params: Mapping[str, Tensor], config: Optional[OptimConfig] = None):
        self.params = dict(params)
        self.config = config or OptimConfig()
        self.state = OptimState(period_epochs=self.config.restart_period_epochs)

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()

    def current_lr(self) -> float:
        return cosine_lr(
            self.state.epoch_progress,
            self.config.lr,
            self.config.lr_min,
            self.state.period_epochs,
        )

    def set_progress(self, epoch_progress: float) -> None:
        self.state.epoch_progress = float(epoch_progress)

    def step(self) -> bool:
        grads = {
            name: param.grad if param.grad is not None else np.zeros_like(param.data)
            for name, param in self.params.items()
        }
        lr = self.current_lr()
        logger.trace(f"Adam step {self.state.step + 1} with lr {lr:.6g}")
        return adam_step(
            self.params,
            grads,
            self.state,
            lr=lr,
            weight_decay=self.config.weight_decay,
            betas=self.config.betas,
            eps=self.config.eps,
        )
