"""Adam optimizer and the reduce-on-plateau learning-rate schedule."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GradientError, PreconditionError, ShapeError

log = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    """Adam moments plus the plateau scheduler's bookkeeping.

    Moments are created lazily the first time a parameter receives a gradient, so a
    state can follow a model whose trainable set changes between phases.
    """

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    # Plateau scheduler
    factor: float = 0.5
    patience: int = 5
    min_delta: float = 1e-4
    best_loss: float = math.inf
    bad_epochs: int = 0

    def scalars(self) -> dict:
        """Everything except the moment arrays (for checkpoint metadata)."""
        return {
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step": self.step,
            "factor": self.factor,
            "patience": self.patience,
            "min_delta": self.min_delta,
            "best_loss": None if math.isinf(self.best_loss) else self.best_loss,
            "bad_epochs": self.bad_epochs,
        }

    @classmethod
    def from_scalars(cls, data: dict, m: dict | None = None, v: dict | None = None) -> "OptimizerState":
        data = dict(data)
        if data.get("best_loss") is None:
            data["best_loss"] = math.inf
        return cls(**data, m=dict(m or {}), v=dict(v or {}))


def adam_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """Apply one bias-corrected Adam update for every parameter that has a gradient.

    Parameters without a gradient are left untouched (same array object).

    Raises:
        GradientError: If any gradient holds NaN/Inf. Nothing is updated in that case.
        ShapeError: If a gradient does not match its parameter's shape.
    """
    for key, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise GradientError(f"Non-finite gradient for `{key}` at optimizer step {state.step + 1}; update aborted")
        if grad.shape != params[key].shape:
            raise ShapeError(
                f"Gradient for `{key}` has shape {grad.shape}, parameter has {params[key].shape}",
                expected=params[key].shape,
                actual=grad.shape,
            )

    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for key, grad in grads.items():
        m = state.beta1 * state.m.get(key, np.zeros_like(grad)) + (1.0 - state.beta1) * grad
        v = state.beta2 * state.v.get(key, np.zeros_like(grad)) + (1.0 - state.beta2) * grad * grad
        state.m[key], state.v[key] = m, v
        params[key] = params[key] - state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)

    return params, state


def reduce_lr_on_plateau(state: OptimizerState, validation_loss: float) -> OptimizerState:
    """Halve the learning rate after `patience` calls without improvement.

    An improvement is a loss below `best_loss - min_delta`; it resets the counter.
    After a reduction the counter also restarts.
    """
    if not math.isfinite(validation_loss):
        raise PreconditionError(f"Validation loss must be finite, got {validation_loss}")

    if validation_loss < state.best_loss - state.min_delta:
        state.best_loss = validation_loss
        state.bad_epochs = 0
        return state

    state.bad_epochs += 1
    if state.bad_epochs >= state.patience:
        state.learning_rate *= state.factor
        state.bad_epochs = 0
        log.debug(f"Plateau reached, learning rate reduced to {state.learning_rate:g}")
    return state
