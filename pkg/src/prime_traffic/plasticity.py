"""Plasticity indicators and expansion planning.

Two indicators are combined into one decision value:

- ``pr1``: effective rank of a hidden layer's weight matrix divided by its width
- ``pr2``: entropy efficiency of that layer's activation-norm histogram

``indicator = omega1 * pr1 + omega2 * pr2``; a layer whose indicator reaches the
trigger threshold is considered to have limited plasticity.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .common import SINGULAR_EPS
from .errors import DegenerateMatrixError, PreconditionError
from .model import PartitionedModel, forward

log = logging.getLogger(__name__)

# Tolerance on the trigger comparison so that e.g. 0.8 * 0.85 + 0.2 * 0.95 counts as 0.87
TRIGGER_TOLERANCE = 1e-9


@dataclass
class PlasticityConfig:
    omega1: float = 0.8
    omega2: float = 0.2
    trigger: float = 0.87
    alpha: float = 0.3
    bins: int = 16
    layer: int | None = 0  # None selects a layer at random from `seed`
    seed: int = 0
    probe_size: int = 256


@dataclass
class ExpansionConfig:
    factors: tuple[float, ...] = (1.25, 1.5, 2.0)
    safe: float = 0.80
    eps0: float = 1e-3


@dataclass
class PlasticityReport:
    """Result of one plasticity check.

    Attributes:
        layer: Probed hidden layer.
        pr1: Effective-rank ratio ``effective_rank / n``.
        pr2: Entropy efficiency of the activation norms.
        indicator: ``omega1 * pr1 + omega2 * pr2``.
        limited: Whether the indicator reached the trigger.
        effective_rank: Effective rank of the probed weight matrix.
        n: Neuron count (output width) of the probed layer.
        rank: Number of singular values above the retention threshold.
        hidden_layers: Number of hidden layers of the model.
        norms: Per-neuron L∞ activation norms over the probe batch.
    """

    layer: int
    pr1: float
    pr2: float
    indicator: float
    limited: bool
    effective_rank: float
    n: int
    rank: int
    hidden_layers: int = 1
    norms: np.ndarray | None = field(default=None, repr=False)

    def to_record(self) -> dict:
        return {
            "layer": self.layer,
            "pr1": self.pr1,
            "pr2": self.pr2,
            "indicator": self.indicator,
            "limited": self.limited,
            "effective_rank": self.effective_rank,
            "n": self.n,
            "rank": self.rank,
        }


@dataclass
class ExpansionPlan:
    """Widening decision.

    Attributes:
        layers: Hidden layers to widen.
        factor: Widening factor r.
        eps0: Standard deviation of the perturbation added to copied weights.
        predicted_pr1: Predicted effective-rank ratio after widening.
        saturated: No allowed factor reached the safe threshold; the largest was taken.
    """

    layers: list[int]
    factor: float
    eps0: float
    predicted_pr1: float
    saturated: bool = False


def singular_values(matrix: np.ndarray) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.size == 0:
        raise PreconditionError(f"Expected a non-empty 2-D matrix, got shape {matrix.shape}")
    return np.linalg.svd(matrix, compute_uv=False)


def effective_rank(matrix: np.ndarray, eps: float = SINGULAR_EPS) -> float:
    """Exponential of the Shannon entropy of the normalized singular values.

    Singular values at or below `eps` are discarded first.

    Raises:
        DegenerateMatrixError: If no singular value is above `eps`.
    """
    sigma = singular_values(matrix)
    kept = sigma[sigma > eps]
    if not kept.size:
        raise DegenerateMatrixError(f"All {sigma.size} singular values are <= {eps}; the layer is dead")
    p = kept / kept.sum()
    return float(np.exp(-np.sum(p * np.log(p))))


def matrix_rank(matrix: np.ndarray, eps: float = SINGULAR_EPS) -> int:
    return int(np.count_nonzero(singular_values(matrix) > eps))


def activation_norms(trace: np.ndarray) -> np.ndarray:
    """Per-neuron L∞ norm over all samples of a (samples, neurons) trace."""
    trace = np.asarray(trace, dtype=np.float64)
    if trace.ndim != 2 or trace.shape[0] == 0:
        raise PreconditionError(f"Activation trace must have shape (samples >= 1, neurons), got {trace.shape}")
    return np.abs(trace).max(axis=0)


def entropy_efficiency(trace: np.ndarray, bins: int = 16, alpha: float = 0.3) -> float:
    """Entropy (bits) of the histogram of per-neuron activation norms, divided by n**alpha.

    The histogram has `bins` equal-width bins over [0, max norm]. A trace that is zero
    everywhere yields 0.
    """
    if bins < 2:
        raise PreconditionError(f"At least 2 histogram bins are required, got {bins}")
    norms = activation_norms(trace)
    top = norms.max()
    if top == 0.0:
        return 0.0
    counts, _ = np.histogram(norms, bins=bins, range=(0.0, top))
    p = counts[counts > 0] / norms.size
    return float(-np.sum(p * np.log2(p)) / norms.size**alpha)


def combine(pr1: float, pr2: float, config: PlasticityConfig) -> tuple[float, bool]:
    indicator = config.omega1 * pr1 + config.omega2 * pr2
    return indicator, indicator >= config.trigger - TRIGGER_TOLERANCE


def select_layer(model: PartitionedModel, config: PlasticityConfig) -> int:
    if config.layer is None:
        return int(np.random.default_rng(config.seed).integers(model.n_layers))
    if not 0 <= config.layer < model.n_layers:
        raise PreconditionError(f"Probe layer {config.layer} does not exist; the model has {model.n_layers} hidden layers")
    return config.layer


def evaluate(
    model: PartitionedModel,
    inputs: np.ndarray,
    config: PlasticityConfig = PlasticityConfig(),
    encoded: np.ndarray | None = None,
) -> PlasticityReport:
    """Measure the plasticity of one hidden layer on the latest generation.

    Args:
        model: The model (read only).
        inputs: Inputs to trace activations on; at most `config.probe_size` rows are used.
        config: Weights, thresholds and probe-layer policy.
        encoded: Precomputed encoder output for `inputs`.

    Raises:
        DegenerateMatrixError: If the probed weight matrix is numerically zero.
    """
    if model.n_layers < 1:
        raise PreconditionError("The model has no hidden layer to probe")
    layer = select_layer(model, config)
    weight = model.effective_weight(layer)
    n = weight.shape[1]
    r_e = effective_rank(weight)
    rank = matrix_rank(weight)

    rows = slice(0, config.probe_size)
    result = forward(
        model, inputs[rows], train_mode=False, encoded=None if encoded is None else encoded[rows], keep_trace=False
    )
    trace = result.activations[layer]
    pr1 = r_e / n
    pr2 = entropy_efficiency(trace, config.bins, config.alpha)
    indicator, limited = combine(pr1, pr2, config)
    log.debug(f"Plasticity of layer {layer}: pr1={pr1:.4f} pr2={pr2:.4f} indicator={indicator:.4f} limited={limited}")
    return PlasticityReport(
        layer=layer,
        pr1=pr1,
        pr2=pr2,
        indicator=indicator,
        limited=limited,
        effective_rank=r_e,
        n=n,
        rank=rank,
        hidden_layers=model.n_layers,
        norms=activation_norms(trace),
    )


def predicted_pr1(effective_rank: float, rank: int, n: int, factor: float) -> float:
    """Effective-rank ratio expected after widening a width-n layer by `factor`."""
    delta = min((factor - 1.0) * n, n - rank)
    return (effective_rank + delta) / (factor * n)


def plan_expansion(report: PlasticityReport, config: ExpansionConfig = ExpansionConfig()) -> ExpansionPlan:
    """Pick the smallest allowed widening factor whose predicted pr1 drops below `config.safe`.

    If no factor gets there the largest one is returned with `saturated=True`.

    Raises:
        PreconditionError: If the report does not indicate limited plasticity.
    """
    if not report.limited:
        raise PreconditionError(
            f"Expansion planned for a layer with sufficient plasticity (indicator {report.indicator:.4f})"
        )
    factors = sorted(config.factors)
    layers = list(range(report.hidden_layers))
    for factor in factors:
        predicted = predicted_pr1(report.effective_rank, report.rank, report.n, factor)
        if predicted < config.safe:
            return ExpansionPlan(layers, factor, config.eps0, predicted)

    factor = factors[-1]
    predicted = predicted_pr1(report.effective_rank, report.rank, report.n, factor)
    log.warning(
        f"No widening factor in {factors} brings pr1 below {config.safe} "
        f"(best prediction {predicted:.4f} at r={factor}); using the largest"
    )
    return ExpansionPlan(layers, factor, config.eps0, predicted, saturated=True)
