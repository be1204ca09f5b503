"""Replay-free incremental training.

Training procedures (all update the model in place and return it):

- `train_base`: first stage, every parameter trainable
- `lwf_train_task`: distillation against recorded old-head logits, encoder frozen
- `naive_train_task`: the same without distillation (plain fine-tuning)
- `ewc_train_task`: fine-tuning with a diagonal-Fisher quadratic penalty
- `widen` + `lwf_train_expanded`: Net2Net widening, then training of the new blocks only
- `prime_controller`: one stage of the plasticity-triggered cycle combining the above
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, FreezeViolation, PreconditionError
from .model import Generation, Partition, PartitionedModel, backward, forward
from .nn import ENCODER_KEYS, cross_entropy, log_softmax, softmax
from .optim import OptimizerState, adam_step, reduce_lr_on_plateau
from .plasticity import (
    ExpansionConfig,
    ExpansionPlan,
    PlasticityConfig,
    PlasticityReport,
    evaluate,
    plan_expansion,
)
from .synth import Stage

log = logging.getLogger(__name__)

EVAL_CHUNK = 1024


def derive_seed(*parts: int) -> int:
    """Independent 32-bit seed for a (seed, stage, epoch, ...) coordinate."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# ─── Configuration ───────────────────────────────────────────────────────────


@dataclass
class StallDetector:
    """New-task CE stall rule.

    Attributes:
        threshold: CE level τ; None means ``0.8 * ln(C_new)``.
        patience: Consecutive epochs the CE must stay above τ.
        min_rel_improvement: Relative improvement over those epochs that still counts as progress.
    """

    threshold: float | None = None
    patience: int = 5
    min_rel_improvement: float = 0.01

    def resolve(self, n_classes: int) -> float:
        if self.threshold is not None:
            return self.threshold
        return 0.8 * math.log(max(n_classes, 2))


@dataclass
class LwfConfig:
    lambda0: float = 1.0
    temperature: float = 2.0
    reg_coef: float = 1e-4
    max_epochs: int = 15
    batch_size: int = 128
    learning_rate: float = 1e-3
    lr_factor: float = 0.5
    lr_patience: int = 5
    stall: StallDetector = field(default_factory=StallDetector)

    def validate(self) -> None:
        problems = []
        if self.temperature <= 0:
            problems.append(f"temperature must be > 0, got {self.temperature}")
        if self.lambda0 < 0:
            problems.append(f"lambda0 must be >= 0, got {self.lambda0}")
        if self.reg_coef < 0:
            problems.append(f"reg_coef must be >= 0, got {self.reg_coef}")
        if problems:
            raise ConfigError(problems)


@dataclass
class EwcConfig:
    lambda_ewc: float = 100.0
    fisher_samples: int = 200

    def validate(self) -> None:
        if self.lambda_ewc < 0:
            raise ConfigError(f"lambda_ewc must be >= 0, got {self.lambda_ewc}")


@dataclass
class PrimeConfig:
    lwf: LwfConfig = field(default_factory=LwfConfig)
    plasticity: PlasticityConfig = field(default_factory=PlasticityConfig)
    expansion: ExpansionConfig = field(default_factory=ExpansionConfig)


# ─── Records ─────────────────────────────────────────────────────────────────


@dataclass
class EpochLog:
    stage: int
    method: str
    phase: str
    epoch: int
    ce: float
    distill: float
    reg: float
    ewc: float
    total: float
    val_loss: float | None
    val_acc: float | None
    lr: float


@dataclass
class TrainResult:
    epochs: list[EpochLog] = field(default_factory=list)
    stalled: bool = False
    head: int = -1
    optimizer: OptimizerState | None = None


@dataclass
class PlasticityCheck:
    stage: int
    epoch: int | None
    report: PlasticityReport

    def to_record(self) -> dict:
        return {"stage": self.stage, "epoch": self.epoch, **self.report.to_record()}


@dataclass
class ExpansionEvent:
    stage: int
    generation: int
    layer: int
    old_n: int
    new_n: int
    factor: float
    eps0: float
    predicted_pr1: float
    saturated: bool


@dataclass
class StageReport:
    """What happened during one stage.

    Attributes:
        path: "base" for the first stage, "short" when Step A completed, "full" when it
            was aborted in favour of widening.
        optimizer: Adam state at the end of the stage's last training phase.
    """

    stage: int
    method: str
    path: str
    epochs: list[EpochLog] = field(default_factory=list)
    checks: list[PlasticityCheck] = field(default_factory=list)
    expansions: list[ExpansionEvent] = field(default_factory=list)
    params_before: int = 0
    params_after: int = 0
    accuracies: dict[int, float] = field(default_factory=dict)
    optimizer: OptimizerState | None = None


EpochCallback = Callable[[EpochLog], None]


# ─── Losses ──────────────────────────────────────────────────────────────────


def distillation_loss(logits: np.ndarray, calibration: np.ndarray, temperature: float) -> tuple[float, np.ndarray]:
    """Cross-entropy of the tempered model distribution against tempered calibration targets.

    Both operands go through ``softmax(z / T)``. The loss is averaged over the batch.

    Returns:
        (loss, gradient w.r.t. `logits`).

    Raises:
        ConfigError: If `temperature` is not positive.
        PreconditionError: If the shapes differ.
    """
    if temperature <= 0:
        raise ConfigError(f"Distillation temperature must be > 0, got {temperature}")
    if logits.shape != calibration.shape:
        raise PreconditionError(f"Logits {logits.shape} and calibration {calibration.shape} differ in shape")
    n = max(logits.shape[0], 1)
    target = softmax(calibration / temperature)
    log_p = log_softmax(logits / temperature)
    loss = -np.sum(target * log_p) / n
    grad = (np.exp(log_p) - target) / (temperature * n)
    return float(loss), grad


@dataclass(frozen=True)
class CalibrationSet:
    """Old-head logits on the new task's training inputs, recorded once before training."""

    logits: dict[int, np.ndarray]
    rows: int


def record_calibration(model: PartitionedModel, x: np.ndarray, encoded: np.ndarray | None = None) -> CalibrationSet:
    """Record every attached head's logits on `x` with dropout disabled."""
    outputs = _eval_logits(model, x, encoded)
    logits = {}
    for idx, out in enumerate(outputs):
        out.setflags(write=False)
        logits[idx] = out
    return CalibrationSet(logits=logits, rows=len(x))


# ─── Helpers ─────────────────────────────────────────────────────────────────


def _encoder_frozen(model: PartitionedModel) -> bool:
    return all(key in model.frozen for key in ENCODER_KEYS)


def encode_all(model: PartitionedModel, x: np.ndarray) -> np.ndarray:
    if not len(x):
        return np.zeros((0, model.spec.d_model))
    return np.concatenate([model.encode(x[i : i + EVAL_CHUNK]) for i in range(0, len(x), EVAL_CHUNK)])


def _eval_logits(model: PartitionedModel, x: np.ndarray, encoded: np.ndarray | None = None) -> list[np.ndarray]:
    if not len(x):
        return [np.zeros((0, h.n_classes)) for h in model.heads]
    chunks = []
    for i in range(0, len(x), EVAL_CHUNK):
        enc = None if encoded is None else encoded[i : i + EVAL_CHUNK]
        chunks.append(forward(model, x[i : i + EVAL_CHUNK], train_mode=False, encoded=enc, keep_trace=False).logits)
    return [np.concatenate([c[h] for c in chunks]) for h in range(len(model.heads))]


def evaluate_accuracy(
    model: PartitionedModel, head: int, x: np.ndarray, y: np.ndarray, encoded: np.ndarray | None = None
) -> float:
    """Accuracy of one head on a labeled set (task-incremental protocol)."""
    if not len(y):
        return float("nan")
    logits = _eval_logits(model, x, encoded)[head]
    return float(np.mean(logits.argmax(axis=1) == y))


def check_frozen(model: PartitionedModel, snapshot: dict[str, np.ndarray]) -> None:
    """Raise `FreezeViolation` if any snapshotted parameter changed."""
    changed = [key for key, value in snapshot.items() if not np.array_equal(model.params[key], value)]
    if changed:
        raise FreezeViolation(f"Frozen parameters changed during training: {changed}")


def detect_stall(ce: Sequence[float], detector: StallDetector, n_classes: int = 2) -> bool:
    """True iff the last `patience` CE values all stay above τ without real improvement.

    Improvement is measured from the epoch before the window (or the window's first
    epoch when there is none) to the best epoch inside it.
    """
    patience = detector.patience
    if patience < 1 or len(ce) < patience:
        return False
    threshold = detector.resolve(n_classes)
    window = list(ce[-patience:])
    if min(window) <= threshold:
        return False
    reference = ce[-patience - 1] if len(ce) > patience else window[0]
    improvement = (reference - min(window)) / reference
    return improvement < detector.min_rel_improvement


# ─── Training loop ───────────────────────────────────────────────────────────


def _fit(
    model: PartitionedModel,
    stage: Stage,
    cfg: LwfConfig,
    *,
    head: int,
    seed: int,
    method: str,
    phase: str,
    lambda0: float,
    calibration: CalibrationSet | None = None,
    ewc: tuple[dict[str, np.ndarray], dict[str, np.ndarray], float] | None = None,
    stall: bool = False,
    stall_callback: Callable[[int], bool] | None = None,
    on_epoch: EpochCallback | None = None,
) -> TrainResult:
    """Shared mini-batch loop.

    `stall_callback(epoch)` is invoked when the stall detector fires; returning True
    aborts training, False resets the detector window.
    """
    x, y = stage.train.x, stage.train.y
    if not len(y):
        raise PreconditionError(f"Stage {stage.index} has an empty training set")
    cfg.validate()

    frozen_snapshot = model.snapshot(model.frozen)
    state = OptimizerState(learning_rate=cfg.learning_rate, factor=cfg.lr_factor, patience=cfg.lr_patience)
    cached = _encoder_frozen(model)
    x_enc = encode_all(model, x) if cached else None
    val_enc = encode_all(model, stage.val.x) if cached else None
    old_heads = [i for i in range(len(model.heads)) if i != head and calibration is not None and i in calibration.logits]
    trainable = model.trainable

    result = TrainResult(head=head, optimizer=state)
    ce_history: list[float] = []
    window_start = 0
    n = len(y)
    for epoch in range(1, cfg.max_epochs + 1):
        order = np.random.default_rng(derive_seed(seed, epoch)).permutation(n)
        sums = {"ce": 0.0, "distill": 0.0, "reg": 0.0, "ewc": 0.0}
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            res = forward(
                model,
                x[idx],
                train_mode=True,
                rng_seed=derive_seed(seed, epoch, b),
                encoded=None if x_enc is None else x_enc[idx],
            )
            ce, g_new = cross_entropy(res.logits[head], y[idx])
            head_grads = {head: g_new}
            distill = 0.0
            for i in old_heads:
                loss_i, g_i = distillation_loss(res.logits[i], calibration.logits[i][idx], cfg.temperature)
                distill += loss_i
                if lambda0 > 0:
                    head_grads[i] = lambda0 * g_i

            grads = backward(model, res, head_grads)
            reg = 0.0
            if cfg.reg_coef > 0:
                for key in trainable:
                    theta = model.params[key]
                    reg += cfg.reg_coef * float(np.sum(theta * theta))
                    grads[key] = grads[key] + 2.0 * cfg.reg_coef * theta
            penalty = 0.0
            if ewc is not None and ewc[2] > 0:
                fisher, anchor, lam = ewc
                for key, f in fisher.items():
                    delta = model.params[key] - anchor[key]
                    penalty += 0.5 * lam * float(np.sum(f * delta * delta))
                    grads[key] = grads[key] + lam * f * delta

            adam_step(model.params, grads, state)
            w = len(idx)
            sums["ce"] += ce * w
            sums["distill"] += distill * w
            sums["reg"] += reg * w
            sums["ewc"] += penalty * w

        means = {k: v / n for k, v in sums.items()}
        total = lambda0 * means["distill"] + means["ce"] + means["reg"] + means["ewc"]

        val_loss = val_acc = None
        if len(stage.val.y):
            logits = _eval_logits(model, stage.val.x, val_enc)[head]
            val_loss, _ = cross_entropy(logits, stage.val.y)
            val_acc = float(np.mean(logits.argmax(axis=1) == stage.val.y))
        reduce_lr_on_plateau(state, means["ce"] if val_loss is None else val_loss)
        check_frozen(model, frozen_snapshot)

        entry = EpochLog(
            stage=stage.index,
            method=method,
            phase=phase,
            epoch=epoch,
            ce=means["ce"],
            distill=means["distill"],
            reg=means["reg"],
            ewc=means["ewc"],
            total=total,
            val_loss=val_loss,
            val_acc=val_acc,
            lr=state.learning_rate,
        )
        result.epochs.append(entry)
        if on_epoch:
            on_epoch(entry)
        log.debug(
            f"stage {stage.index} {method}/{phase} epoch {epoch}: ce={entry.ce:.4f} distill={entry.distill:.4f} "
            f"total={entry.total:.4f} val_acc={val_acc}"
        )

        ce_history.append(entry.ce)
        if stall and detect_stall(ce_history[window_start:], cfg.stall, stage.n_classes):
            if stall_callback is None or stall_callback(epoch):
                result.stalled = True
                return result
            window_start = len(ce_history)

    return result


# ─── Public procedures ───────────────────────────────────────────────────────


def _attach(model: PartitionedModel, stage: Stage, seed: int) -> int:
    return model.add_head(stage.n_classes, seed=derive_seed(seed, stage.index, 1), task=stage.index)


def _lwf_trainable(model: PartitionedModel, head: int) -> list[str]:
    return model.keys(Partition.S, Partition.E) + model.head_keys(head)


def train_base(
    model: PartitionedModel,
    stage: Stage,
    cfg: LwfConfig,
    seed: int,
    method: str = "base",
    on_epoch: EpochCallback | None = None,
) -> tuple[PartitionedModel, TrainResult]:
    """Train the first task with every parameter trainable."""
    head = _attach(model, stage, seed)
    model.set_trainable(model.params)
    result = _fit(model, stage, cfg, head=head, seed=derive_seed(seed, stage.index), method=method, phase="base", lambda0=0.0, on_epoch=on_epoch)
    model.retire_heads()
    return model, result


def lwf_train_task(
    model: PartitionedModel,
    stage: Stage,
    cfg: LwfConfig,
    seed: int,
    method: str = "lwf",
    on_epoch: EpochCallback | None = None,
    stall_callback: Callable[[int], bool] | None = None,
) -> tuple[PartitionedModel, TrainResult]:
    """Learn a new task with distillation against the old heads (Step A).

    Calibration logits are recorded before the new head is attached and before any
    update. Only the shared hidden stack (including earlier expansions) and the new head
    are trainable.
    """
    if not model.heads:
        raise PreconditionError("lwf_train_task needs a model with at least one trained head")
    if stage.n_classes < 1:
        raise PreconditionError(f"Stage {stage.index} has no classes")
    calibration = record_calibration(model, stage.train.x)
    head = _attach(model, stage, seed)
    model.set_trainable(_lwf_trainable(model, head))
    result = _fit(
        model,
        stage,
        cfg,
        head=head,
        seed=derive_seed(seed, stage.index),
        method=method,
        phase="A",
        lambda0=cfg.lambda0,
        calibration=calibration,
        stall=stall_callback is not None,
        stall_callback=stall_callback,
        on_epoch=on_epoch,
    )
    model.retire_heads()
    return model, result


def naive_train_task(
    model: PartitionedModel,
    stage: Stage,
    cfg: LwfConfig,
    seed: int,
    on_epoch: EpochCallback | None = None,
) -> tuple[PartitionedModel, TrainResult]:
    """Plain fine-tuning of the hidden stack and a new head: LwF with λ0 = 0."""
    return lwf_train_task(model, stage, replace(cfg, lambda0=0.0), seed, method="base", on_epoch=on_epoch)


def estimate_fisher(
    model: PartitionedModel, x: np.ndarray, keys: list[str], samples: int
) -> dict[str, np.ndarray]:
    """Empirical diagonal Fisher of the old heads over (at most `samples`) inputs.

    For every sample the log-likelihood of each old head's predicted class is
    differentiated; the Fisher is the mean of the squared per-sample gradients.
    """
    keep_frozen = model.frozen
    model.set_trainable(keys)
    try:
        fisher = {key: np.zeros_like(model.params[key]) for key in keys}
        rows = x[:samples]
        encoded = encode_all(model, rows) if _encoder_frozen(model) else None
        for i in range(len(rows)):
            enc = None if encoded is None else encoded[i : i + 1]
            res = forward(model, rows[i : i + 1], train_mode=False, encoded=enc)
            head_grads = {}
            for h, logits in enumerate(res.logits):
                p = softmax(logits)
                onehot = np.zeros_like(p)
                onehot[0, int(p.argmax())] = 1.0
                head_grads[h] = p - onehot  # gradient of the negative log-likelihood
            for key, grad in backward(model, res, head_grads).items():
                fisher[key] += grad * grad
        for key in fisher:
            fisher[key] /= max(len(rows), 1)
    finally:
        model.frozen = keep_frozen
    return fisher


def ewc_train_task(
    model: PartitionedModel,
    stage: Stage,
    cfg: LwfConfig,
    ewc: EwcConfig,
    seed: int,
    on_epoch: EpochCallback | None = None,
) -> tuple[PartitionedModel, TrainResult]:
    """Fine-tune with ``CE + R + (λ/2) Σ F (θ - θ*)²`` on the Step-A trainable set.

    The Fisher is estimated on the new task's training inputs (the only data available
    without replay) before the new head is attached.
    """
    ewc.validate()
    if not model.heads:
        raise PreconditionError("ewc_train_task needs a model with at least one trained head")
    shared = model.keys(Partition.S, Partition.E)
    fisher = estimate_fisher(model, stage.train.x, shared, ewc.fisher_samples) if ewc.lambda_ewc > 0 else {}
    anchor = model.snapshot(shared)

    head = _attach(model, stage, seed)
    model.set_trainable(_lwf_trainable(model, head))
    result = _fit(
        model,
        stage,
        cfg,
        head=head,
        seed=derive_seed(seed, stage.index),
        method="ewc",
        phase="A",
        lambda0=0.0,
        ewc=(fisher, anchor, ewc.lambda_ewc),
        on_epoch=on_epoch,
    )
    model.retire_heads()
    return model, result


# ─── Widening ────────────────────────────────────────────────────────────────


def widen(model: PartitionedModel, plan: ExpansionPlan, seed: int, stage: int | None = None) -> PartitionedModel:
    """Return a widened copy of `model` (a new generation).

    Each target layer of width n grows to ``round(r * n)`` units; new unit k copies unit
    ``k mod n``. The next layer gains input rows copied from the source units, and every
    input row of a duplicated unit is scaled by 1 / (number of copies), so with
    ``eps0 = 0`` the latest path computes exactly the original function. Gaussian noise of
    standard deviation `eps0` is added to the copied weights. All pre-existing parameters
    end up frozen and only the new blocks are trainable.

    Raises:
        PreconditionError: If the plan does not match the model.
    """
    if plan.factor <= 1.0:
        raise PreconditionError(f"Widening factor must be > 1, got {plan.factor}")
    targets = sorted(set(plan.layers))
    if not targets or targets[0] < 0 or targets[-1] >= model.n_layers:
        raise PreconditionError(f"Plan targets layers {plan.layers}; the model has {model.n_layers} hidden layers")

    rng = np.random.default_rng(seed)
    new = model.copy()
    prev = model.generations[-1]
    gen = len(model.generations)
    old_w = prev.widths
    new_w = [max(int(round(plan.factor * w)), w + 1) if l in targets else w for l, w in enumerate(old_w)]
    sources = [[k % old_w[l] for k in range(old_w[l], new_w[l])] for l in range(model.n_layers)]

    scales = [prev.scales[0].copy()]
    for layer in range(1, model.n_layers):
        src = sources[layer - 1]
        counts = 1 + np.bincount(np.asarray(src, dtype=np.int64), minlength=old_w[layer - 1])
        scaled = prev.scales[layer] / counts
        scales.append(np.concatenate([scaled, scaled[src]]))
    new.generations.append(
        Generation(widths=new_w, scales=scales, sources=sources, factor=plan.factor, eps0=plan.eps0, stage=stage)
    )

    def noise(shape: tuple[int, int]) -> np.ndarray:
        return rng.normal(0.0, plan.eps0, size=shape) if plan.eps0 > 0 else np.zeros(shape)

    added = []
    for layer in range(model.n_layers):
        raw = model.raw_weight(layer)
        if layer > 0 and sources[layer - 1]:
            key = f"hidden.{layer}.W.x{gen}r"
            new.params[key] = raw[sources[layer - 1], :] + noise((len(sources[layer - 1]), raw.shape[1]))
            raw = np.vstack([raw, new.params[key]])
            added.append(key)
        if sources[layer]:
            key = f"hidden.{layer}.W.x{gen}c"
            new.params[key] = raw[:, sources[layer]] + noise((raw.shape[0], len(sources[layer])))
            bias_key = f"hidden.{layer}.b.x{gen}"
            new.params[bias_key] = model.hidden_bias(layer)[sources[layer]].copy()
            added += [key, bias_key]

    for key in added:
        new.partitions[key] = Partition.E
    new.set_trainable(added)
    log.info(f"Widened hidden layers {targets}: {old_w} -> {new_w} (r={plan.factor}, eps0={plan.eps0})")
    return new


def lwf_train_expanded(
    model: PartitionedModel,
    stage: Stage,
    cfg: LwfConfig,
    seed: int,
    method: str = "prime",
    on_epoch: EpochCallback | None = None,
) -> tuple[PartitionedModel, TrainResult]:
    """Learn a new task on a freshly widened model (Step D).

    Calibration is recorded from the widened model. Only the newest generation's blocks
    and the new head are trainable; everything else stays bit-identical.
    """
    if model.generation < 1 or not model.generation_keys(model.generation):
        raise PreconditionError("lwf_train_expanded needs a widened model")
    if not model.heads:
        raise PreconditionError("lwf_train_expanded needs a model with at least one trained head")
    calibration = record_calibration(model, stage.train.x)
    head = _attach(model, stage, seed)
    model.set_trainable(model.generation_keys(model.generation) + model.head_keys(head))
    result = _fit(
        model,
        stage,
        cfg,
        head=head,
        seed=derive_seed(seed, stage.index, 4),
        method=method,
        phase="D",
        lambda0=cfg.lambda0,
        calibration=calibration,
        on_epoch=on_epoch,
    )
    model.retire_heads()
    return model, result


def _reference_inputs(stage: Stage) -> np.ndarray:
    return stage.val.x if len(stage.val.y) else stage.train.x


def prime_controller(
    model: PartitionedModel,
    stage: Stage,
    config: PrimeConfig,
    seed: int,
    on_epoch: EpochCallback | None = None,
) -> tuple[PartitionedModel, StageReport]:
    """Run one incremental stage of the plasticity-triggered cycle.

    Step A (LwF) runs first. When the new-task CE stalls the model's plasticity is
    evaluated; with sufficient plasticity Step A simply continues (short cycle). With
    limited plasticity Step A is aborted, the model is restored to its state at stage
    entry, widened according to the expansion plan, and the task is learned by Step D
    (full cycle).
    """
    if stage.n_classes < 1:
        raise PreconditionError(f"Stage {stage.index} has no classes")
    report = StageReport(stage=stage.index, method="prime", path="short", params_before=model.parameter_count())
    entry = model.copy()
    reference = _reference_inputs(stage)

    def on_stall(epoch: int) -> bool:
        check = evaluate(model, reference, config.plasticity)
        report.checks.append(PlasticityCheck(stage.index, epoch, check))
        log.info(
            f"Stage {stage.index}: new-task CE stalled at epoch {epoch}; "
            f"indicator {check.indicator:.4f} ({'limited' if check.limited else 'sufficient'})"
        )
        return check.limited

    model, step_a = lwf_train_task(model, stage, config.lwf, seed, method="prime", on_epoch=on_epoch, stall_callback=on_stall)
    report.epochs += step_a.epochs
    report.optimizer = step_a.optimizer

    if step_a.stalled:
        report.path = "full"
        plan = plan_expansion(report.checks[-1].report, config.expansion)
        model = widen(entry, plan, seed=derive_seed(seed, stage.index, 3), stage=stage.index)
        g = model.generations[-1]
        for layer in plan.layers:
            report.expansions.append(
                ExpansionEvent(
                    stage=stage.index,
                    generation=model.generation,
                    layer=layer,
                    old_n=entry.widths[layer],
                    new_n=g.widths[layer],
                    factor=plan.factor,
                    eps0=plan.eps0,
                    predicted_pr1=plan.predicted_pr1,
                    saturated=plan.saturated,
                )
            )
        model, step_d = lwf_train_expanded(model, stage, config.lwf, seed, on_epoch=on_epoch)
        report.epochs += step_d.epochs
        report.optimizer = step_d.optimizer

    model.retire_heads()
    report.params_after = model.parameter_count()
    return model, report
