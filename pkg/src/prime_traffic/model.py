"""Partitioned multi-head classifier, its forward/backward passes, and checkpoints.

Layout of the network::

    X ─ tokens ─ encoder block ─ mean pool ─┐            (θ_z)
                                            hidden dense+ReLU+dropout stack (θ_s, θ_E)
                                            └─ one dense head per task (θ_o, θ_T)

Widening events are recorded as *generations*. A hidden weight matrix is stored as a
base block plus, per generation, a row block (new inputs × old outputs) and a column
block (all inputs × new outputs). The generation-g path uses only blocks up to g with
that generation's fan-in scaling, so a head attached at generation g keeps computing
exactly the same function after later expansions.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .common import CHECKPOINT_FORMAT_VERSION
from .errors import GradientError, PreconditionError, ShapeError
from .nn import (
    ENCODER_KEYS,
    dense_forward,
    dropout_mask,
    encoder_backward,
    encoder_forward,
    glorot_uniform,
    init_encoder,
    relu_backward,
    relu_forward,
)
from .optim import OptimizerState

log = logging.getLogger(__name__)

META_KEY = "__meta__"
OPT_M_PREFIX = "__opt_m__."
OPT_V_PREFIX = "__opt_v__."


class Partition(str, Enum):
    """Parameter partitions of the incremental learner."""

    Z = "z"  # encoder backbone, frozen after base training
    S = "s"  # shared hidden stack
    O = "o"  # heads of finished tasks
    TASK = "task"  # head of the task being learned
    E = "e"  # blocks added by widening


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # dense | relu | dropout | attention-encoder | softmax-head
    in_dim: int
    out_dim: int
    dropout_rate: float = 0.0
    heads: int = 0


LAYER_KINDS = ("dense", "relu", "dropout", "attention-encoder", "softmax-head")


def check_layer_graph(specs: list[LayerSpec]) -> None:
    """Validate kinds, dimensions and head counts of a layer list.

    Heads all read the output of the last trunk layer rather than each other. A head
    attached before a widening event reads its own, narrower generation path, so its
    input may be smaller than the trunk output but never larger.

    Raises:
        ShapeError: On the first incompatible layer.
    """
    trunk_out = None
    for idx, spec in enumerate(specs):
        if spec.kind not in LAYER_KINDS:
            raise ShapeError(f"Layer {idx}: unknown kind `{spec.kind}`", expected=LAYER_KINDS, actual=spec.kind)
        if spec.in_dim <= 0 or spec.out_dim <= 0:
            raise ShapeError(f"Layer {idx}: dimensions must be positive", expected="> 0", actual=(spec.in_dim, spec.out_dim))
        if not 0.0 <= spec.dropout_rate < 1.0:
            raise ShapeError(f"Layer {idx}: dropout rate must lie in [0, 1)", expected="[0, 1)", actual=spec.dropout_rate)
        if spec.kind == "attention-encoder" and (spec.heads <= 0 or spec.out_dim % spec.heads):
            raise ShapeError(
                f"Layer {idx}: {spec.heads} heads do not divide model dimension {spec.out_dim}",
                expected=spec.out_dim,
                actual=spec.heads,
            )
        if spec.kind == "softmax-head" and trunk_out is not None and spec.in_dim > trunk_out:
            raise ShapeError(
                f"Layer {idx} (softmax-head) reads {spec.in_dim} features, the trunk emits {trunk_out}",
                expected=trunk_out,
                actual=spec.in_dim,
            )
        if spec.kind != "softmax-head" and trunk_out is not None and spec.in_dim != trunk_out:
            raise ShapeError(
                f"Layer {idx} ({spec.kind}) expects input width {spec.in_dim}, previous layer emits {trunk_out}",
                expected=trunk_out,
                actual=spec.in_dim,
            )
        if spec.kind != "softmax-head":
            trunk_out = spec.out_dim


@dataclass
class ModelSpec:
    """Architecture hyperparameters.

    Attributes:
        input_dim: Width of the flat feature vector (n_b + 4 * n_p).
        token_width: Features per encoder token.
        d_model: Encoder width.
        heads: Attention heads.
        ff_width: Encoder MLP width; 0 means 2 * d_model.
        hidden: Widths of the hidden dense stack.
        dropout: Dropout rate after every hidden ReLU.
    """

    input_dim: int
    token_width: int = 16
    d_model: int = 64
    heads: int = 2
    ff_width: int = 0
    hidden: list[int] = field(default_factory=lambda: [64, 32])
    dropout: float = 0.2

    @property
    def ff(self) -> int:
        return self.ff_width or 2 * self.d_model


@dataclass
class Generation:
    """Hidden-stack geometry after a widening event (generation 0 is the base model).

    Attributes:
        widths: Output width of every hidden layer.
        scales: Per hidden layer, the fan-in scale applied to each input row.
        sources: Per hidden layer, the source unit of each unit added by this event.
        factor: Widening factor of the event.
        eps0: Perturbation scale of the event.
        stage: Stage during which the event happened.
    """

    widths: list[int]
    scales: list[np.ndarray]
    sources: list[list[int]] = field(default_factory=list)
    factor: float = 1.0
    eps0: float = 0.0
    stage: int | None = None

    def to_meta(self) -> dict:
        return {
            "widths": list(self.widths),
            "scales": [s.tolist() for s in self.scales],
            "sources": [list(s) for s in self.sources],
            "factor": self.factor,
            "eps0": self.eps0,
            "stage": self.stage,
        }

    @classmethod
    def from_meta(cls, data: dict) -> "Generation":
        return cls(
            widths=list(data["widths"]),
            scales=[np.asarray(s, dtype=np.float64) for s in data["scales"]],
            sources=[list(s) for s in data["sources"]],
            factor=data["factor"],
            eps0=data["eps0"],
            stage=data["stage"],
        )


@dataclass
class HeadInfo:
    task: int
    n_classes: int
    generation: int


@dataclass
class ForwardResult:
    """Output of `forward`.

    Attributes:
        logits: One (batch, C_i) array per attached head.
        activations: Post-ReLU (pre-dropout) output of every hidden layer on the latest path.
        pooled: Encoder output; can be passed back as `encoded` while the encoder is frozen.
        cache: Intermediate values for `backward`; None when not kept.
    """

    logits: list[np.ndarray]
    activations: list[np.ndarray]
    pooled: np.ndarray
    cache: dict | None = None


class PartitionedModel:
    """Multi-head classifier whose parameters are grouped into partitions.

    Every parameter key carries one `Partition` label. Independently of labels the
    model holds a `frozen` key set: `backward` never produces gradients for frozen keys.
    """

    def __init__(
        self,
        spec: ModelSpec,
        params: dict[str, np.ndarray],
        partitions: dict[str, Partition],
        generations: list[Generation],
        heads: list[HeadInfo] | None = None,
        frozen: set[str] | None = None,
    ) -> None:
        self.spec = spec
        self.params = params
        self.partitions = partitions
        self.generations = generations
        self.heads = heads or []
        self.frozen = set(frozen or ())
        check_layer_graph(self.layer_specs())

    @classmethod
    def build(cls, spec: ModelSpec, seed: int) -> "PartitionedModel":
        """Create a freshly initialized model without heads."""
        if not spec.hidden:
            raise ShapeError("At least one hidden layer is required", expected=">= 1", actual=0)
        rng = np.random.default_rng(seed)
        params = init_encoder(rng, spec.token_width, spec.d_model, spec.ff)
        partitions = dict.fromkeys(params, Partition.Z)
        fan_in = spec.d_model
        for layer, width in enumerate(spec.hidden):
            params[f"hidden.{layer}.W"] = glorot_uniform(rng, fan_in, width)
            params[f"hidden.{layer}.b"] = np.zeros(width)
            partitions[f"hidden.{layer}.W"] = partitions[f"hidden.{layer}.b"] = Partition.S
            fan_in = width
        scales = [np.ones(spec.d_model)] + [np.ones(w) for w in spec.hidden[:-1]]
        return cls(spec, params, partitions, [Generation(widths=list(spec.hidden), scales=scales)])

    # ─── Structure ───────────────────────────────────────────────────────────

    @property
    def n_layers(self) -> int:
        return len(self.spec.hidden)

    @property
    def generation(self) -> int:
        """Index of the latest generation."""
        return len(self.generations) - 1

    @property
    def widths(self) -> list[int]:
        return self.generations[-1].widths

    def in_width(self, layer: int, gen: int | None = None) -> int:
        gen = self.generation if gen is None else gen
        return self.spec.d_model if layer == 0 else self.generations[gen].widths[layer - 1]

    def layer_specs(self) -> list[LayerSpec]:
        """Layer graph at the latest generation."""
        s = self.spec
        specs = [LayerSpec("attention-encoder", s.token_width, s.d_model, heads=s.heads)]
        fan_in = s.d_model
        for width in self.widths:
            specs += [
                LayerSpec("dense", fan_in, width),
                LayerSpec("relu", width, width),
                LayerSpec("dropout", width, width, dropout_rate=s.dropout),
            ]
            fan_in = width
        for head in self.heads:
            specs.append(LayerSpec("softmax-head", self.generations[head.generation].widths[-1], head.n_classes))
        return specs

    def weight_blocks(self, layer: int, gen: int) -> list[tuple[str, slice, slice]]:
        """Blocks making up hidden weight `layer` at generation `gen`, with their (rows, cols) slots."""
        g0 = self.generations[0]
        blocks = [(f"hidden.{layer}.W", slice(0, self.in_width(layer, 0)), slice(0, g0.widths[layer]))]
        for e in range(1, gen + 1):
            in_prev, in_e = self.in_width(layer, e - 1), self.in_width(layer, e)
            out_prev, out_e = self.generations[e - 1].widths[layer], self.generations[e].widths[layer]
            if in_e > in_prev:
                blocks.append((f"hidden.{layer}.W.x{e}r", slice(in_prev, in_e), slice(0, out_prev)))
            if out_e > out_prev:
                blocks.append((f"hidden.{layer}.W.x{e}c", slice(0, in_e), slice(out_prev, out_e)))
        return blocks

    def bias_blocks(self, layer: int, gen: int) -> list[tuple[str, slice]]:
        blocks = [(f"hidden.{layer}.b", slice(0, self.generations[0].widths[layer]))]
        for e in range(1, gen + 1):
            out_prev, out_e = self.generations[e - 1].widths[layer], self.generations[e].widths[layer]
            if out_e > out_prev:
                blocks.append((f"hidden.{layer}.b.x{e}", slice(out_prev, out_e)))
        return blocks

    def raw_weight(self, layer: int, gen: int | None = None) -> np.ndarray:
        """Assembled stored weights of a hidden layer, without fan-in scaling."""
        gen = self.generation if gen is None else gen
        W = np.zeros((self.in_width(layer, gen), self.generations[gen].widths[layer]))
        for key, rows, cols in self.weight_blocks(layer, gen):
            W[rows, cols] = self.params[key]
        return W

    def effective_weight(self, layer: int, gen: int | None = None) -> np.ndarray:
        """Weight matrix the generation-`gen` path actually multiplies with."""
        gen = self.generation if gen is None else gen
        return self.raw_weight(layer, gen) * self.generations[gen].scales[layer][:, None]

    def hidden_bias(self, layer: int, gen: int | None = None) -> np.ndarray:
        gen = self.generation if gen is None else gen
        b = np.zeros(self.generations[gen].widths[layer])
        for key, cols in self.bias_blocks(layer, gen):
            b[cols] = self.params[key]
        return b

    # ─── Heads and partitions ────────────────────────────────────────────────

    def add_head(self, n_classes: int, seed: int, task: int | None = None) -> int:
        """Attach a fresh task head to the latest generation and return its index."""
        if n_classes < 1:
            raise PreconditionError(f"A task head needs at least one class, got {n_classes}")
        idx = len(self.heads)
        rng = np.random.default_rng(seed)
        fan_in = self.widths[-1]
        self.params[f"head.{idx}.W"] = glorot_uniform(rng, fan_in, n_classes)
        self.params[f"head.{idx}.b"] = np.zeros(n_classes)
        self.partitions[f"head.{idx}.W"] = self.partitions[f"head.{idx}.b"] = Partition.TASK
        self.heads.append(HeadInfo(task=idx + 1 if task is None else task, n_classes=n_classes, generation=self.generation))
        return idx

    def head_keys(self, idx: int) -> list[str]:
        return [f"head.{idx}.W", f"head.{idx}.b"]

    def keys(self, *partitions: Partition) -> list[str]:
        return [key for key, part in self.partitions.items() if part in partitions]

    def generation_keys(self, gen: int) -> list[str]:
        """Keys of the blocks added by widening event `gen`."""
        suffixes = (f".x{gen}r", f".x{gen}c", f".b.x{gen}")
        return [key for key in self.params if key.endswith(suffixes)]

    def set_trainable(self, keys) -> None:
        """Freeze every parameter not in `keys`."""
        keys = set(keys)
        unknown = keys - set(self.params)
        if unknown:
            raise PreconditionError(f"Unknown parameter keys: {sorted(unknown)}")
        self.frozen = set(self.params) - keys

    @property
    def trainable(self) -> list[str]:
        return [key for key in self.params if key not in self.frozen]

    def retire_heads(self) -> None:
        """Relabel every task head as an old head once its stage is finished."""
        for key, part in self.partitions.items():
            if part is Partition.TASK:
                self.partitions[key] = Partition.O

    def parameter_count(self, keys=None) -> int:
        keys = self.params if keys is None else keys
        return int(sum(self.params[key].size for key in keys))

    def snapshot(self, keys=None) -> dict[str, np.ndarray]:
        keys = self.params if keys is None else keys
        return {key: self.params[key].copy() for key in keys}

    def copy(self) -> "PartitionedModel":
        return PartitionedModel(
            ModelSpec(**{**asdict(self.spec), "hidden": list(self.spec.hidden)}),
            self.snapshot(),
            dict(self.partitions),
            [Generation.from_meta(g.to_meta()) for g in self.generations],
            [HeadInfo(**asdict(h)) for h in self.heads],
            set(self.frozen),
        )

    def encoder_params(self) -> dict[str, np.ndarray]:
        return {key: self.params[key] for key in ENCODER_KEYS}

    def encode(self, x: np.ndarray) -> np.ndarray:
        """Pooled encoder features (the encoder has no dropout, so train and eval agree)."""
        self._check_input(x)
        pooled, _ = encoder_forward(self.encoder_params(), x, self.spec.token_width, self.spec.heads)
        return pooled

    def _check_input(self, x: np.ndarray) -> None:
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise ShapeError(
                f"Batch must have shape (n, {self.spec.input_dim}), got {x.shape}",
                expected=(None, self.spec.input_dim),
                actual=x.shape,
            )

    def __repr__(self) -> str:
        return (
            f"PartitionedModel(widths={self.widths}, generations={len(self.generations)}, "
            f"heads={[h.n_classes for h in self.heads]}, params={self.parameter_count()})"
        )


# ─── Forward / backward ──────────────────────────────────────────────────────


def forward(
    model: PartitionedModel,
    batch: np.ndarray,
    train_mode: bool = False,
    rng_seed: int = 0,
    encoded: np.ndarray | None = None,
    keep_trace: bool = True,
) -> ForwardResult:
    """Run the model on a batch.

    Args:
        model: The model.
        batch: Flat features of shape (n, input_dim).
        train_mode: Enable dropout.
        rng_seed: Seed of the dropout masks; the only randomness in the pass.
        encoded: Precomputed encoder output for this batch (skips the encoder).
        keep_trace: Keep the intermediate values `backward` needs.

    Raises:
        ShapeError: If the batch width does not match the model input.
    """
    enc_cache = None
    if encoded is None:
        model._check_input(batch)
        pooled, enc_cache = encoder_forward(model.encoder_params(), batch, model.spec.token_width, model.spec.heads)
    else:
        pooled = encoded

    latest = model.generation
    n = pooled.shape[0]
    masks = None
    if train_mode and model.spec.dropout > 0.0:
        rng = np.random.default_rng(rng_seed)
        masks = [dropout_mask(rng, (n, w), model.spec.dropout) for w in model.widths]

    gens = sorted({h.generation for h in model.heads} | {latest})
    paths = {}
    for gen in gens:
        h = pooled
        layers = []
        for layer in range(model.n_layers):
            W = model.effective_weight(layer, gen)
            pre = dense_forward(h, W, model.hidden_bias(layer, gen))
            act = relu_forward(pre)
            mask = None if masks is None else masks[layer][:, : W.shape[1]]
            layers.append({"h_in": h, "W": W, "pre": pre, "act": act, "mask": mask})
            h = act if mask is None else act * mask
        paths[gen] = {"layers": layers, "out": h}

    logits = []
    for idx, head in enumerate(model.heads):
        logits.append(dense_forward(paths[head.generation]["out"], model.params[f"head.{idx}.W"], model.params[f"head.{idx}.b"]))

    activations = [layer["act"] for layer in paths[latest]["layers"]]
    cache = {"encoder": enc_cache, "paths": paths, "generation": latest, "n_heads": len(model.heads)} if keep_trace else None
    return ForwardResult(logits=logits, activations=activations, pooled=pooled, cache=cache)


def backward(
    model: PartitionedModel, result: ForwardResult | None, head_grads: dict[int, np.ndarray]
) -> dict[str, np.ndarray]:
    """Gradients of every unfrozen parameter given d(loss)/d(logits) per head.

    Args:
        model: The model `result` was computed with.
        result: The forward result of the same batch, with its trace kept.
        head_grads: Map of head index to the gradient w.r.t. that head's logits.

    Returns:
        A gradient for exactly the unfrozen keys (zeros where the loss does not depend on them).

    Raises:
        GradientError: Without a forward trace, or when the trace is stale.
    """
    if result is None or result.cache is None:
        raise GradientError("backward requires the trace of a forward pass on the same batch")
    cache = result.cache
    if cache["generation"] != model.generation or cache["n_heads"] != len(model.heads):
        raise GradientError("Forward trace is stale: the model changed after the forward pass")

    frozen = model.frozen
    grads: dict[str, np.ndarray] = {}

    def accumulate(key: str, grad: np.ndarray) -> None:
        if key in frozen:
            return
        if key in grads:
            grads[key] += grad
        else:
            grads[key] = np.array(grad, dtype=np.float64)

    dpooled = np.zeros_like(result.pooled)
    dout: dict[int, np.ndarray] = {}
    for idx, grad in head_grads.items():
        gen = model.heads[idx].generation
        out = cache["paths"][gen]["out"]
        W = model.params[f"head.{idx}.W"]
        accumulate(f"head.{idx}.W", out.T @ grad)
        accumulate(f"head.{idx}.b", grad.sum(axis=0))
        dout[gen] = dout.get(gen, 0.0) + grad @ W.T

    for gen, dh in dout.items():
        scales = model.generations[gen].scales
        for layer in reversed(range(model.n_layers)):
            lc = cache["paths"][gen]["layers"][layer]
            dact = dh if lc["mask"] is None else dh * lc["mask"]
            dpre = relu_backward(lc["pre"], dact)
            draw = (lc["h_in"].T @ dpre) * scales[layer][:, None]
            for key, rows, cols in model.weight_blocks(layer, gen):
                accumulate(key, draw[rows, cols])
            db = dpre.sum(axis=0)
            for key, cols in model.bias_blocks(layer, gen):
                accumulate(key, db[cols])
            dh = dpre @ lc["W"].T
        dpooled += dh

    if any(key not in frozen for key in ENCODER_KEYS):
        if cache["encoder"] is None:
            raise GradientError("Encoder parameters are trainable but the forward pass skipped the encoder")
        for key, grad in encoder_backward(model.encoder_params(), cache["encoder"], dpooled).items():
            accumulate(key, grad)

    for key in model.trainable:
        if key not in grads:
            grads[key] = np.zeros_like(model.params[key])
    return grads


# ─── Checkpoints ─────────────────────────────────────────────────────────────


def save_checkpoint(model: PartitionedModel, path: str | Path, optimizer: OptimizerState | None = None) -> Path:
    """Write the model (and optionally optimizer state) to an `.npz` container.

    Parameter arrays are stored as little-endian float64; everything else lives in a
    JSON metadata entry.
    """
    path = Path(path)
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "spec": asdict(model.spec),
        "layers": [asdict(s) for s in model.layer_specs()],
        "partitions": {key: part.value for key, part in model.partitions.items()},
        "generations": [g.to_meta() for g in model.generations],
        "heads": [asdict(h) for h in model.heads],
        "frozen": sorted(model.frozen),
        "optimizer": optimizer.scalars() if optimizer else None,
    }
    arrays = {key: value.astype("<f8") for key, value in model.params.items()}
    if optimizer:
        arrays.update({OPT_M_PREFIX + key: value.astype("<f8") for key, value in optimizer.m.items()})
        arrays.update({OPT_V_PREFIX + key: value.astype("<f8") for key, value in optimizer.v.items()})
    arrays[META_KEY] = np.array(json.dumps(meta))
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    log.debug(f"Checkpoint written to {path}")
    return path


def load_checkpoint(path: str | Path) -> tuple[PartitionedModel, OptimizerState | None]:
    """Read a checkpoint written by `save_checkpoint`.

    Raises:
        PreconditionError: If the container is not a checkpoint or has an unknown format version.
    """
    with np.load(Path(path), allow_pickle=False) as data:
        if META_KEY not in data.files:
            raise PreconditionError(f"`{path}` is not a prime-traffic checkpoint")
        meta = json.loads(str(data[META_KEY]))
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise PreconditionError(
                f"Unsupported checkpoint format version {meta.get('format_version')} in `{path}`"
            )
        params, m, v = {}, {}, {}
        for name in data.files:
            if name == META_KEY:
                continue
            if name.startswith(OPT_M_PREFIX):
                m[name.removeprefix(OPT_M_PREFIX)] = data[name].astype(np.float64)
            elif name.startswith(OPT_V_PREFIX):
                v[name.removeprefix(OPT_V_PREFIX)] = data[name].astype(np.float64)
            else:
                params[name] = data[name].astype(np.float64)

    model = PartitionedModel(
        ModelSpec(**meta["spec"]),
        params,
        {key: Partition(part) for key, part in meta["partitions"].items()},
        [Generation.from_meta(g) for g in meta["generations"]],
        [HeadInfo(**h) for h in meta["heads"]],
        set(meta["frozen"]),
    )
    optimizer = OptimizerState.from_scalars(meta["optimizer"], m, v) if meta["optimizer"] else None
    return model, optimizer
