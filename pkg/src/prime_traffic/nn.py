"""Numeric building blocks for the traffic classifier.

Every layer is a pair of plain functions over numpy arrays: ``*_forward`` returns the
output and whatever the matching ``*_backward`` needs. All arithmetic is float64.

Layer kinds:
- dense (``x @ W + b``), ReLU (subgradient 0 at 0), inverted dropout
- layer norm, multi-head self-attention and the pre-norm encoder block built from them
- softmax / cross-entropy heads
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PreconditionError, ShapeError

LN_EPS = 1e-5

ENCODER_KEYS = (
    "enc.embed.W",
    "enc.embed.b",
    "enc.ln1.g",
    "enc.ln1.b",
    "enc.attn.Wq",
    "enc.attn.bq",
    "enc.attn.Wk",
    "enc.attn.bk",
    "enc.attn.Wv",
    "enc.attn.bv",
    "enc.attn.Wo",
    "enc.attn.bo",
    "enc.ln2.g",
    "enc.ln2.b",
    "enc.ff1.W",
    "enc.ff1.b",
    "enc.ff2.W",
    "enc.ff2.b",
)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    """Uniform init in ±sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


# ─── Dense / ReLU / dropout ──────────────────────────────────────────────────


def dense_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(
            f"Dense layer expects input width {W.shape[0]}, got {x.shape[-1]}", expected=W.shape[0], actual=x.shape[-1]
        )
    return x @ W + b


def dense_backward(x: np.ndarray, W: np.ndarray, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of a dense layer.

    Returns:
        (dx, dW, db) for an input of any leading shape.
    """
    x2 = x.reshape(-1, W.shape[0])
    dy2 = dy.reshape(-1, W.shape[1])
    return dy @ W.T, x2.T @ dy2, dy2.sum(axis=0)


def relu_forward(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def relu_backward(z: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * (z > 0.0)


def dropout_mask(rng: np.random.Generator, shape: tuple[int, ...], rate: float) -> np.ndarray:
    """Inverted-dropout mask: kept units are scaled by 1 / (1 - rate) so eval needs no rescale."""
    if rate <= 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


# ─── Layer norm ──────────────────────────────────────────────────────────────


def layer_norm_forward(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, tuple]:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv)


def layer_norm_backward(cache: tuple, g: np.ndarray, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, inv = cache
    width = xhat.shape[-1]
    dg = (dy * xhat).reshape(-1, width).sum(axis=0)
    db = dy.reshape(-1, width).sum(axis=0)
    dxhat = dy * g
    dx = (inv / width) * (
        width * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return dx, dg, db


# ─── Softmax / cross-entropy ─────────────────────────────────────────────────


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of integer labels under softmax(logits).

    Args:
        logits: Array of shape (batch, C).
        labels: Integer class indices in [0, C).

    Returns:
        (loss, gradient w.r.t. logits).

    Raises:
        ShapeError: If logits are not 2-D or the batch sizes differ.
        PreconditionError: If a label lies outside [0, C).
    """
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy expects logits (batch, C) and labels (batch,), got {logits.shape} and {labels.shape}",
            expected=(labels.shape[0] if labels.ndim else None, "C"),
            actual=logits.shape,
        )
    n, c = logits.shape
    if n and (labels.min() < 0 or labels.max() >= c):
        raise PreconditionError(f"Labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")

    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean() if n else 0.0
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / max(n, 1)


def soft_cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of softmax(logits) against target distributions.

    Returns:
        (loss, gradient w.r.t. logits).
    """
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = -(targets * logp).sum(axis=1).mean() if n else 0.0
    grad = (np.exp(logp) - targets) / max(n, 1)
    return float(loss), grad


# ─── Multi-head self-attention ───────────────────────────────────────────────


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def attention_forward(x: np.ndarray, p: dict[str, np.ndarray], heads: int) -> tuple[np.ndarray, tuple]:
    """Multi-head scaled dot-product self-attention over the token axis.

    Args:
        x: Tokens of shape (batch, tokens, d_model).
        p: Projection parameters with keys Wq, bq, Wk, bk, Wv, bv, Wo, bo.
        heads: Number of heads; must divide d_model.
    """
    d = x.shape[-1]
    if d % heads:
        raise ShapeError(f"{heads} heads do not divide model dimension {d}", expected=heads, actual=d)
    scale = 1.0 / np.sqrt(d // heads)
    q = _split_heads(dense_forward(x, p["Wq"], p["bq"]), heads)
    k = _split_heads(dense_forward(x, p["Wk"], p["bk"]), heads)
    v = _split_heads(dense_forward(x, p["Wv"], p["bv"]), heads)
    weights = softmax(q @ k.transpose(0, 1, 3, 2) * scale)
    concat = _merge_heads(weights @ v)
    out = dense_forward(concat, p["Wo"], p["bo"])
    return out, (x, q, k, v, weights, concat, scale)


def attention_backward(
    cache: tuple, p: dict[str, np.ndarray], dout: np.ndarray
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    x, q, k, v, weights, concat, scale = cache
    heads = q.shape[1]
    grads: dict[str, np.ndarray] = {}

    dconcat, grads["Wo"], grads["bo"] = dense_backward(concat, p["Wo"], dout)
    do = _split_heads(dconcat, heads)
    dweights = do @ v.transpose(0, 1, 3, 2)
    dv = weights.transpose(0, 1, 3, 2) @ do
    dscores = weights * (dweights - (dweights * weights).sum(axis=-1, keepdims=True)) * scale
    dq = dscores @ k
    dk = dscores.transpose(0, 1, 3, 2) @ q

    dx = np.zeros_like(x)
    for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
        dxi, grads[f"W{name}"], grads[f"b{name}"] = dense_backward(x, p[f"W{name}"], _merge_heads(dproj))
        dx += dxi
    return dx, grads


# ─── Encoder block ───────────────────────────────────────────────────────────


def tokenize(x: np.ndarray, token_width: int) -> np.ndarray:
    """Cut flat feature rows into fixed-width tokens, zero-padding the tail."""
    n, width = x.shape
    n_tokens = -(-width // token_width)
    padded = np.zeros((n, n_tokens * token_width))
    padded[:, :width] = x
    return padded.reshape(n, n_tokens, token_width)


def positional_encoding(n_tokens: int, d_model: int) -> np.ndarray:
    """Fixed sinusoidal position table of shape (n_tokens, d_model)."""
    pos = np.arange(n_tokens)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


@dataclass
class EncoderCache:
    tokens: np.ndarray
    h0: np.ndarray
    ln1: tuple
    a1: np.ndarray
    attn: tuple
    h1: np.ndarray
    ln2: tuple
    a2: np.ndarray
    z: np.ndarray
    r: np.ndarray
    n_tokens: int


def encoder_forward(
    params: dict[str, np.ndarray], x: np.ndarray, token_width: int, heads: int
) -> tuple[np.ndarray, EncoderCache]:
    """Pre-norm encoder block followed by mean pooling over tokens.

    Returns:
        (pooled features of shape (batch, d_model), cache for `encoder_backward`).
    """
    tokens = tokenize(x, token_width)
    d_model = params["enc.embed.W"].shape[1]
    h0 = dense_forward(tokens, params["enc.embed.W"], params["enc.embed.b"]) + positional_encoding(
        tokens.shape[1], d_model
    )

    a1, ln1 = layer_norm_forward(h0, params["enc.ln1.g"], params["enc.ln1.b"])
    attn_out, attn = attention_forward(a1, _attn_params(params), heads)
    h1 = h0 + attn_out

    a2, ln2 = layer_norm_forward(h1, params["enc.ln2.g"], params["enc.ln2.b"])
    z = dense_forward(a2, params["enc.ff1.W"], params["enc.ff1.b"])
    r = relu_forward(z)
    h2 = h1 + dense_forward(r, params["enc.ff2.W"], params["enc.ff2.b"])

    cache = EncoderCache(tokens, h0, ln1, a1, attn, h1, ln2, a2, z, r, tokens.shape[1])
    return h2.mean(axis=1), cache


def encoder_backward(
    params: dict[str, np.ndarray], cache: EncoderCache, dpooled: np.ndarray
) -> dict[str, np.ndarray]:
    """Gradients of every encoder parameter given d(loss)/d(pooled)."""
    grads: dict[str, np.ndarray] = {}
    dh2 = np.repeat(dpooled[:, None, :], cache.n_tokens, axis=1) / cache.n_tokens

    dr, grads["enc.ff2.W"], grads["enc.ff2.b"] = dense_backward(cache.r, params["enc.ff2.W"], dh2)
    dz = relu_backward(cache.z, dr)
    da2, grads["enc.ff1.W"], grads["enc.ff1.b"] = dense_backward(cache.a2, params["enc.ff1.W"], dz)
    dh1_ln, grads["enc.ln2.g"], grads["enc.ln2.b"] = layer_norm_backward(cache.ln2, params["enc.ln2.g"], da2)
    dh1 = dh2 + dh1_ln

    da1, attn_grads = attention_backward(cache.attn, _attn_params(params), dh1)
    for name, grad in attn_grads.items():
        grads[f"enc.attn.{name}"] = grad
    dh0_ln, grads["enc.ln1.g"], grads["enc.ln1.b"] = layer_norm_backward(cache.ln1, params["enc.ln1.g"], da1)
    dh0 = dh1 + dh0_ln

    _, grads["enc.embed.W"], grads["enc.embed.b"] = dense_backward(cache.tokens, params["enc.embed.W"], dh0)
    return grads


def _attn_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {name: params[f"enc.attn.{name}"] for name in ("Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo")}


def init_encoder(
    rng: np.random.Generator, token_width: int, d_model: int, ff_width: int
) -> dict[str, np.ndarray]:
    """Fresh encoder parameters (Glorot-uniform weights, zero biases, unit layer-norm gains)."""
    p = {
        "enc.embed.W": glorot_uniform(rng, token_width, d_model),
        "enc.embed.b": np.zeros(d_model),
        "enc.ln1.g": np.ones(d_model),
        "enc.ln1.b": np.zeros(d_model),
    }
    for name in ("q", "k", "v", "o"):
        p[f"enc.attn.W{name}"] = glorot_uniform(rng, d_model, d_model)
        p[f"enc.attn.b{name}"] = np.zeros(d_model)
    p.update(
        {
            "enc.ln2.g": np.ones(d_model),
            "enc.ln2.b": np.zeros(d_model),
            "enc.ff1.W": glorot_uniform(rng, d_model, ff_width),
            "enc.ff1.b": np.zeros(ff_width),
            "enc.ff2.W": glorot_uniform(rng, ff_width, d_model),
            "enc.ff2.b": np.zeros(d_model),
        }
    )
    return {key: p[key] for key in ENCODER_KEYS}
