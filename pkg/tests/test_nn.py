import numpy as np
import pytest

from prime_traffic import nn
from prime_traffic.errors import PreconditionError, ShapeError

RTOL, ATOL = 1e-4, 1e-7


def _random_encoder(seed: int, token_width: int = 4, d_model: int = 4, ff: int = 6) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = nn.init_encoder(rng, token_width, d_model, ff)
    # Non-trivial gains and biases so every gradient path is exercised.
    for key, value in params.items():
        if value.ndim == 1:
            params[key] = value + rng.normal(scale=0.3, size=value.shape)
    return params


@pytest.mark.parametrize("seed", range(20))
def test_dense_gradients(seed, numgrad):
    rng = np.random.default_rng(seed)
    x, W, b = rng.normal(size=(3, 5)), rng.normal(size=(5, 4)), rng.normal(size=4)
    G = rng.normal(size=(3, 4))

    def f():
        return float((nn.dense_forward(x, W, b) * G).sum())

    dx, dW, db = nn.dense_backward(x, W, G)
    np.testing.assert_allclose(dx, numgrad(f, x), rtol=RTOL, atol=ATOL)
    np.testing.assert_allclose(dW, numgrad(f, W), rtol=RTOL, atol=ATOL)
    np.testing.assert_allclose(db, numgrad(f, b), rtol=RTOL, atol=ATOL)


@pytest.mark.parametrize("seed", range(20))
def test_layer_norm_gradients(seed, numgrad):
    rng = np.random.default_rng(seed)
    x, g, b = rng.normal(size=(2, 3, 6)), rng.normal(size=6), rng.normal(size=6)
    G = rng.normal(size=(2, 3, 6))

    def f():
        return float((nn.layer_norm_forward(x, g, b)[0] * G).sum())

    _, cache = nn.layer_norm_forward(x, g, b)
    dx, dg, db = nn.layer_norm_backward(cache, g, G)
    np.testing.assert_allclose(dx, numgrad(f, x), rtol=RTOL, atol=ATOL)
    np.testing.assert_allclose(dg, numgrad(f, g), rtol=RTOL, atol=ATOL)
    np.testing.assert_allclose(db, numgrad(f, b), rtol=RTOL, atol=ATOL)


@pytest.mark.parametrize("seed", range(20))
def test_attention_gradients(seed, numgrad):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 4))
    p = {f"W{n}": rng.normal(scale=0.5, size=(4, 4)) for n in "qkvo"}
    p.update({f"b{n}": rng.normal(scale=0.1, size=4) for n in "qkvo"})
    G = rng.normal(size=(2, 3, 4))

    def f():
        return float((nn.attention_forward(x, p, heads=2)[0] * G).sum())

    _, cache = nn.attention_forward(x, p, heads=2)
    dx, grads = nn.attention_backward(cache, p, G)
    np.testing.assert_allclose(dx, numgrad(f, x), rtol=RTOL, atol=ATOL)
    for key in p:
        np.testing.assert_allclose(grads[key], numgrad(f, p[key]), rtol=RTOL, atol=ATOL, err_msg=key)


@pytest.mark.parametrize("seed", range(20))
def test_encoder_gradients(seed, numgrad):
    rng = np.random.default_rng(seed)
    params = _random_encoder(seed)
    x = rng.normal(size=(3, 10))
    G = rng.normal(size=(3, 4))

    def f():
        return float((nn.encoder_forward(params, x, token_width=4, heads=2)[0] * G).sum())

    _, cache = nn.encoder_forward(params, x, token_width=4, heads=2)
    grads = nn.encoder_backward(params, cache, G)
    assert set(grads) == set(nn.ENCODER_KEYS)
    for key in nn.ENCODER_KEYS:
        np.testing.assert_allclose(grads[key], numgrad(f, params[key]), rtol=RTOL, atol=ATOL, err_msg=key)


@pytest.mark.parametrize("seed", range(20))
def test_cross_entropy_gradient(seed, numgrad):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(4, 3))
    labels = rng.integers(0, 3, size=4)
    _, grad = nn.cross_entropy(logits, labels)
    np.testing.assert_allclose(grad, numgrad(lambda: nn.cross_entropy(logits, labels)[0], logits), rtol=RTOL, atol=ATOL)


def test_cross_entropy_value():
    loss, _ = nn.cross_entropy(np.zeros((2, 4)), np.array([0, 3]))
    assert loss == pytest.approx(np.log(4))


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(PreconditionError):
        nn.cross_entropy(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(ShapeError):
        nn.cross_entropy(np.zeros((2, 3)), np.array([0, 1, 2]))


def test_relu_subgradient_at_zero_is_zero():
    z = np.array([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(nn.relu_backward(z, np.ones(3)), [0.0, 0.0, 1.0])


def test_dropout_mask_is_inverted_and_seeded():
    mask = nn.dropout_mask(np.random.default_rng(0), (200, 50), 0.2)
    assert set(np.unique(mask)) <= {0.0, 1.0 / (1.0 - 0.2)}
    np.testing.assert_array_equal(mask, nn.dropout_mask(np.random.default_rng(0), (200, 50), 0.2))


def test_tokenize_pads_the_tail():
    tokens = nn.tokenize(np.arange(10, dtype=float)[None, :], 4)
    assert tokens.shape == (1, 3, 4)
    np.testing.assert_array_equal(tokens[0, 2], [8.0, 9.0, 0.0, 0.0])


def test_attention_rejects_indivisible_heads():
    p = {f"W{n}": np.eye(4) for n in "qkvo"} | {f"b{n}": np.zeros(4) for n in "qkvo"}
    with pytest.raises(ShapeError):
        nn.attention_forward(np.zeros((1, 2, 4)), p, heads=3)


def test_dense_rejects_width_mismatch():
    with pytest.raises(ShapeError) as err:
        nn.dense_forward(np.zeros((2, 3)), np.zeros((4, 2)), np.zeros(2))
    assert err.value.expected == 4 and err.value.actual == 3
