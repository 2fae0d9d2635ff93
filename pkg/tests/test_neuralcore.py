import math

import numpy as np
import pytest

from trajweave.neuralcore import (
    GradientError,
    ParamStore,
    Tensor,
    absolute,
    adam_step,
    concat,
    cos,
    exp,
    feed_forward,
    gelu,
    grad_check,
    layer_norm,
    log,
    matmul,
    multi_head_attention,
    relu,
    sin,
    softmax,
    sqrt,
    swapaxes,
    take,
    tanh,
    xavier_uniform,
)


def _store64(rng, specs):
    store = ParamStore(np.float64)
    for name, shape in specs.items():
        store.add(name, rng.standard_normal(shape) * 0.5)
    return store


def test_quadratic_gradient_is_exact():
    store = ParamStore(np.float64)
    store.add("x", np.array([1.5, -2.0, 0.25]))

    def loss():
        x = store["x"]
        return (x * x).sum() * 0.5

    assert grad_check(loss, store) <= 1e-8
    store.zero_grad()
    value = loss()
    value.backward()
    assert np.allclose(store["x"].grad, store["x"].data)


def test_corrupted_gradient_is_detected():
    store = ParamStore(np.float64)
    store.add("x", np.array([0.7, -1.2]))

    def loss():
        x = store["x"]
        broken = Tensor(
            (x.data * x.data).sum() * 0.5,
            parents=(x,),
            backward=lambda g: x._accumulate(g * (x.data + 1.0)),  # wrong by +1
        )
        broken.requires_grad = True
        return broken

    assert grad_check(loss, store) > 1e-2


def test_elementwise_op_gradients():
    rng = np.random.default_rng(0)
    store = _store64(rng, {"a": (4, 5), "b": (4, 5)})

    def loss():
        a, b = store["a"], store["b"]
        y = exp(a * 0.3) + log(a * a + 1.0) + sqrt(b * b + 2.0)
        y = y + sin(a) * cos(b) + relu(b - 0.1) + absolute(a * 0.7)
        y = y + tanh(a * 0.5) + gelu(b)
        return (y * y).mean()

    assert grad_check(loss, store) <= 1e-6


def test_gelu_limits():
    x = Tensor(np.array([-20.0, 0.0, 20.0]))
    out = gelu(x).data
    assert out[0] == pytest.approx(0.0, abs=1e-8)
    assert out[1] == 0.0
    assert out[2] == pytest.approx(20.0, rel=1e-8)


def test_matmul_reshape_concat_gradients():
    rng = np.random.default_rng(1)
    store = _store64(rng, {"w1": (6, 4), "w2": (4, 3), "x": (5, 6)})

    def loss():
        x, w1, w2 = store["x"], store["w1"], store["w2"]
        h = x @ w1
        h2 = concat([h, h * 0.5], axis=-1)  # (5, 8)
        picked = take(h2, (slice(None), slice(0, 4)))
        return ((picked @ w2) ** 2.0).sum()

    assert grad_check(loss, store) <= 1e-6


def test_embedding_take_gradients():
    rng = np.random.default_rng(2)
    store = _store64(rng, {"table": (7, 3)})
    idx = np.array([0, 3, 3, 6, 1])

    def loss():
        rows = take(store["table"], idx)
        return (rows * rows).sum()

    assert grad_check(loss, store) <= 1e-8
    store.zero_grad()
    loss().backward()
    # duplicated index 3 accumulates both contributions
    assert np.allclose(store["table"].grad[3], 2.0 * 2.0 * store["table"].data[3])
    assert np.allclose(store["table"].grad[2], 0.0)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((8, 11)) * 3.0)
    s = softmax(x).data
    assert np.allclose(s.sum(axis=-1), 1.0, atol=1e-6)
    assert (s >= 0.0).all()


def test_softmax_masked_positions_are_exactly_zero():
    logits = np.array([[1.0, -np.inf, 2.0], [0.5, 0.25, -np.inf]])
    s = softmax(Tensor(logits)).data
    assert s[0, 1] == 0.0 and s[1, 2] == 0.0
    with pytest.raises(GradientError, match="every position masked"):
        softmax(Tensor(np.array([[-np.inf, -np.inf]])))


def test_softmax_gradient():
    rng = np.random.default_rng(4)
    store = _store64(rng, {"x": (3, 6)})
    w = rng.standard_normal((3, 6))

    def loss():
        return (softmax(store["x"]) * w).sum()

    assert grad_check(loss, store) <= 1e-6


def test_layer_norm_statistics_and_gradient():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((10, 16)) * 2.0 + 1.0)
    out = layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    assert np.abs(out.mean(axis=-1)).max() <= 1e-6
    assert np.abs(out.var(axis=-1) - 1.0).max() <= 1e-4

    store = _store64(rng, {"x": (4, 8), "g": (8,), "b": (8,)})

    def loss():
        return (layer_norm(store["x"], store["g"], store["b"]) ** 2.0).mean()

    assert grad_check(loss, store) <= 1e-6


def test_feed_forward_gradient():
    rng = np.random.default_rng(6)
    d, hidden = 6, 24
    store = _store64(rng, {"w1": (d, hidden), "b1": (hidden,), "w2": (hidden, d), "b2": (d,), "x": (5, d)})

    def loss():
        y = feed_forward(store["x"], store["w1"], store["b1"], store["w2"], store["b2"])
        return (y * y).mean()

    # The GELU activation is smooth, so finite differences are valid
    # everywhere and no margin from an activation kink is needed.
    assert grad_check(loss, store) <= 1e-5


def _attention_params(rng, d):
    return {name: (d, d) for name in ("wq", "wk", "wv", "wo")}


def test_attention_single_key_ignores_query():
    rng = np.random.default_rng(7)
    d, h = 8, 2
    store = _store64(rng, _attention_params(rng, d))
    v = rng.standard_normal((1, d))
    args = [store["wq"], store["wk"], store["wv"], store["wo"]]
    out1 = multi_head_attention(Tensor(rng.standard_normal((4, d))), Tensor(v), Tensor(v), *args, n_heads=h)
    out2 = multi_head_attention(Tensor(rng.standard_normal((4, d))), Tensor(v), Tensor(v), *args, n_heads=h)
    expected = (v @ store["wv"].data) @ store["wo"].data
    assert np.allclose(out1.data, np.repeat(expected, 4, axis=0), atol=1e-12)
    assert np.array_equal(out1.data, out2.data)


def test_attention_gradient():
    rng = np.random.default_rng(8)
    d, h = 8, 2
    specs = _attention_params(rng, d)
    specs.update({"q": (5, d), "kv": (7, d)})
    store = _store64(rng, specs)

    def loss():
        out = multi_head_attention(
            store["q"], store["kv"], store["kv"],
            store["wq"], store["wk"], store["wv"], store["wo"],
            n_heads=h,
        )
        return (out * out).mean()

    assert grad_check(loss, store) <= 1e-4


def test_attention_masked_gradient_and_batched():
    rng = np.random.default_rng(9)
    d, h, b, s = 8, 4, 3, 6
    specs = _attention_params(rng, d)
    specs.update({"x": (b, s, d)})
    store = _store64(rng, specs)
    mask = np.triu(np.ones((s, s), dtype=bool), k=1)  # causal

    def loss():
        out = multi_head_attention(
            store["x"], store["x"], store["x"],
            store["wq"], store["wk"], store["wv"], store["wo"],
            n_heads=h, mask=mask,
        )
        return (out * out).mean()

    assert grad_check(loss, store) <= 1e-4


def test_attention_rejects_bad_shapes():
    rng = np.random.default_rng(10)
    d = 8
    store = _store64(rng, _attention_params(rng, d))
    x = Tensor(rng.standard_normal((4, d)))
    args = [store["wq"], store["wk"], store["wv"], store["wo"]]
    with pytest.raises(GradientError, match="not divisible"):
        multi_head_attention(x, x, x, *args, n_heads=3)
    with pytest.raises(GradientError, match="mask shape"):
        multi_head_attention(x, x, x, *args, n_heads=2, mask=np.zeros((4, 5), dtype=bool))
    with pytest.raises(GradientError, match="every position masked"):
        multi_head_attention(x, x, x, *args, n_heads=2, mask=np.ones((4, 4), dtype=bool))


def test_adam_zero_gradient_keeps_parameters():
    store = ParamStore(np.float32)
    store.add("w", np.array([1.0, 2.0], dtype=np.float32))
    store["w"].grad = np.zeros(2, dtype=np.float32)
    before = store["w"].data.copy()
    adam_step(store, lr=0.1)
    assert np.array_equal(store["w"].data, before)


def test_adam_first_step_magnitude_and_direction():
    # With fresh moments, one update moves each coordinate by about lr
    # against the gradient sign: delta = -lr * g / (|g| + eps').
    store = ParamStore(np.float64)
    store.add("w", np.array([0.3, -0.4, 5.0]))
    g = np.array([2.0, -3.0, 0.5])
    store["w"].grad = g.copy()
    before = store["w"].data.copy()
    adam_step(store, lr=0.01)
    delta = store["w"].data - before
    assert np.allclose(delta, -0.01 * np.sign(g), rtol=1e-6)


def test_adam_descends_with_constant_gradient():
    store = ParamStore(np.float64)
    store.add("w", np.array([1.0]))
    for _ in range(50):
        store["w"].grad = np.array([2.5])
        adam_step(store, lr=0.05)
    assert store["w"].data[0] < 1.0 - 40 * 0.05 * 0.9  # moved steadily down


def test_adam_rejects_nan_gradient():
    store = ParamStore(np.float32)
    store.add("bad_param", np.zeros(3, dtype=np.float32))
    store["bad_param"].grad = np.array([0.0, np.nan, 1.0], dtype=np.float32)
    with pytest.raises(GradientError, match="bad_param"):
        adam_step(store, lr=0.1)


def test_grad_check_requires_float64():
    store = ParamStore(np.float32)
    store.add("x", np.ones(2, dtype=np.float32))
    with pytest.raises(GradientError, match="float64"):
        grad_check(lambda: (store["x"] * store["x"]).sum(), store)


def test_forward_is_deterministic():
    rng = np.random.default_rng(11)
    d, h = 16, 4
    store = ParamStore(np.float32)
    for name in ("wq", "wk", "wv", "wo"):
        store.add(name, xavier_uniform((d, d), rng))
    x = rng.standard_normal((9, d)).astype(np.float32)
    outs = [
        multi_head_attention(
            Tensor(x), Tensor(x), Tensor(x),
            store["wq"], store["wk"], store["wv"], store["wo"], n_heads=h,
        ).data
        for _ in range(2)
    ]
    assert np.array_equal(outs[0], outs[1])


def test_xavier_uniform_bounds():
    rng = np.random.default_rng(12)
    w = xavier_uniform((30, 50), rng)
    limit = math.sqrt(6.0 / 80.0)
    assert np.abs(w).max() <= limit
    assert np.abs(w).max() > 0.8 * limit  # actually spans the range


def test_param_store_round_trip_and_errors():
    store = ParamStore(np.float32)
    store.add("a", np.ones((2, 2)))
    store.add("b", np.zeros(3))
    with pytest.raises(GradientError, match="already exists"):
        store.add("a", np.ones(1))
    assert store.names() == ["a", "b"]
    assert store.n_values() == 7
    copied = store.astype(np.float64)
    assert copied["a"].data.dtype == np.float64
    with pytest.raises(GradientError, match="names do not match"):
        store.load_values({"a": np.ones((2, 2))})
    with pytest.raises(GradientError, match="shape changed"):
        store.load_values({"a": np.ones((2, 3)), "b": np.zeros(3)})
    store.load_values({"a": 2 * np.ones((2, 2)), "b": np.arange(3.0)})
    assert np.array_equal(store["b"].data, np.arange(3, dtype=np.float32))
