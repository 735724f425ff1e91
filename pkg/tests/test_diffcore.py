import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nap import diffcore as dc
from conftest import check_grads


def test_square_gradient():
    with dc.Tape():
        w = dc.Tensor(np.array(3.0), requires_grad=True)
        loss = w * w
    value, grads = dc.value_and_grad(loss, {"w": w})
    assert value == 9.0
    assert grads["w"] == pytest.approx(6.0)


def test_softmax_symmetric():
    np.testing.assert_allclose(dc.softmax(dc.Tensor(np.zeros(2))).data, [0.5, 0.5])


def test_logsumexp_pair():
    assert dc.logsumexp(dc.Tensor(np.array([3.0, 3.0]))).item() == pytest.approx(3.693147, abs=1e-6)


def test_cross_entropy_uniform_gradient():
    n = 5
    with dc.Tape():
        z = dc.Tensor(np.zeros(n), requires_grad=True)
        loss = dc.logsumexp(z) - dc.gather(z, np.array([2]))[0]
    _, g = dc.value_and_grad(loss, {"z": z})
    target = np.eye(n)[2]
    np.testing.assert_allclose(g["z"], 1.0 / n - target, atol=1e-12)


def test_self_only_attention_returns_values(rng):
    q, k, v = (dc.Tensor(rng.normal(size=(1, 1, 4, 3))) for _ in range(3))
    mask = np.eye(4, dtype=bool)[None, None]
    np.testing.assert_allclose(dc.attention(q, k, v, mask).data, v.data, atol=1e-15)


def test_non_scalar_loss_rejected():
    with dc.Tape():
        w = dc.Tensor(np.ones(3), requires_grad=True)
        out = w * 2.0
    with pytest.raises(dc.ShapeError):
        dc.value_and_grad(out, {"w": w})


def test_shape_mismatch_raises():
    with pytest.raises(dc.ShapeError):
        dc.matmul(dc.Tensor(np.ones((2, 3))), dc.Tensor(np.ones((2, 3))))
    with pytest.raises(dc.ShapeError):
        dc.add(dc.Tensor(np.ones(3)), dc.Tensor(np.ones(4)))


def test_numeric_error_names_op():
    with pytest.raises(dc.NumericError) as info:
        dc.log(dc.Tensor(np.array([-1.0])))
    assert info.value.op == "log"


def test_unreached_parameter_gets_zero():
    with dc.Tape():
        a = dc.Tensor(np.ones(2), requires_grad=True)
        b = dc.Tensor(np.ones(3), requires_grad=True)
        loss = (a * a).sum()
    _, g = dc.value_and_grad(loss, {"a": a, "b": b})
    np.testing.assert_array_equal(g["b"], np.zeros(3))


def test_gradient_accumulates_over_reuse():
    with dc.Tape():
        w = dc.Tensor(np.array(2.0), requires_grad=True)
        loss = w * 3.0 + w * 5.0
    _, g = dc.value_and_grad(loss, {"w": w})
    assert g["w"] == pytest.approx(8.0)


def test_no_tape_no_records():
    w = dc.Tensor(np.array(2.0), requires_grad=True)
    out = w * w
    assert out.tape is None


def test_masked_pairs_receive_no_gradient(rng):
    # query 0 may only see key 0: changing key/value 1 must not change its output
    q = rng.normal(size=(1, 1, 2, 3))
    k = rng.normal(size=(1, 1, 2, 3))
    v = rng.normal(size=(1, 1, 2, 3))
    mask = np.array([[True, False], [True, True]])[None, None]
    with dc.Tape():
        kt = dc.Tensor(k, requires_grad=True)
        vt = dc.Tensor(v, requires_grad=True)
        out = dc.attention(dc.Tensor(q), kt, vt, mask)
        loss = out[:, :, 0].sum()
    _, g = dc.value_and_grad(loss, {"k": kt, "v": vt})
    np.testing.assert_array_equal(g["k"][:, :, 1], 0.0)
    np.testing.assert_array_equal(g["v"][:, :, 1], 0.0)


# ---------------------------------------------------------------------------
# finite-difference checks per primitive

def _arr(rng, *shape):
    return rng.normal(size=shape)


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_binary_broadcast_grads(rng, op):
    fn = getattr(dc, op)
    arrays = {"a": _arr(rng, 3, 4), "b": rng.uniform(0.5, 2.0, size=(4,))}
    check_grads(lambda t: (fn(t["a"], t["b"]) * fn(t["a"], t["b"])).sum(), arrays)


@pytest.mark.parametrize("op", ["tanh", "exp", "neg"])
def test_unary_grads(rng, op):
    fn = getattr(dc, op)
    check_grads(lambda t: (fn(t["a"]) * t["a"]).sum(), {"a": _arr(rng, 3, 2)})


def test_relu_grad(rng):
    a = rng.normal(size=(4, 5))
    a[np.abs(a) < 0.05] = 0.3  # keep away from the kink
    check_grads(lambda t: (dc.relu(t["a"]) * dc.relu(t["a"])).sum(), {"a": a})


def test_log_grad(rng):
    check_grads(lambda t: dc.log(t["a"]).sum(), {"a": rng.uniform(0.5, 3, size=(3, 3))})


def test_clip_and_minimum_grads(rng):
    a = rng.uniform(0.5, 1.5, size=6)
    a[np.abs(a - 0.8) < 0.02] = 0.9
    a[np.abs(a - 1.2) < 0.02] = 1.0
    b = a + rng.choice([-0.3, 0.3], size=6)
    check_grads(lambda t: (dc.minimum(dc.clip(t["a"], 0.8, 1.2) * 2.0, t["b"] * 2.0)).sum(), {"a": a, "b": b})


@pytest.mark.parametrize("shape_a,shape_b", [((3, 4), (4, 2)), ((2, 3, 4), (4, 5)), ((2, 3, 4), (2, 4, 2))])
def test_matmul_grads(rng, shape_a, shape_b):
    check_grads(lambda t: (dc.matmul(t["a"], t["b"]) * dc.matmul(t["a"], t["b"])).sum(),
                {"a": _arr(rng, *shape_a), "b": _arr(rng, *shape_b)})


def test_linear_grads(rng):
    check_grads(lambda t: dc.tanh(dc.linear(t["x"], t["w"], t["b"])).sum(),
                {"x": _arr(rng, 2, 3, 4), "w": _arr(rng, 4, 5), "b": _arr(rng, 5)})


def test_layer_norm_grads(rng):
    arrays = {"x": _arr(rng, 3, 6), "g": rng.uniform(0.5, 1.5, 6), "b": _arr(rng, 6)}
    w = rng.normal(size=(3, 6))
    check_grads(lambda t: (dc.layer_norm(t["x"], t["g"], t["b"]) * w).sum(), arrays)


def test_softmax_and_logsumexp_grads(rng):
    w = rng.normal(size=(2, 5))
    mask = rng.random((2, 5)) > 0.3
    mask[:, 0] = True
    check_grads(lambda t: (dc.softmax(t["x"], axis=-1) * w).sum() + dc.logsumexp(t["x"], axis=-1, mask=mask).sum(),
                {"x": _arr(rng, 2, 5)})


def test_attention_grads(rng):
    mask = np.tril(np.ones((4, 4), dtype=bool))[None, None]
    w = rng.normal(size=(1, 2, 4, 3))
    check_grads(lambda t: (dc.attention(t["q"], t["k"], t["v"], mask) * w).sum(),
                {"q": _arr(rng, 1, 2, 4, 3), "k": _arr(rng, 1, 2, 4, 3), "v": _arr(rng, 1, 2, 4, 3)})


def _history_mask(h_max, q_max, n_hist):
    B = len(n_hist)
    L = h_max + q_max
    m = np.zeros((B, 1, L, L), dtype=bool)
    for b, h in enumerate(n_hist):
        m[b, 0, :h, :h] = True
        m[b, 0, h_max:, :h] = True
        for i in range(h, L):
            m[b, 0, i, i] = True
    return m


def test_history_attention_matches_dense_and_grads(rng):
    h_max, q_max, n_hist = 3, 2, [3, 1]
    hist_valid = np.array([[True, True, True], [True, False, False]])
    shape = (2, 2, h_max + q_max, 4)
    q, k, v = _arr(rng, *shape), _arr(rng, *shape), _arr(rng, *shape)
    dense = dc.attention(dc.Tensor(q), dc.Tensor(k), dc.Tensor(v), _history_mask(h_max, q_max, n_hist)).data
    fast = dc.history_attention(dc.Tensor(q), dc.Tensor(k), dc.Tensor(v), h_max, hist_valid).data
    np.testing.assert_allclose(fast, dense, atol=1e-12)
    w = rng.normal(size=shape)
    check_grads(lambda t: (dc.history_attention(t["q"], t["k"], t["v"], h_max, hist_valid) * w).sum(),
                {"q": q, "k": k, "v": v})


def test_structure_op_grads(rng):
    idx = np.array([[0, 2], [1, 1], [3, 0]])
    check_grads(
        lambda t: (dc.gather(t["a"], idx, axis=1) * 1.5).sum()
        + (dc.concat([t["a"], t["b"]], axis=1) * dc.concat([t["b"], t["a"]], axis=1)).sum()
        + dc.reshape(t["a"], (4, 3)).mean(axis=0).sum()
        + (dc.transpose(t["a"], (1, 0))[1:3] * 2.0).sum()
        + dc.sum_(t["b"], axis=1, keepdims=True).sum(),
        {"a": _arr(rng, 3, 4), "b": _arr(rng, 3, 4)},
    )


def test_two_layer_network_grad(rng):
    x = rng.normal(size=(8, 3))
    y = rng.normal(size=(8, 1))
    arrays = {"w1": _arr(rng, 3, 6), "b1": _arr(rng, 6), "w2": _arr(rng, 6, 1), "b2": _arr(rng, 1)}

    def build(t):
        h = dc.tanh(dc.linear(dc.Tensor(x), t["w1"], t["b1"]))
        err = dc.linear(h, t["w2"], t["b2"]) - y
        return (err * err).mean()

    check_grads(build, arrays)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_random_composite_grads(rows, cols, seed):
    r = np.random.default_rng(seed)
    arrays = {"a": r.normal(size=(rows, cols)), "b": r.normal(size=(cols,))}
    check_grads(lambda t: dc.logsumexp(dc.tanh(t["a"] * t["b"]) + t["a"], axis=-1).sum(), arrays)
