import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nap import diffcore as dc
from nap.architecture import (
    ModelConfig,
    acquisition_head,
    build_mask,
    distribution_head,
    embed_tokens,
    forward,
    forward_batch,
    init_params,
    pack,
    parameter_count,
    parameter_group,
    parameter_shapes,
    policy_probs,
    query_features,
    value_estimate,
)
from nap.distribution import log_prob_tensor
from conftest import numeric_grad, relative_error

DESK = ModelConfig(input_dim=2)
PARAMS = init_params(DESK, 7)


def test_config_defaults_and_validation():
    assert (DESK.embed_dim, DESK.ff_dim, DESK.layers, DESK.heads, DESK.bucket_count) == (64, 128, 2, 2, 64)
    big = ModelConfig.full_scale(3)
    assert (big.embed_dim, big.ff_dim, big.layers, big.heads, big.bucket_count) == (512, 1024, 6, 4, 1000)
    with pytest.raises(ValueError):
        ModelConfig(input_dim=1, embed_dim=10, heads=3)
    with pytest.raises(ValueError):
        ModelConfig(input_dim=0)


def test_parameter_count_matches_shapes():
    assert PARAMS.count() == parameter_count(DESK)
    assert set(parameter_group(n) for n in parameter_shapes(DESK)) == {
        "trunk", "embed", "budget", "acq", "dist", "value"}
    assert parameter_shapes(DESK)["value.w1"] == (2, 512)


def test_build_mask_examples():
    expected = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 0, 0], [1, 1, 1, 0, 0], [1, 1, 1, 1, 0], [1, 1, 1, 0, 1]], bool)
    np.testing.assert_array_equal(build_mask(3, 2), expected)
    np.testing.assert_array_equal(build_mask(0, 1), [[True]])
    m = build_mask(1, 3)
    np.testing.assert_array_equal(m[1:], [[1, 1, 0, 0], [1, 0, 1, 0], [1, 0, 0, 1]])
    with pytest.raises(ValueError):
        build_mask(2, 0)


def test_pack_mask_matches_build_mask(rng):
    hx, hy, qx = rng.random((3, 2)), rng.random(3), rng.random((2, 2))
    batch = pack([(hx, hy, qx, 1, 4)], 2)
    np.testing.assert_array_equal(batch.mask[0, 0], build_mask(3, 2))


def test_embed_tokens_additive(rng):
    x = rng.random((1, 2))
    tok_h = embed_tokens(PARAMS, np.vstack([x, x]), [0.3, 0.3], x)
    np.testing.assert_allclose(tok_h[0], tok_h[1])
    y_emb = 0.3 * PARAMS.arrays["y_embed.w"][0] + PARAMS.arrays["y_embed.b"]
    np.testing.assert_allclose(tok_h[2], tok_h[0] - y_emb, atol=1e-14)
    swapped = embed_tokens(PARAMS, rng.random((2, 2))[::-1], [0.1, 0.9], x)
    assert swapped.shape == (3, DESK.embed_dim)


def test_embed_dimension_mismatch():
    with pytest.raises(ValueError):
        embed_tokens(PARAMS, np.zeros((2, 3)), [0, 1], np.zeros((1, 2)))


def test_forward_shapes_and_errors(rng):
    acq, logits = forward(PARAMS, rng.random((4, 2)), rng.random(4), rng.random((3, 2)), 2, 5)
    assert acq.shape == (3,) and logits.shape == (3, 64)
    with pytest.raises(ValueError):
        forward(PARAMS, None, None, np.zeros((0, 2)), 1, 2)
    with pytest.raises(ValueError):
        forward(PARAMS, None, None, rng.random((1, 2)), 3, 2)


def test_forward_empty_history(rng):
    acq, logits = forward(PARAMS, None, None, rng.random((1, 2)), 1, 3)
    assert np.isfinite(acq).all() and np.isfinite(logits).all()


def test_budget_only_reaches_acquisition(rng):
    hx, hy, q = rng.random((3, 2)), rng.random(3), rng.random((2, 2))
    a1, d1 = forward(PARAMS, hx, hy, q, 1, 5)
    a2, d2 = forward(PARAMS, hx, hy, q, 4, 5)
    np.testing.assert_array_equal(d1, d2)
    assert not np.allclose(a1, a2)


def test_dense_and_structured_attention_agree(rng):
    states = [(rng.random((h, 2)), rng.random(h), rng.random((q, 2)), 1, 3) for h, q in [(3, 2), (0, 4), (5, 1)]]
    batch = pack(states, 2)
    w = PARAMS.tensors()
    fast = query_features(w, batch, DESK).data
    dense = query_features(w, batch, DESK, dense=True).data
    np.testing.assert_allclose(fast[batch.query_valid], dense[batch.query_valid], atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.integers(1, 5))
def test_history_permutation_invariance(seed, n_hist, n_query):
    r = np.random.default_rng(seed)
    hx, hy, q = r.random((n_hist, 2)), r.random(n_hist), r.random((n_query, 2))
    perm = r.permutation(n_hist)
    a, d = forward(PARAMS, hx, hy, q, 2, 6)
    ap, dp = forward(PARAMS, hx[perm], hy[perm], q, 2, 6)
    np.testing.assert_allclose(ap, a, atol=1e-6)
    np.testing.assert_allclose(dp, d, atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 6), st.integers(2, 6))
def test_query_independence(seed, n_hist, n_query):
    r = np.random.default_rng(seed)
    hx, hy, q = r.random((n_hist, 2)), r.random(n_hist), r.random((n_query, 2))
    a, d = forward(PARAMS, hx, hy, q, 1, 4)
    subset = np.sort(r.choice(n_query, size=r.integers(1, n_query + 1), replace=False))
    order = r.permutation(subset)
    a_s, d_s = forward(PARAMS, hx, hy, q[order], 1, 4)
    np.testing.assert_allclose(a_s, a[order], atol=1e-6)
    np.testing.assert_allclose(d_s, d[order], atol=1e-6)


def test_policy_probs_examples():
    np.testing.assert_allclose(policy_probs([2.0, 2.0], 0.3), [0.5, 0.5])
    np.testing.assert_allclose(policy_probs([1.0, 0.0], 1.0), [0.731059, 0.268941], atol=1e-6)
    np.testing.assert_array_equal(policy_probs([2, 5, 5], "argmax"), [0, 1, 0])
    with pytest.raises(ValueError):
        policy_probs([], 1.0)
    with pytest.raises(ValueError):
        policy_probs([1.0], 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 10), st.floats(-100, 100))
def test_policy_probs_properties(seed, temp, shift):
    a = np.random.default_rng(seed).normal(size=7)
    p = policy_probs(a, temp)
    assert abs(p.sum() - 1) < 1e-12
    np.testing.assert_allclose(policy_probs(a + shift, temp), p, atol=1e-12)
    assert np.argmax(p) == np.argmax(policy_probs(a, "argmax"))


def test_value_estimate():
    zeroed = PARAMS.replace({k: np.zeros_like(v) for k, v in PARAMS.arrays.items() if k.startswith("value.")})
    assert value_estimate(zeroed, 2, 5, 0.7) == 0.0
    assert value_estimate(PARAMS, 2, 4, 0.3) == value_estimate(PARAMS, 3, 6, 0.3)
    with pytest.raises(ValueError):
        value_estimate(PARAMS, 6, 5, 0.1)


def test_value_gradient_fd():
    small = init_params(ModelConfig(input_dim=1, embed_dim=8, ff_dim=8, layers=1, heads=2, bucket_count=8,
                                    value_hidden=6), 3)
    from nap.architecture import value_features, value_head
    feats = value_features([1, 2, 3], [4, 4, 4], [0.1, 0.5, 0.9])
    names = ["value.w1", "value.b1", "value.w2", "value.b2"]

    def loss_of(arrays):
        return (value_head({k: dc.Tensor(v) for k, v in arrays.items()}, feats).data ** 2).sum()

    with dc.Tape():
        w = small.tensors(requires_grad=True, names=names)
        out = value_head(w, feats)
        loss = (out * out).sum()
    _, g = dc.value_and_grad(loss, {k: w[k] for k in names})
    arrays = {k: small.arrays[k] for k in names}
    for k in names:
        assert relative_error(g[k], numeric_grad(loss_of, arrays, k)) < 1e-4


def test_end_to_end_gradient_every_group():
    cfg = ModelConfig(input_dim=2, embed_dim=8, ff_dim=12, layers=2, heads=2, bucket_count=6)
    params = init_params(cfg, 11)
    r = np.random.default_rng(5)
    hx, hy, q, yq = r.random((3, 2)), r.random(3), r.random((2, 2)), r.random(2)
    batch = pack([(hx, hy, q, 2, 4)], 2)

    def build(w):
        feats = query_features(w, batch, cfg)
        acq = acquisition_head(w, feats, batch) / 0.1
        logp = acq[:, 0] - dc.logsumexp(acq, axis=1)
        aux = log_prob_tensor(distribution_head(w, feats), yq[None], cfg.bucket_spec)
        return -aux.mean() - logp.sum()

    with dc.Tape():
        w = params.tensors(requires_grad=True)
        loss = build(w)
    _, grads = dc.value_and_grad(loss, w)
    fn = lambda arrays: build({k: dc.Tensor(v) for k, v in arrays.items()}).item()  # noqa: E731
    groups: dict[str, tuple[list, list]] = {}
    for name in params.arrays:
        if parameter_group(name) == "value":
            continue
        analytic, numeric = groups.setdefault(parameter_group(name), ([], []))
        analytic.append(grads[name].ravel())
        numeric.append(numeric_grad(fn, dict(params.arrays), name).ravel())
    assert set(groups) == {"trunk", "embed", "budget", "acq", "dist"}
    for group, (analytic, numeric) in groups.items():
        err = relative_error(np.concatenate(analytic), np.concatenate(numeric))
        assert err < 1e-4, (group, err)


def test_forward_batch_heads_optional(rng):
    batch = pack([(rng.random((2, 2)), rng.random(2), rng.random((3, 2)), 1, 2)], 2)
    a, d = forward_batch(PARAMS, batch, dist=False)
    assert d is None and a.shape == (1, 3)
