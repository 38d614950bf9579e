import numpy as np
import pytest

from trifuse import autograd as ag
from trifuse import connector as qc
from trifuse.autograd import ParameterStore, Tensor, finite_diff_check
from trifuse.connector import (
    MODALITIES,
    ModalityBundle,
    ModalityError,
    compute_weights,
    connector_forward,
    constant_weights,
    cross_attend,
    fuse,
    init_connector,
    pool_modality,
    weighted_sum,
)

D, D_LLM = 8, 12


def make_params(seed=0, tau=1.0):
    store = ParameterStore()
    rng = np.random.default_rng(seed)
    return store, init_connector(store, D, D_LLM, rng, tau=tau)


def make_bundle(rng, b=2, f=2, t=3, present=MODALITIES):
    kw = {m: Tensor(rng.standard_normal((b, f, t, D))) for m in present}
    return ModalityBundle(**kw)


def make_query(rng, b=2, l=3):
    return Tensor(rng.standard_normal((b, l, D)))


# -- bundle -----------------------------------------------------------------


def test_bundle_requires_one_modality():
    with pytest.raises(ModalityError):
        ModalityBundle()


def test_bundle_rejects_shape_mismatch():
    with pytest.raises(ag.ShapeError):
        ModalityBundle(
            vision=Tensor(np.zeros((1, 2, 3, D))),
            audio=Tensor(np.zeros((1, 2, 4, D))),
        )


def test_bundle_restriction_and_fill():
    rng = np.random.default_rng(0)
    bundle = make_bundle(rng)
    av = bundle.restricted(["vision", "audio"])
    assert av.present == ("vision", "audio")
    filled = av.zero_filled()
    assert filled.present == MODALITIES
    assert np.all(filled.speech.data == 0)


# -- cross attention -----------------------------------------------------------


def test_cross_attend_single_token_is_layernormed_value():
    rng = np.random.default_rng(1)
    store, params = make_params(1)
    p = params.attn["vision"]
    tokens = Tensor(rng.standard_normal((1, 1, D)))  # one key: attention weight 1
    query = make_query(rng, b=1, l=2)
    out = cross_attend(tokens, query, p)
    expected = ag.layer_norm(
        ag.matmul(ag.matmul(tokens, p["wv"]), p["wo"]), p["ln_g"], p["ln_b"]
    )
    assert np.allclose(out.data, np.repeat(expected.data, 2, axis=1), atol=1e-12)


def test_cross_attend_constant_values_give_constant_rows():
    rng = np.random.default_rng(2)
    store, params = make_params(2)
    p = params.attn["audio"]
    row = rng.standard_normal(D)
    tokens = Tensor(np.tile(row, (1, 5, 1)))
    query = make_query(rng, b=1, l=3)
    q = ag.matmul(query, p["wq"])
    k = ag.matmul(tokens, p["wk"])
    v = ag.matmul(tokens, p["wv"])
    logits = ag.matmul(q, ag.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(D))
    attn = ag.softmax(logits, axis=-1)
    pre = ag.matmul(attn, v)
    # convex combination of identical rows == that row, before LayerNorm
    assert np.allclose(pre.data, v.data[:, :1, :], atol=1e-12)


def test_cross_attend_rows_sum_to_one_and_gradients_pass():
    rng = np.random.default_rng(3)
    store, params = make_params(3)
    p = params.attn["speech"]
    tokens = Tensor(rng.standard_normal((1, 2 * 3, D)))
    query = Tensor(rng.standard_normal((1, 3, D)), requires_grad=True)
    q = ag.matmul(query, p["wq"])
    k = ag.matmul(tokens, p["wk"])
    attn = ag.softmax(ag.matmul(q, ag.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(D)), axis=-1)
    assert np.max(np.abs(attn.data.sum(axis=-1) - 1.0)) < 1e-12

    def loss():
        return ag.tsum(ag.tanh(cross_attend(tokens, query, p)))

    assert finite_diff_check(loss, query, rng=rng) < 1e-4
    for name in ("wq", "wk", "wv", "wo"):
        assert finite_diff_check(loss, p[name], rng=rng) < 1e-4


def test_cross_attend_dim_mismatch():
    rng = np.random.default_rng(4)
    store, params = make_params(4)
    with pytest.raises(ag.ShapeError):
        cross_attend(
            Tensor(rng.standard_normal((1, 4, D + 1))),
            make_query(rng, b=1),
            params.attn["vision"],
        )


# -- pooling ----------------------------------------------------------------------


def test_pool_modality_single_token_identity():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 1, D))
    assert np.allclose(pool_modality(Tensor(x)).data, x[:, 0, :], atol=1e-15)


def test_pool_modality_mean_rows():
    x = Tensor(np.array([[[1.0, 1.0], [3.0, 3.0]]]))
    assert pool_modality(x).data.tolist() == [[2.0, 2.0]]


def test_pool_modality_matches_naive_loop():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((3, 7, D))
    naive = np.zeros((3, D))
    for i in range(3):
        for t in range(7):
            naive[i] += x[i, t]
    naive /= 7
    assert np.max(np.abs(pool_modality(Tensor(x)).data - naive)) < 1e-12


# -- weighting ----------------------------------------------------------------------


def zeroed_weight_net(params):
    params.weight_w.data[:] = 0.0
    params.weight_b.data[:] = 0.0


def test_weights_uniform_when_logits_zero():
    store, params = make_params(7)
    zeroed_weight_net(params)
    rng = np.random.default_rng(7)
    pooled = {m: Tensor(rng.standard_normal((2, D))) for m in MODALITIES}
    w = compute_weights(pooled, params, MODALITIES).data
    assert np.allclose(w, 1.0 / 3.0, atol=1e-12)


def test_weights_masked_symmetric_pair():
    store, params = make_params(8)
    zeroed_weight_net(params)
    rng = np.random.default_rng(8)
    pooled = {
        "vision": Tensor(rng.standard_normal((1, D))),
        "audio": None,
        "speech": Tensor(rng.standard_normal((1, D))),
    }
    w = compute_weights(pooled, params, ("vision", "speech")).data[0]
    assert w[0] == 0.5 and w[1] == 0.0 and w[2] == 0.5


def test_weights_single_modality_degenerate():
    store, params = make_params(9)
    rng = np.random.default_rng(9)
    pooled = {"vision": Tensor(rng.standard_normal((3, D))), "audio": None, "speech": None}
    w = compute_weights(pooled, params, ("vision",)).data
    assert np.all(w[:, 0] == 1.0)
    assert np.all(w[:, 1:] == 0.0)


def test_weights_empty_present_errors():
    store, params = make_params(10)
    with pytest.raises(ModalityError):
        compute_weights({}, params, ())


def test_weights_simplex_fuzz_all_subsets():
    rng = np.random.default_rng(11)
    store, params = make_params(11)
    subsets = [
        ("vision",), ("audio",), ("speech",),
        ("vision", "audio"), ("vision", "speech"), ("audio", "speech"),
        MODALITIES,
    ]
    for i in range(1000):
        present = subsets[i % len(subsets)]
        pooled = {
            m: (Tensor(rng.standard_normal((2, D)) * 10) if m in present else None)
            for m in MODALITIES
        }
        w = compute_weights(pooled, params, present).data
        assert np.all(w >= 0)
        present_mask = np.array([m in present for m in MODALITIES])
        assert np.max(np.abs(w[:, present_mask].sum(axis=1) - 1.0)) < 1e-9
        assert np.all(w[:, ~present_mask] == 0.0)


def test_weights_shift_invariance():
    store, params = make_params(12)
    rng = np.random.default_rng(12)
    pooled = {m: Tensor(rng.standard_normal((2, D))) for m in MODALITIES}
    w1 = compute_weights(pooled, params, MODALITIES).data
    params.weight_b.data += 123.0  # adds a constant to all three logits
    w2 = compute_weights(pooled, params, MODALITIES).data
    assert np.max(np.abs(w1 - w2)) < 1e-12


def test_weights_no_overflow_with_extreme_masked_logit():
    store, params = make_params(13)
    rng = np.random.default_rng(13)
    params.weight_b.data[:] = [0.0, 5000.0, 0.0]  # absent audio gets a huge logit
    pooled = {
        "vision": Tensor(rng.standard_normal((1, D))),
        "audio": None,
        "speech": Tensor(rng.standard_normal((1, D))),
    }
    w = compute_weights(pooled, params, ("vision", "speech")).data
    assert np.all(np.isfinite(w))
    assert w[0, 1] == 0.0


# -- fusion ------------------------------------------------------------------------


def test_fuse_one_hot_selects_stream_exactly():
    rng = np.random.default_rng(14)
    store, params = make_params(14)
    streams = {m: Tensor(rng.standard_normal((2, 3, D))) for m in MODALITIES}
    w = Tensor(np.tile([1.0, 0.0, 0.0], (2, 1)))
    s_hat = weighted_sum(w, streams)
    assert np.array_equal(s_hat.data, streams["vision"].data)


def test_fuse_convexity_on_identical_streams():
    rng = np.random.default_rng(15)
    common = Tensor(rng.standard_normal((2, 3, D)))
    streams = {m: common for m in MODALITIES}
    w = Tensor(np.tile([0.2, 0.5, 0.3], (2, 1)))
    s_hat = weighted_sum(w, streams)
    assert np.allclose(s_hat.data, common.data, atol=1e-12)


def test_fuse_matches_elementwise_oracle():
    rng = np.random.default_rng(16)
    streams = {m: Tensor(rng.standard_normal((2, 3, D))) for m in MODALITIES}
    w = rng.dirichlet(np.ones(3), size=2)
    s_hat = weighted_sum(Tensor(w), streams).data
    oracle = (
        w[:, 0, None, None] * streams["vision"].data
        + w[:, 1, None, None] * streams["audio"].data
        + w[:, 2, None, None] * streams["speech"].data
    )
    assert np.max(np.abs(s_hat - oracle)) < 1e-12


def test_fuse_rejects_weight_on_absent_stream():
    rng = np.random.default_rng(17)
    streams = {
        "vision": Tensor(rng.standard_normal((1, 3, D))),
        "audio": None,
        "speech": None,
    }
    with pytest.raises(ModalityError):
        weighted_sum(Tensor([[0.9, 0.1, 0.0]]), streams)


def test_fuse_output_shape():
    rng = np.random.default_rng(18)
    store, params = make_params(18)
    streams = {m: Tensor(rng.standard_normal((2, 3, D))) for m in MODALITIES}
    w = Tensor(np.tile([0.3, 0.4, 0.3], (2, 1)))
    _, out = fuse(w, streams, params)
    assert out.shape == (2, 3, D_LLM)


# -- full forward -------------------------------------------------------------------


def test_forward_single_modality_ignores_absent_values():
    rng = np.random.default_rng(19)
    store, params = make_params(19)
    query = make_query(rng)
    vision = Tensor(rng.standard_normal((2, 2, 3, D)))
    only_v = ModalityBundle(vision=vision)
    with_junk = ModalityBundle(
        vision=vision,
        audio=Tensor(rng.standard_normal((2, 2, 3, D)) * 100),
    ).restricted(["vision"])
    a = connector_forward(only_v, query, params)
    b = connector_forward(with_junk, query, params)
    assert np.array_equal(a.tokens.data, b.tokens.data)
    assert np.array_equal(a.weights.data, [[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])


def test_forward_gradients_all_connector_params():
    rng = np.random.default_rng(20)
    store, params = make_params(20)
    bundle = make_bundle(rng, b=1, f=2, t=2)
    query = Tensor(rng.standard_normal((1, 2, D)), requires_grad=True)
    probe = Tensor(rng.standard_normal((1, 2, D_LLM)))

    def loss():
        out = connector_forward(bundle, query, params)
        return ag.tsum(out.tokens * probe)

    for name, tensor in store.items():
        err = finite_diff_check(loss, tensor, max_coords=3, rng=rng)
        assert err < 1e-4, f"{name}: {err}"


def test_forward_deterministic():
    rng = np.random.default_rng(21)
    store, params = make_params(21)
    bundle = make_bundle(rng)
    query = make_query(rng)
    a = connector_forward(bundle, query, params)
    b = connector_forward(bundle, query, params)
    assert np.array_equal(a.tokens.data, b.tokens.data)
    assert np.array_equal(a.weights.data, b.weights.data)


def test_forward_modality_permutation_equivariance():
    rng = np.random.default_rng(22)
    store, params = make_params(22)
    b, f, t = 1, 2, 2
    tracks = {m: rng.standard_normal((b, f, t, D)) for m in MODALITIES}
    query = make_query(rng, b=b, l=2)

    out1 = connector_forward(
        ModalityBundle(**{m: Tensor(v) for m, v in tracks.items()}), query, params
    )

    # swap vision and audio streams AND their parameters consistently
    perm = {"vision": "audio", "audio": "vision", "speech": "speech"}
    store2, params2 = make_params(22)
    for m_new, m_old in perm.items():
        for key in ("wq", "wk", "wv", "wo", "ln_g", "ln_b"):
            params2.attn[m_new][key].data = params.attn[m_old][key].data.copy()
    # weighting net: permute both the input blocks (rows) and output logits (cols)
    iv, ia, isp = 0, 1, 2
    col_perm = [ia, iv, isp]
    w = params.weight_w.data.reshape(3, D, 3)
    params2.weight_w.data = w[col_perm][:, :, col_perm].reshape(3 * D, 3)
    params2.weight_b.data = params.weight_b.data[col_perm]

    bundle2 = ModalityBundle(
        vision=Tensor(tracks["audio"]), audio=Tensor(tracks["vision"]), speech=Tensor(tracks["speech"])
    )
    out2 = connector_forward(bundle2, query, params2)
    assert np.allclose(out1.tokens.data, out2.tokens.data, atol=1e-10)
    assert np.allclose(out1.weights.data[:, [0, 1, 2]], out2.weights.data[:, [1, 0, 2]], atol=1e-12)


def test_forward_fixed_and_addition_modes():
    rng = np.random.default_rng(23)
    store, params = make_params(23)
    bundle = make_bundle(rng, present=("vision", "audio"))
    query = make_query(rng)
    fixed = connector_forward(bundle, query, params, mode="fixed")
    assert np.allclose(fixed.weights.data, [[0.5, 0.5, 0.0], [0.5, 0.5, 0.0]])
    added = connector_forward(bundle, query, params, mode="addition")
    assert np.array_equal(added.weights.data, np.ones((2, 3)))


def test_fixed_visual_only_equals_adaptive_masked_degenerate():
    rng = np.random.default_rng(24)
    store, params = make_params(24)
    bundle = make_bundle(rng, present=("vision",))
    query = make_query(rng)
    adaptive = connector_forward(bundle, query, params, mode="adaptive")
    fixed = connector_forward(bundle, query, params, mode="fixed")
    assert np.array_equal(adaptive.weights.data, fixed.weights.data)
    assert np.array_equal(adaptive.tokens.data, fixed.tokens.data)


def test_constant_weights_unit_sum_and_simplex():
    fixed = constant_weights("fixed", ("vision", "speech"), 2).data
    assert np.allclose(fixed.sum(axis=1), 1.0)
    addition = constant_weights("addition", ("vision",), 2).data
    assert np.all(addition == 1.0)
