import numpy as np
import pytest

from graphcore import make_graph, normalized_laplacian, random_graph, relabel_nodes
from spectral import eigendecompose, apply_filter_exact, heat_response
from diffkernel import LogSoftmaxNLL, grad_check
from model import (
    AttentionInvariantError,
    topk_indices,
    topk_sparsify,
    build_attention,
    dense_attention,
    attention_dense,
    validate_attention,
    asgat_layer,
    prepare_graph,
    init_params,
    forward,
    predict,
    frequency_keep,
    gcn_equivalence_check,
    polynomial_filter_check,
)


def test_topk_keeps_whole_row_when_k_is_n():
    row = np.array([0.3, -1.0, 2.0])
    assert np.array_equal(topk_sparsify(row, 3), row)


def test_topk_selects_largest():
    out = topk_sparsify([0.5, 0.2, 0.9], 1)
    assert out[2] == 0.9
    assert np.all(np.isneginf(out[:2]))


def test_topk_ties_go_to_smaller_index():
    assert topk_indices(np.array([[0.5, 0.5, 0.1]]), 1).tolist() == [[0]]
    assert topk_indices(np.full((1, 5), 2.0), 3).tolist() == [[0, 1, 2]]


def test_topk_treats_rounding_noise_as_ties():
    row = np.array([[3e-17, -2e-17, 1.0, 5e-17, 0.0]])
    assert topk_indices(row, 3).tolist() == [[0, 1, 2]]
    assert topk_indices(np.array([[1.0, 0.5, 1.0 + 1e-9]]), 1).tolist() == [[2]]


def test_identity_heat_filter_keeps_smallest_indices(random10, small_config):
    cfg = dict(small_config, backend="heat", heat_scale=0.0, k=3)
    _, attention = forward(cfg, {"W1": np.eye(3), "W2": np.ones((6, 2))}, prepare_graph(random10, cfg),
                           return_attention=True)
    for v, row in enumerate(attention[0]["indices"][0]):
        others = [u for u in range(10) if u != v][:2]
        assert row.tolist() == sorted([v] + others)


def test_topk_rejects_k_below_one():
    with pytest.raises(ValueError):
        topk_indices(np.ones((1, 3)), 0)


def test_identity_wavelets_give_self_attention():
    att = build_attention(np.eye(4), 1)
    assert np.allclose(attention_dense(att)[0], np.eye(4))


def test_equal_rows_give_uniform_attention_on_smallest_indices():
    att = build_attention(np.ones((5, 5)), 3)
    dense = attention_dense(att)[0]
    assert np.allclose(dense[:, :3], 1.0 / 3.0)
    assert np.all(dense[:, 3:] == 0.0)


def test_heat_attention_on_path(path3):
    spectrum = eigendecompose(normalized_laplacian(path3))
    psi = apply_filter_exact(spectrum, heat_response(1.0, spectrum["eigenvalues"]))
    dense = attention_dense(build_attention(psi, 3))[0]
    expected = np.exp(psi[1]) / np.exp(psi[1]).sum()
    assert np.allclose(dense[1], expected, atol=1e-12)


def test_validate_attention_catches_bad_rows():
    att = dense_attention(np.array([[0.5, 0.4], [0.0, 1.0]]))
    with pytest.raises(AttentionInvariantError):
        validate_attention(att)
    with pytest.raises(AttentionInvariantError):
        validate_attention(dense_attention(np.array([[0.5, 0.5], [0.5, 0.5]])), k=1)


def test_layer_with_identity_attention_repeats_features():
    H = np.abs(np.random.default_rng(0).normal(size=(4, 3)))
    att = dense_attention(np.stack([np.eye(4)] * 2))
    out = asgat_layer(H, att, np.eye(3)).data
    assert np.allclose(out, np.hstack([H, H]))


def test_layer_with_constant_rows():
    H = np.tile([[0.2, -0.7]], (5, 1))
    W = np.array([[1.0, 0.5], [2.0, -1.0]])
    weights = np.random.default_rng(1).random((5, 5))
    att = dense_attention(weights / weights.sum(axis=1, keepdims=True))
    out = asgat_layer(H, att, W).data
    x = H[0] @ W
    expected = np.where(x > 0, x, np.expm1(x))
    assert np.allclose(out, np.tile(expected, (5, 1)))


def test_layer_hand_computation():
    att_matrix = np.array([
        [0.5, 0.5, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.25, 0.25, 0.25, 0.25],
        [0.0, 0.0, 0.0, 1.0],
    ])
    H = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, -1.0]])
    W = np.array([[1.0], [2.0]])
    out = asgat_layer(H, dense_attention(att_matrix), W, activation=None).data
    assert np.allclose(out[:, 0], [1.5, 2.0, 1.5, 0.0])


def test_layer_shape_mismatch():
    with pytest.raises(ValueError):
        asgat_layer(np.ones((3, 2)), dense_attention(np.eye(3)), np.ones((3, 1)))


def test_head_mask_leaves_zero_block():
    H = np.random.default_rng(2).normal(size=(4, 2))
    att = dense_attention(np.stack([np.eye(4)] * 3))
    out = asgat_layer(H, att, np.eye(2), head_mask=np.array([True, False, True])).data
    assert out.shape == (4, 6)
    assert np.all(out[:, 2:4] == 0.0)


def test_zero_filter_gives_tie_broken_uniform_attention(two_cliques, small_config):
    ctx = prepare_graph(two_cliques, small_config)
    params = init_params(small_config, 10, 2, np.random.default_rng(0))
    for name in ("mlp_w3", "mlp_b3"):
        params[name].data = np.zeros_like(params[name].data)
    logits, attention = forward(small_config, params, ctx, return_attention=True)
    assert np.all(np.isfinite(logits.data))
    assert np.all(attention[0]["indices"][0] == [0, 1, 2])
    assert np.allclose(attention[0]["values"].data, 1.0 / 3.0)


@pytest.mark.parametrize("backend", ["exact", "chebyshev", "arma", "heat"])
def test_attention_invariants_hold_for_every_backend(backend, random10, small_config):
    cfg = dict(small_config, backend=backend, dropout=0.3)
    ctx = prepare_graph(random10, cfg)
    params = init_params(cfg, 3, 2, np.random.default_rng(1))
    logits, attention = forward(cfg, params, ctx, training=True, rng=np.random.default_rng(2),
                                return_attention=True)
    assert logits.shape == (10, 2)
    for att in attention:
        assert validate_attention(att, k=cfg["k"])


def test_heat_backend_has_no_filter_parameters(small_config):
    params = init_params(dict(small_config, backend="heat"), 3, 2, np.random.default_rng(0))
    assert sorted(params) == ["W1", "W2"]


def test_exact_and_chebyshev_logits_agree(small_config):
    g = random_graph(50, edge_prob=0.1, feature_dim=4, class_count=3, seed=11)
    cfg = dict(small_config, k=50, cheb_order=15)
    params = init_params(cfg, 4, 3, np.random.default_rng(3))
    # positive weights keep the filter MLP off its ReLU kinks on [0, 2]
    for name in ("mlp_w1", "mlp_w2", "mlp_w3"):
        params[name].data = np.abs(params[name].data)
    for name in ("mlp_b1", "mlp_b2", "mlp_b3"):
        params[name].data = np.full(params[name].shape, 0.1)
    exact = forward(cfg, params, prepare_graph(g, cfg)).data
    cheb_cfg = dict(cfg, backend="chebyshev")
    cheb = forward(cheb_cfg, params, prepare_graph(g, cheb_cfg)).data
    assert np.linalg.norm(cheb - exact) / np.linalg.norm(exact) <= 1e-2


def test_permutation_equivariance(random10, small_config):
    cfg = dict(small_config, k=10)
    params = init_params(cfg, 3, 2, np.random.default_rng(4))
    perm = np.random.default_rng(5).permutation(10)
    permuted = relabel_nodes(random10, perm)
    logits = forward(cfg, params, prepare_graph(random10, cfg)).data
    permuted_logits = forward(cfg, params, prepare_graph(permuted, cfg)).data
    assert np.allclose(permuted_logits[perm], logits, atol=1e-8)


@pytest.mark.parametrize("backend,k", [
    ("exact", 10),
    ("exact", 4),
    ("chebyshev", 10),
    ("chebyshev", 4),
    ("arma", 4),
])
def test_full_model_gradient(backend, k, random10, small_config):
    cfg = dict(small_config, backend=backend, k=k, heads=2, hidden=3, mlp_hidden=4)
    ctx = prepare_graph(random10, cfg)
    rng = np.random.default_rng(6)
    params = init_params(cfg, 3, 2, rng)
    for name in ("mlp_b1", "mlp_b2", "mlp_b3"):
        params[name].data = rng.uniform(0.1, 0.5, size=params[name].shape)
    names = sorted(params)
    mask = np.ones(10, dtype=bool)

    def loss(*tensors):
        logits = forward(cfg, dict(zip(names, tensors)), ctx)
        return LogSoftmaxNLL.apply(logits, labels=random10["labels"], mask=mask)

    assert grad_check(loss, [params[name].data for name in names]) <= 1e-4


def test_frequency_keep_boundaries():
    points = np.array([0.0, 0.5, 1.0, 1.5, 2.0])
    assert frequency_keep(points, 0.0, 1.0).tolist() == [0.0, 0.0, 1.0, 1.0, 1.0]
    assert frequency_keep(points, 1.0, 2.0).tolist() == [1.0, 1.0, 0.0, 0.0, 0.0]
    assert frequency_keep(points, 1.0, 1.0).tolist() == [1.0] * 5


def test_predict_returns_classes(two_cliques, small_config):
    ctx = prepare_graph(two_cliques, small_config)
    params = init_params(small_config, 10, 2, np.random.default_rng(0))
    pred = predict(small_config, params, ctx)
    assert pred.shape == (10,)
    assert set(pred.tolist()) <= {0, 1}


@pytest.mark.parametrize("edges,n", [([(0, 1), (1, 2)], 3), ([(0, 1), (1, 2), (0, 2)], 3), ([(0, 1)], 2)])
def test_gcn_special_case(edges, n):
    g = make_graph(n, edges, np.zeros((n, 1)), [0] * n)
    assert gcn_equivalence_check(g) <= 1e-10


def test_polynomial_filter_special_case(random10):
    assert polynomial_filter_check(random10, [0.5, -0.3, 0.1]) <= 1e-9
