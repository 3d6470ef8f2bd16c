import math

import numpy as np
import pytest

from phibal.autodiff import constant
from phibal.checks import finite_diff_gradient, gradient_max_rel_error
from phibal.moe import MoeLayer


def make_layer(n_experts=4, top_k=2, dim=5, ffn_dim=6, seed=0) -> MoeLayer:
    return MoeLayer(n_experts, top_k, dim, ffn_dim, np.random.default_rng(seed))


def route_with_logits(layer, logit_rows, bias=None):
    """Force exact router logits by feeding identity-ish inputs."""
    # x @ w_router.T = logits  <=>  x = logits @ pinv(w_router.T)
    target = np.asarray(logit_rows, dtype=np.float64)
    x = target @ np.linalg.pinv(layer.w_router.value.T)
    return layer.route(constant(x), bias), x


# -- routing -----------------------------------------------------------------------


def test_top2_weights_are_renormalized_softmax():
    layer = make_layer(n_experts=3, top_k=2, dim=3)
    routing, _ = route_with_logits(layer, [[2.0, 1.0, 0.0]])
    np.testing.assert_array_equal(routing.selections, [[0, 1]])
    e = math.e
    np.testing.assert_allclose(
        routing.weights.value[0],
        [e**2 / (e**2 + e), e / (e**2 + e), 0.0],
        atol=1e-9,
    )
    assert routing.weights.value[0, 2] == 0.0


def test_equal_logits_tie_break_by_ascending_index():
    layer = make_layer(n_experts=4, top_k=2, dim=4)
    routing, _ = route_with_logits(layer, [[0.0, 0.0, 0.0, 0.0]])
    np.testing.assert_array_equal(routing.selections, [[0, 1]])
    np.testing.assert_allclose(routing.weights.value[0, :2], [0.5, 0.5], atol=1e-9)


def test_k1_frequencies():
    layer = make_layer(n_experts=2, top_k=1, dim=2)
    routing, _ = route_with_logits(layer, [[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_allclose(routing.f, [0.5, 0.5])
    assert routing.f.sum() == pytest.approx(1.0)


def test_k1_weight_is_pre_topk_probability():
    layer = make_layer(n_experts=3, top_k=1, dim=3)
    routing, _ = route_with_logits(layer, [[1.0, 0.3, -0.5]])
    probs = routing.probs.value[0]
    np.testing.assert_allclose(routing.weights.value[0], [probs[0], 0.0, 0.0])


def test_topk_weights_form_simplex_rows():
    layer = make_layer(n_experts=6, top_k=3, dim=5, seed=3)
    rng = np.random.default_rng(4)
    routing = layer.route(constant(rng.standard_normal((40, 5))))
    w = routing.weights.value
    assert np.all(w >= 0.0)
    np.testing.assert_allclose(w.sum(axis=1), np.ones(40), atol=1e-9)
    # Exactly k strictly positive weights per row.
    assert np.all((w > 0).sum(axis=1) == 3)


def test_probs_rows_sum_to_one_and_f_normalization():
    layer = make_layer(n_experts=5, top_k=2, dim=4, seed=5)
    rng = np.random.default_rng(6)
    routing = layer.route(constant(rng.standard_normal((33, 4))))
    np.testing.assert_allclose(routing.probs.value.sum(axis=1), np.ones(33), atol=1e-9)
    assert routing.f.sum() == pytest.approx(1.0, abs=1e-9)
    assert routing.f_per_token.sum() == pytest.approx(2.0, abs=1e-9)


def test_bias_steers_selection_but_not_weight_inputs():
    layer = make_layer(n_experts=3, top_k=1, dim=3)
    logits = [[1.0, 0.8, -2.0]]
    plain, _ = route_with_logits(layer, logits)
    bias = np.array([0.0, 10.0, 0.0])
    steered, _ = route_with_logits(layer, logits, bias=bias)
    assert plain.selections[0, 0] == 0
    assert steered.selections[0, 0] == 1
    # Probabilities (and hence weight inputs) never see the bias.
    np.testing.assert_allclose(steered.probs.value, plain.probs.value, atol=1e-12)


def test_top_k_must_not_exceed_experts():
    with pytest.raises(ValueError):
        make_layer(n_experts=2, top_k=3)


# -- experts ------------------------------------------------------------------------


def test_zero_gate_matrix_gives_zero_output():
    layer = make_layer(n_experts=2, top_k=1, dim=3, ffn_dim=4)
    layer.w1[0].value[:] = 0.0
    out = layer.expert_forward(0, constant(np.random.default_rng(0).standard_normal((5, 3))))
    np.testing.assert_array_equal(out.value, np.zeros((5, 3)))


def test_expert_forward_one_dimensional_pin():
    layer = make_layer(n_experts=2, top_k=1, dim=1, ffn_dim=1)
    layer.w1[0].value = np.array([[1.0], [1.0]])
    layer.w2[0].value = np.array([[1.0]])
    out = layer.expert_forward(0, constant([[2.0]]))
    sigma2 = 1.0 / (1.0 + math.exp(-2.0))
    assert float(out.value[0, 0]) == pytest.approx(2.0 * 2.0 * sigma2)
    assert float(out.value[0, 0]) == pytest.approx(3.523188, abs=1e-6)


def test_expert_forward_gradient_matches_finite_differences():
    layer = make_layer(n_experts=2, top_k=1, dim=3, ffn_dim=4, seed=7)
    rng = np.random.default_rng(8)
    x = rng.standard_normal((4, 3))
    params = [layer.w1[0], layer.w2[0]]

    def loss():
        out = layer.expert_forward(0, constant(x))
        return (out * out).sum()

    root = loss()
    for p in params:
        p.grad = None
    root.backward()
    analytic = [p.grad for p in params]
    numeric = finite_diff_gradient(loss, params)
    assert gradient_max_rel_error(analytic, numeric) < 1e-4


# -- combination -------------------------------------------------------------------------


def test_single_expert_single_k_is_scaled_dense_ffn():
    layer = make_layer(n_experts=1, top_k=1, dim=4, ffn_dim=5, seed=9)
    x = constant(np.random.default_rng(10).standard_normal((6, 4)))
    routing = layer.route(x)
    # One expert: pre-top-k probability is exactly 1.
    np.testing.assert_allclose(routing.weights.value, np.ones((6, 1)))
    y = layer.forward(x, routing)
    expected = layer.expert_forward(0, x).value
    np.testing.assert_array_equal(y.value, expected)


def test_identical_experts_make_weights_irrelevant():
    layer = make_layer(n_experts=2, top_k=2, dim=4, ffn_dim=5, seed=11)
    layer.w1[1].value = layer.w1[0].value.copy()
    layer.w2[1].value = layer.w2[0].value.copy()
    x = constant(np.random.default_rng(12).standard_normal((5, 4)))
    routing = layer.route(x)
    y = layer.forward(x, routing)
    expected = layer.expert_forward(0, x).value
    np.testing.assert_allclose(y.value, expected, atol=1e-12)


def test_sparse_equals_masked_dense_bitwise():
    rng = np.random.default_rng(13)
    for seed in range(5):
        layer = make_layer(n_experts=4, top_k=2, dim=5, ffn_dim=6, seed=20 + seed)
        x = constant(rng.standard_normal((9, 5)))
        routing = layer.route(x)
        y = layer.forward(x, routing)
        dense = np.zeros((9, 5))
        for e in range(4):
            dense += routing.weights.value[:, [e]] * layer.expert_forward(e, x).value
        np.testing.assert_array_equal(y.value, dense)


def test_permutation_equivariance():
    rng = np.random.default_rng(14)
    layer = make_layer(n_experts=5, top_k=2, dim=4, ffn_dim=6, seed=15)
    x_arr = rng.standard_normal((12, 4))
    x = constant(x_arr)
    routing = layer.route(x)
    y = layer.forward(x, routing).value

    perm = rng.permutation(5)
    permuted = make_layer(n_experts=5, top_k=2, dim=4, ffn_dim=6, seed=15)
    permuted.w_router.value = layer.w_router.value[perm]
    permuted.w1 = [layer.w1[e] for e in perm]
    permuted.w2 = [layer.w2[e] for e in perm]
    routing_p = permuted.route(x)
    y_p = permuted.forward(x, routing_p).value

    # Expert i of the permuted layer is original expert perm[i].
    np.testing.assert_array_equal(
        np.sort(perm[routing_p.selections], axis=1), routing.selections
    )
    np.testing.assert_allclose(y_p, y, atol=1e-12)


def test_unselected_experts_receive_no_gradient():
    layer = make_layer(n_experts=4, top_k=1, dim=3, ffn_dim=4, seed=16)
    routing, x = route_with_logits(
        layer, [[5.0, 0.0, 0.0, 0.0], [5.0, 0.0, 0.0, 0.0]]
    )
    y = layer.forward(constant(x), routing)
    (y * y).sum().backward()
    assert layer.w1[0].grad is not None
    for e in (1, 2, 3):
        assert layer.w1[e].grad is None
        assert layer.w2[e].grad is None
