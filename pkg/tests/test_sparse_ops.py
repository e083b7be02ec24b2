import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from qsparse import tensor as T
from qsparse.sparse_ops import (
    Mode,
    SparsityConfig,
    SparsityConfigError,
    SparsityInputError,
    block_top_k_mask,
    keep_count,
    l2_rescale,
    post_activation_top_k,
    quantize_act,
    quantize_weight,
    sparse_linear,
    sparsify,
    top_k_mask,
)
from qsparse.tensor import Tensor


def brute_top_k(row, k):
    """Reference mask: stable sort by -|x| so ties resolve to the lowest index."""
    order = sorted(range(len(row)), key=lambda i: (-abs(row[i]), i))
    mask = np.zeros(len(row), dtype=bool)
    mask[order[:k]] = True
    return mask


def test_top_k_hand_example():
    np.testing.assert_array_equal(top_k_mask([[3.0, -1.0, 0.5, -2.0]], 0.5), [[1, 0, 0, 1]])


def test_top_k_full_keep_is_all_ones(rng):
    assert top_k_mask(rng.normal(size=(3, 7)), 1.0).all()


def test_top_k_tie_goes_to_lowest_index():
    np.testing.assert_array_equal(top_k_mask([[2.0, 2, 2, 2]], 0.25), [[1, 0, 0, 0]])


def test_top_k_rejects_non_finite():
    with pytest.raises(SparsityInputError):
        top_k_mask([[1.0, np.nan, 2.0]], 0.5)
    with pytest.raises(SparsityInputError):
        top_k_mask([[1.0, np.inf]], 0.5)


@pytest.mark.parametrize("k", [0.0, -0.1, 1.5])
def test_top_k_rejects_bad_fraction(k):
    with pytest.raises(SparsityConfigError):
        top_k_mask([[1.0, 2.0]], k)


def test_keep_count_is_ceil_without_float_drift():
    assert keep_count(0.7, 10) == 7
    assert keep_count(0.7, 64) == 45
    assert keep_count(0.25, 172) == 43
    assert keep_count(0.01, 8) == 1


def test_block_hand_example():
    row = [[5.0, 1, -3, 0, 2, 2, -1, 4]]
    np.testing.assert_array_equal(block_top_k_mask(row, 0.5, 4), [[1, 0, 1, 0, 1, 0, 0, 1]])


def test_block_zeros_keep_leading_indices():
    np.testing.assert_array_equal(
        block_top_k_mask(np.zeros((1, 8)), 0.5, 4), [[1, 1, 0, 0, 1, 1, 0, 0]]
    )


def test_block_full_keep(rng):
    assert block_top_k_mask(rng.normal(size=(2, 8)), 1.0, 4).all()


def test_block_divisibility_error():
    with pytest.raises(SparsityConfigError):
        block_top_k_mask(np.ones((1, 10)), 0.5, 4)
    cfg = SparsityConfig(mode="block_topk", keep_fraction=0.5, block_size_m=4)
    with pytest.raises(SparsityConfigError):
        sparsify(Tensor(np.ones((2, 10))), cfg)


def test_l2_rescale_examples():
    np.testing.assert_allclose(
        l2_rescale([[3.0, 4, 0, 0]], [[3.0, 4, 0, 12]]), [[7.8, 10.4, 0, 0]], rtol=1e-15
    )
    x = np.array([[1.0, -2.0, 3.0]])
    np.testing.assert_array_equal(l2_rescale(x, x), x)
    np.testing.assert_array_equal(l2_rescale(np.zeros((1, 3)), x), np.zeros((1, 3)))


def test_l2_rescale_shape_mismatch():
    with pytest.raises(T.DimensionError):
        l2_rescale(np.ones((2, 3)), np.ones((2, 4)))


def test_quantize_act_zero_row():
    q = quantize_act(np.zeros((2, 3)))
    assert not q.q_values.any()
    assert not q.gamma.any()


def test_quantize_act_hand_example():
    # 0.5 * 127 / (1 + 1e-6) = 63.49994, just under the half, so 63
    q = quantize_act([[0.5, -1.0, 0.25]])
    np.testing.assert_array_equal(q.q_values, [[63, -127, 32]])
    assert q.gamma[0, 0] == 1.0


def test_quantize_act_is_per_row():
    q = quantize_act([[1.0, 0.5], [100.0, 50.0]])
    np.testing.assert_array_equal(q.q_values, [[127, 63], [127, 63]])
    np.testing.assert_array_equal(q.gamma, [[1.0], [100.0]])


def test_quantize_weight_examples():
    tw = quantize_weight([0.3, -0.3, 0.0])
    assert tw.weight_scale == pytest.approx(0.2, abs=1e-15)
    np.testing.assert_array_equal(tw.t_values, [1, -1, 0])

    w = np.array([[0.7, -0.7], [-0.7, 0.7]])
    np.testing.assert_array_equal(quantize_weight(w).t_values, np.sign(w))

    z = quantize_weight(np.zeros((2, 2)))
    assert not z.t_values.any() and z.weight_scale == 0.0


def _grads(cfg, x, w, g):
    xt = Tensor(x.copy(), requires_grad=True)
    y = sparse_linear(xt, Tensor(w), cfg)
    y.backward(g)
    return xt.grad


def test_ste_gradient_is_g_times_w(rng):
    x, w, g = rng.normal(size=(4, 8)), rng.normal(size=(6, 8)), rng.normal(size=(4, 6))
    grad = _grads(SparsityConfig(mode="topk", keep_fraction=0.5), x, w, g)
    np.testing.assert_allclose(grad, g @ w, rtol=0, atol=1e-12)


def test_vanilla_gradient_is_masked_ste(rng):
    x, w, g = rng.normal(size=(4, 8)), rng.normal(size=(6, 8)), rng.normal(size=(4, 6))
    ste = _grads(SparsityConfig(mode="topk", keep_fraction=0.5), x, w, g)
    vanilla = _grads(SparsityConfig(mode="topk", keep_fraction=0.5, ste=False), x, w, g)
    mask = top_k_mask(x, 0.5)
    np.testing.assert_allclose(vanilla, ste * mask, rtol=0, atol=1e-12)
    assert not vanilla[~mask].any()


def test_dense_sparse_linear_matches_matmul(rng):
    x, w = rng.normal(size=(3, 5)), rng.normal(size=(4, 5))
    y = sparse_linear(Tensor(x), Tensor(w), SparsityConfig())
    np.testing.assert_allclose(y.data, x @ w.T, rtol=1e-14)


def test_topk_forward_applies_mask_and_rescale(rng):
    x, w = rng.normal(size=(3, 8)), rng.normal(size=(2, 8))
    kept = x * top_k_mask(x, 0.5)
    kept *= np.linalg.norm(x, axis=1, keepdims=True) / np.linalg.norm(kept, axis=1, keepdims=True)
    y = sparse_linear(Tensor(x), Tensor(w), SparsityConfig(mode="topk", keep_fraction=0.5))
    np.testing.assert_allclose(y.data, kept @ w.T, rtol=1e-13)

    plain = sparse_linear(
        Tensor(x), Tensor(w), SparsityConfig(mode="topk", keep_fraction=0.5, rescale=False)
    )
    np.testing.assert_allclose(plain.data, (x * top_k_mask(x, 0.5)) @ w.T, rtol=1e-13)


def test_quantized_forward_is_dequantized_product(rng):
    x, w = rng.normal(size=(3, 8)), rng.normal(size=(2, 8))
    mask = top_k_mask(x, 0.5)
    q = quantize_act(x)
    expected = (q.q_values * mask) @ w.T * (q.gamma / 127)
    y = sparse_linear(Tensor(x), Tensor(w), SparsityConfig(mode="quantized_topk", keep_fraction=0.5))
    np.testing.assert_allclose(y.data, expected, rtol=1e-12)

    tw = quantize_weight(w)
    expected_t = (q.q_values * mask) @ tw.t_values.T * (q.gamma / 127) * tw.weight_scale
    yt = sparse_linear(Tensor(x), Tensor(w), SparsityConfig(mode="ternary_topk", keep_fraction=0.5))
    np.testing.assert_allclose(yt.data, expected_t, rtol=1e-12)


def test_ternary_weight_gradient_is_straight_through(rng):
    x, w, g = rng.normal(size=(3, 8)), rng.normal(size=(2, 8)), rng.normal(size=(3, 2))
    wt = Tensor(w.copy(), requires_grad=True)
    cfg = SparsityConfig(mode="ternary_topk", keep_fraction=0.5)
    sparse_linear(Tensor(x), wt, cfg).backward(g)
    xq = quantize_act(x).dequantize() * top_k_mask(x, 0.5)
    np.testing.assert_allclose(wt.grad, g.T @ xq, rtol=1e-12)


def test_post_activation_top_k():
    h = Tensor(np.array([[0.7, -0.2, 1.4, 0.1]]), requires_grad=True)
    out = post_activation_top_k(h, 0.5)
    np.testing.assert_array_equal(out.data, [[0.7, 0.0, 1.4, 0.0]])
    out.backward(np.ones((1, 4)))
    np.testing.assert_array_equal(h.grad, np.ones((1, 4)))

    same = Tensor(np.array([[1.0, 2.0]]))
    assert post_activation_top_k(same, 1.0) is same
    np.testing.assert_array_equal(post_activation_top_k(Tensor(np.zeros((1, 4))), 0.5).data, 0)


def test_relu_mode_is_true_relu():
    x = Tensor(np.array([[-1.0, 2.0, 0.0, -3.0]]), requires_grad=True)
    out = sparsify(x, SparsityConfig(mode=Mode.RELU))
    np.testing.assert_array_equal(out.data, [[0, 2, 0, 0]])
    out.backward(np.ones((1, 4)))
    np.testing.assert_array_equal(x.grad, [[0, 1, 0, 0]])


finite_rows = hnp.arrays(
    np.float64,
    hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=24),
    elements=st.floats(-1e6, 1e6, allow_nan=False),
)
fractions = st.sampled_from([0.1, 0.25, 1 / 3, 0.5, 0.7, 0.9, 1.0])


@settings(max_examples=200, deadline=None)
@given(finite_rows, fractions)
def test_top_k_matches_brute_force(x, k):
    mask = top_k_mask(x, k)
    width = x.shape[1]
    assert (mask.sum(axis=1) == math.ceil(round(k * width, 9))).all()
    for row, got in zip(x, mask):
        np.testing.assert_array_equal(got, brute_top_k(list(row), keep_count(k, width)))


@settings(max_examples=100, deadline=None)
@given(finite_rows, fractions, st.floats(0.01, 100.0))
def test_top_k_scale_invariant(x, k, c):
    # distinct magnitudes keep ordering exact under scaling
    x = x + np.arange(x.shape[1]) * 1e-3
    np.testing.assert_array_equal(top_k_mask(x, k), top_k_mask(x * c, k))


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 20), fractions, st.integers(0, 2**32 - 1))
def test_top_k_permutation_equivariant(width, k, seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(3, width))  # continuous draws have no ties
    perm = r.permutation(width)
    np.testing.assert_array_equal(top_k_mask(x, k)[:, perm], top_k_mask(x[:, perm], k))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.sampled_from([2, 4, 8]), fractions, st.integers(0, 2**32 - 1))
def test_block_counts_per_block(n_blocks, m, k, seed):
    x = np.random.default_rng(seed).normal(size=(4, n_blocks * m))
    mask = block_top_k_mask(x, k, m).reshape(4, n_blocks, m)
    assert (mask.sum(axis=-1) == keep_count(k, m)).all()


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_vanilla_gradient_support(width, seed):
    r = np.random.default_rng(seed)
    x = Tensor(r.normal(size=(2, width)), requires_grad=True)
    cfg = SparsityConfig(mode="topk", keep_fraction=0.5, ste=False)
    out = sparsify(x, cfg)
    out.backward(r.normal(size=(2, width)))
    mask = top_k_mask(x.data, 0.5)
    assert not x.grad[~mask].any()


@settings(max_examples=100, deadline=None)
@given(finite_rows)
def test_quantizer_ranges(x):
    q = quantize_act(x).q_values
    assert q.min() >= -128 and q.max() <= 127
    t = quantize_weight(x).t_values
    assert set(np.unique(t)) <= {-1, 0, 1}
