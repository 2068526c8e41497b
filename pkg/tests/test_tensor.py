import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hsicnn import tensor
from hsicnn.errors import NonFiniteError

import oracles


@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.mark.parametrize("size,pad", [(1, 0), (3, 0), (3, 1), (5, 2), (5, 0)])
def test_conv_matches_loop(rng, size, pad):
    x = rng.normal(size=(7, 6, 3))
    w = rng.normal(size=(4, size, size, 3))
    b = rng.normal(size=4)
    got = tensor.conv2d_forward(x, w, b, pad)
    np.testing.assert_allclose(got, oracles.conv_loop(x, w, b, pad), rtol=1e-12, atol=1e-12)


def test_conv_batch_equals_per_item(rng):
    x = rng.normal(size=(3, 6, 5, 2))
    w = rng.normal(size=(4, 3, 3, 2))
    b = rng.normal(size=4)
    batched = tensor.conv2d_forward(x, w, b, 1)
    for i in range(3):
        np.testing.assert_array_equal(batched[i], tensor.conv2d_forward(x[i], w, b, 1))


def test_conv_shapes_with_padding(rng):
    # s x s conv over a cube padded by 2 gives (H + 4 - s + 1) per side
    h, w = 9, 11
    x = tensor.pad_spatial(rng.normal(size=(h, w, 2)), 2)
    for s, expect in ((1, (h + 4, w + 4)), (3, (h + 2, w + 2)), (5, (h, w))):
        out = tensor.conv2d_forward(x, rng.normal(size=(3, s, s, 2)), np.zeros(3))
        assert out.shape == expect + (3,)


def test_conv_blocked_path_equals_single_block(rng, monkeypatch):
    x = rng.normal(size=(2, 12, 10, 3))
    w = rng.normal(size=(5, 3, 3, 3))
    b = rng.normal(size=5)
    whole = tensor.conv2d_forward(x, w, b, 1)
    monkeypatch.setattr(tensor, "_BLOCK_ELEMENTS", 64)
    np.testing.assert_allclose(tensor.conv2d_forward(x, w, b, 1), whole, rtol=1e-12, atol=1e-13)


def test_conv_rejects_bad_shapes(rng):
    with pytest.raises(ValueError):
        tensor.conv2d_forward(rng.normal(size=(4, 4, 3)), rng.normal(size=(2, 3, 3, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        tensor.conv2d_forward(rng.normal(size=(4, 4, 3)), rng.normal(size=(2, 2, 2, 3)), np.zeros(2))
    with pytest.raises(ValueError):
        tensor.conv2d_forward(rng.normal(size=(2, 2, 3)), rng.normal(size=(2, 5, 5, 3)), np.zeros(2))
    with pytest.raises(ValueError):
        tensor.conv2d_forward(rng.normal(size=(4, 4)), rng.normal(size=(2, 1, 1, 4)), np.zeros(2))


def test_conv_nonfinite_raises(rng):
    x = rng.normal(size=(4, 4, 2))
    x[1, 1, 0] = np.nan
    with pytest.raises(NonFiniteError):
        tensor.conv2d_forward(x, rng.normal(size=(2, 1, 1, 2)), np.zeros(2))


@pytest.mark.parametrize("size,pad", [(1, 0), (3, 1), (5, 2), (3, 0)])
def test_conv_backward_finite_differences(rng, size, pad):
    x = rng.normal(size=(5, 4, 2))
    w = rng.normal(size=(3, size, size, 2))
    b = rng.normal(size=3)
    out_shape = tensor.conv2d_forward(x, w, b, pad).shape
    r = rng.normal(size=out_shape)

    def loss():
        return float(np.sum(tensor.conv2d_forward(x, w, b, pad) * r))

    # the loss is linear in each argument, so a large step has no truncation error
    gx, gw, gb = tensor.conv2d_backward(x, w, r, pad)
    assert oracles.rel_error(gx, oracles.numeric_grad(loss, x, eps=1e-3)) < 1e-7
    assert oracles.rel_error(gw, oracles.numeric_grad(loss, w, eps=1e-3)) < 1e-7
    assert oracles.rel_error(gb, oracles.numeric_grad(loss, b, eps=1e-3)) < 1e-7


def test_maxpool_matches_loop(rng):
    x = rng.normal(size=(6, 7, 3))
    for window in (1, 2, 3, 5):
        out, index = tensor.maxpool2d_forward(x, window)
        ref, where = oracles.maxpool_loop(x, window)
        np.testing.assert_array_equal(out, ref)
        np.testing.assert_array_equal(index.flat, where[..., 0] * 7 + where[..., 1])


def test_maxpool_ties_pick_first_cell():
    x = np.zeros((3, 3, 1))
    out, index = tensor.maxpool2d_forward(x, 3)
    assert out.shape == (1, 1, 1)
    assert index.flat[0, 0, 0] == 0


def test_maxpool_backward_routes_and_accumulates(rng):
    x = rng.normal(size=(5, 5, 2))
    out, index = tensor.maxpool2d_forward(x, 3)
    g = rng.normal(size=out.shape)
    gx = tensor.maxpool2d_backward(g, index)
    _, where = oracles.maxpool_loop(x, 3)
    ref = np.zeros_like(x)
    for y in range(3):
        for xx in range(3):
            for c in range(2):
                ref[where[y, xx, c, 0], where[y, xx, c, 1], c] += g[y, xx, c]
    np.testing.assert_allclose(gx, ref, rtol=0, atol=1e-15)
    assert np.isclose(gx.sum(), g.sum())


def test_maxpool_backward_batched(rng):
    x = rng.normal(size=(2, 4, 4, 3))
    out, index = tensor.maxpool2d_forward(x, 2)
    g = rng.normal(size=out.shape)
    gx = tensor.maxpool2d_backward(g, index)
    for i in range(2):
        o, idx = tensor.maxpool2d_forward(x[i], 2)
        np.testing.assert_allclose(gx[i], tensor.maxpool2d_backward(g[i], idx))


def test_maxpool_rejects_oversized_window(rng):
    with pytest.raises(ValueError):
        tensor.maxpool2d_forward(rng.normal(size=(2, 2, 1)), 3)


def test_maxpool_backward_shape_mismatch(rng):
    out, index = tensor.maxpool2d_forward(rng.normal(size=(4, 4, 2)), 2)
    with pytest.raises(ValueError):
        tensor.maxpool2d_backward(np.zeros((2, 2, 2)), index)


def test_concat_and_split_round_trip(rng):
    parts = [rng.normal(size=(3, 2, c)) for c in (1, 4, 2)]
    joined = tensor.concat_channels(parts)
    assert joined.shape == (3, 2, 7)
    for a, b in zip(tensor.split_channels(joined, [1, 4, 2]), parts):
        np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        tensor.concat_channels([np.zeros((2, 2, 1)), np.zeros((3, 2, 1))])
    with pytest.raises(ValueError):
        tensor.split_channels(joined, [3, 3])


def test_pad_spatial():
    x = np.ones((2, 3, 1))
    p = tensor.pad_spatial(x, 2)
    assert p.shape == (6, 7, 1)
    assert p.sum() == 6 and p[2:4, 2:5].all()


@settings(max_examples=25, deadline=None)
@given(h=st.integers(1, 6), w=st.integers(1, 6), c=st.integers(1, 4), k=st.integers(1, 4), seed=st.integers(0, 2**16))
def test_one_by_one_conv_is_a_matrix_product(h, w, c, k, seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(h, w, c))
    wt = r.normal(size=(k, 1, 1, c))
    b = r.normal(size=k)
    np.testing.assert_allclose(tensor.conv2d_forward(x, wt, b), x @ wt[:, 0, 0, :].T + b, rtol=1e-12, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(h=st.integers(3, 7), w=st.integers(3, 7), seed=st.integers(0, 2**16), a=st.floats(-3, 3))
def test_conv_is_linear_in_the_input(h, w, seed, a):
    r = np.random.default_rng(seed)
    x1, x2 = r.normal(size=(2, h, w, 2))
    wt = r.normal(size=(3, 3, 3, 2))
    zero = np.zeros(3)
    lhs = tensor.conv2d_forward(a * x1 + x2, wt, zero, 1)
    rhs = a * tensor.conv2d_forward(x1, wt, zero, 1) + tensor.conv2d_forward(x2, wt, zero, 1)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(h=st.integers(1, 6), w=st.integers(1, 6), window=st.integers(1, 4), seed=st.integers(0, 2**16))
def test_maxpool_output_dominates_its_window(h, w, window, seed):
    if window > min(h, w):
        return
    x = np.random.default_rng(seed).normal(size=(h, w, 2))
    out, _ = tensor.maxpool2d_forward(x, window)
    assert out.shape == (h - window + 1, w - window + 1, 2)
    for y in range(out.shape[0]):
        for xx in range(out.shape[1]):
            np.testing.assert_array_equal(out[y, xx], x[y:y + window, xx:xx + window].max(axis=(0, 1)))
