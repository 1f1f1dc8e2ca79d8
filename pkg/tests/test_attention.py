import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tsubf import ops
from tsubf.attention import FourHeadAttention, TSPBlock, channel_head, spatial_head, tsp_forward
from tsubf.gradcheck import BLOCK_TOL, check_tsp
from tsubf.tensor import ConfigError, ShapeError, Tensor


def softmax_rows(s):
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def spatial_loop(q, k, v, axis):
    """Slices along ``axis`` as tokens, scored and mixed one pair at a time."""
    n = q.shape[axis]
    d = q.size // n
    a = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            a[i, j] = np.sum(np.take(q, i, axis) * np.take(k, j, axis)) / math.sqrt(d)
    a = softmax_rows(a)
    out = np.zeros_like(v)
    for i in range(n):
        idx = [slice(None)] * 4
        idx[axis] = i
        out[tuple(idx)] = sum(a[i, j] * np.take(v, j, axis) for j in range(n))
    return out, a


def channel_loop(q, k, v):
    c = q.shape[-1]
    d = q[..., 0].size
    a = np.array([[np.sum(q[..., i] * k[..., j]) / math.sqrt(d) for j in range(c)] for i in range(c)])
    a = softmax_rows(a)
    out = np.stack([sum(a[i, j] * v[..., j] for j in range(c)) for i in range(c)], axis=-1)
    return out, a


@pytest.mark.parametrize("axis", [0, 1, 2])
def test_spatial_head_matches_loop(axis, rng):
    q, k, v = (rng.normal(size=(3, 2, 2, 4)) for _ in range(3))
    out, a = spatial_head(Tensor(q), Tensor(k), Tensor(v), axis, return_attention=True)
    ref, ref_a = spatial_loop(q, k, v, axis)
    np.testing.assert_allclose(out.data, ref, atol=1e-12)
    np.testing.assert_allclose(a.data, ref_a, atol=1e-12)


def test_channel_head_matches_loop(rng):
    q, k, v = (rng.normal(size=(2, 3, 2, 4)) for _ in range(3))
    out, a = channel_head(Tensor(q), Tensor(k), Tensor(v), return_attention=True)
    ref, ref_a = channel_loop(q, k, v)
    np.testing.assert_allclose(out.data, ref, atol=1e-12)
    np.testing.assert_allclose(a.data, ref_a, atol=1e-12)


def test_single_layer_and_single_channel_pass_values_through(rng):
    q, k, v = (Tensor(rng.normal(size=(1, 3, 2, 4))) for _ in range(3))
    out, a = spatial_head(q, k, v, "height", return_attention=True)
    assert a.data.tolist() == [[1.0]]
    np.testing.assert_array_equal(out.data, v.data)
    q1, k1, v1 = (Tensor(rng.normal(size=(2, 2, 2, 1))) for _ in range(3))
    out, a = channel_head(q1, k1, v1, return_attention=True)
    assert a.data.tolist() == [[1.0]]
    np.testing.assert_array_equal(out.data, v1.data)


def test_identical_layers_give_uniform_attention(rng):
    row = rng.normal(size=(1, 2, 2, 4))
    q = Tensor(np.repeat(row, 5, axis=0))
    v = rng.normal(size=(5, 2, 2, 4))
    out, a = spatial_head(q, q, Tensor(v), 0, return_attention=True)
    np.testing.assert_allclose(a.data, np.full((5, 5), 0.2), atol=1e-15)
    np.testing.assert_allclose(out.data, np.broadcast_to(v.mean(axis=0), v.shape), atol=1e-12)


@given(st.permutations(range(4)))
def test_height_head_equivariant_to_width_permutation(perm):
    rng = np.random.default_rng(0)
    q, k, v = (rng.normal(size=(3, 4, 2, 4)) for _ in range(3))
    out, a = spatial_head(Tensor(q), Tensor(k), Tensor(v), 0, return_attention=True)
    p = lambda t: t[:, list(perm)]  # noqa: E731
    out_p, a_p = spatial_head(Tensor(p(q)), Tensor(p(k)), Tensor(p(v)), 0, return_attention=True)
    np.testing.assert_allclose(a_p.data, a.data, atol=1e-12)
    np.testing.assert_allclose(out_p.data, p(out.data), atol=1e-12)


@given(st.integers(0, 2**31 - 1))
def test_channel_head_equivariant_to_voxel_permutation(seed):
    rng = np.random.default_rng(seed)
    shape = (2, 3, 2, 4)
    q, k, v = (rng.normal(size=shape) for _ in range(3))
    perm = rng.permutation(12)
    p = lambda t: t.reshape(12, 4)[perm].reshape(shape)  # noqa: E731
    out, a = channel_head(Tensor(q), Tensor(k), Tensor(v), return_attention=True)
    out_p, a_p = channel_head(Tensor(p(q)), Tensor(p(k)), Tensor(p(v)), return_attention=True)
    np.testing.assert_allclose(a_p.data, a.data, atol=1e-12)
    np.testing.assert_allclose(out_p.data, p(out.data), atol=1e-12)


def test_head_shape_mismatch():
    with pytest.raises(ShapeError):
        spatial_head(Tensor(np.zeros((2, 2, 2, 4))), Tensor(np.zeros((2, 2, 2, 8))), Tensor(np.zeros((2, 2, 2, 4))), 0)


def test_tsp_intermediate_widths(rng):
    block = TSPBlock(16, rng, dtype=np.float64)
    out, parts = block(Tensor(rng.normal(size=(8, 8, 8, 16))), return_parts=True)
    assert parts.spatial.shape == (8, 8, 8, 12)
    assert parts.channel.shape == (8, 8, 8, 4)
    assert out.shape == (8, 8, 8, 16)
    assert set(parts.attention) == {"height", "width", "depth", "channel"}
    assert parts.attention["width"].shape == (8, 8)
    assert parts.attention["channel"].shape == (16, 16)


def test_tsp_zero_params_zero_output(rng):
    block = TSPBlock(8, rng, residual=False, dtype=np.float64)
    for p in block.parameters():
        p.data[...] = 0
    out = tsp_forward(block, Tensor(np.zeros((4, 4, 4, 8))))
    np.testing.assert_array_equal(out.data, 0)


def test_tsp_spatial_projections_shared(rng):
    block = TSPBlock(8, rng)
    names = [n for n, _ in block.named_parameters()]
    assert sum(n.startswith("attn.q_s.") for n in names) == 2  # one weight, one bias for all three heads
    assert not any("q_h" in n or "k_w" in n for n in names)


def test_width_not_divisible_by_four(rng):
    with pytest.raises(ConfigError):
        FourHeadAttention(6, rng)


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.sampled_from([4, 8]), st.integers(0, 1000))
def test_tsp_shape_and_row_stochastic(h, w, d, c, seed):
    rng = np.random.default_rng(seed)
    block = TSPBlock(c, rng, dtype=np.float64)
    x = Tensor(rng.normal(scale=3.0, size=(h, w, d, c)))
    out, parts = block(x, return_parts=True)
    assert out.shape == x.shape
    for a in parts.attention.values():
        assert np.all(a.data >= 0)
        np.testing.assert_allclose(a.data.sum(axis=1), 1.0, atol=1e-6)


def test_parallel_heads_match_serial(rng):
    serial = TSPBlock(8, np.random.default_rng(5), dtype=np.float64)
    parallel = TSPBlock(8, np.random.default_rng(5), dtype=np.float64, parallel=True)
    x = Tensor(rng.normal(size=(4, 4, 4, 8)))
    np.testing.assert_allclose(parallel(x).data, serial(x).data, atol=1e-6)


def test_tsp_flops_hand_count(rng):
    h, w, d, c = 2, 3, 4, 8
    v = h * w * d
    hand = 8 * v * c * c  # eight C x C projections
    hand += 2 * v * c * (h + w + d)  # scores and mixing, per spatial axis
    hand += 2 * c * c * v  # channel head
    hand += 4 * v * c * (c // 4)  # quarter reductions
    hand += v * c * c * 27 + v * c * c  # fusion convs
    assert TSPBlock(c, rng).flops((h, w, d, c)) == hand


def test_tsp_gradient_finite_differences():
    for r in check_tsp(seed=3):
        assert r.max_rel_error < BLOCK_TOL, r
