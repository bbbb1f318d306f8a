import itertools
import math

import numpy as np
import pytest

from lgmsnet import nn
from lgmsnet.autograd import backward
from lgmsnet.nn import AttentionSpec, ConvSpec, NormSpec
from lgmsnet.tensor import ShapeError, Tensor


def naive_conv(x, w, b, groups):
    """Six nested loops, zero padding, stride 1."""
    n, c, h, wd = x.shape
    o, cg, k, _ = w.shape
    p = k // 2
    og = o // groups
    out = np.zeros((n, o, h, wd))
    for bi in range(n):
        for oc in range(o):
            g = oc // og
            for i in range(h):
                for j in range(wd):
                    s = 0.0 if b is None else b[oc]
                    for ic in range(cg):
                        for di in range(k):
                            for dj in range(k):
                                ii, jj = i + di - p, j + dj - p
                                if 0 <= ii < h and 0 <= jj < wd:
                                    s += x[bi, g * cg + ic, ii, jj] * w[oc, ic, di, dj]
                    out[bi, oc, i, j] = s
    return out


def conv(x, w, b=None, groups=1):
    spec = ConvSpec(x.shape[1], w.shape[0], w.shape[-1], groups=groups, has_bias=b is not None)
    return nn.conv2d(Tensor(x), spec, Tensor(w), None if b is None else Tensor(b)).data


# -- conv2d


def test_conv_all_ones_3x3():
    out = conv(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)))
    np.testing.assert_array_equal(out[0, 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


def test_conv_pointwise_identity():
    x = np.random.default_rng(0).normal(size=(2, 1, 4, 5))
    np.testing.assert_array_equal(conv(x, np.ones((1, 1, 1, 1)), np.zeros(1)), x)


def test_depthwise_delta_kernel_is_identity():
    x = np.random.default_rng(1).normal(size=(1, 2, 5, 5))
    w = np.zeros((2, 1, 3, 3))
    w[:, 0, 1, 1] = 1
    np.testing.assert_array_equal(conv(x, w, groups=2), x)


@pytest.mark.parametrize("seed", range(12))
def test_conv_matches_naive_oracle(seed):
    g = np.random.default_rng(seed)
    groups = int(g.choice([1, 2, 3]))
    cg, og = int(g.integers(1, 3)), int(g.integers(1, 3))
    k = int(g.choice([1, 3, 5]))
    x = g.normal(size=(int(g.integers(1, 3)), groups * cg, int(g.integers(1, 7)), int(g.integers(1, 7))))
    w = g.normal(size=(groups * og, cg, k, k))
    b = g.normal(size=groups * og) if seed % 2 else None
    ref = naive_conv(x, w, b, groups)
    np.testing.assert_allclose(conv(x, w, b, groups), ref, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("k,groups", [(3, 1), (5, 1), (3, 2)])
def test_conv_on_large_map_matches_naive_oracle(k, groups):
    # big enough to take the flat-offset path instead of im2col
    g = np.random.default_rng(k)
    x, w, b = g.normal(size=(1, 8 * groups, 32, 33)), g.normal(size=(2 * groups, 8, k, k)), g.normal(size=2 * groups)
    assert 32 * 33 >= nn._FLAT_MIN_HW and 8 >= nn._FLAT_MIN_C
    np.testing.assert_allclose(conv(x, w, b, groups), naive_conv(x, w, b, groups), rtol=1e-10, atol=1e-11)


def test_large_map_conv_gradients_agree_with_im2col_path(monkeypatch):
    g = np.random.default_rng(5)
    x0, w0, up = g.normal(size=(2, 8, 32, 32)), g.normal(size=(8, 8, 3, 3)), g.normal(size=(2, 8, 32, 32))

    def grads():
        x, w = Tensor(x0, requires_grad=True), Tensor(w0, requires_grad=True)
        out = nn.conv2d(x, ConvSpec(8, 8, 3, has_bias=False), w)
        gr = backward((out * Tensor(up)).sum(), [x, w])
        return out.data, gr[x].data, gr[w].data

    flat = grads()
    monkeypatch.setattr(nn, "_FLAT_MIN_HW", 10**9)
    for a, b in zip(flat, grads()):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-10)


def test_depthwise_weight_grad_matches_one_hot_oracle():
    # conv is linear in w, so each weight gradient is a one-hot conv dotted with the upstream grad
    g = np.random.default_rng(11)
    x0, w0, up = g.normal(size=(2, 3, 6, 9)), g.normal(size=(3, 1, 7, 7)), g.normal(size=(2, 3, 6, 9))
    x, w = Tensor(x0), Tensor(w0, requires_grad=True)
    gw = backward((nn.conv2d(x, ConvSpec(3, 3, 7, groups=3, has_bias=False), w) * Tensor(up)).sum(), [w])[w].data
    ref = np.zeros_like(w0)
    for idx in np.ndindex(*w0.shape):
        e = np.zeros_like(w0)
        e[idx] = 1
        ref[idx] = (naive_conv(x0, e, None, 3) * up).sum()
    np.testing.assert_allclose(gw, ref, rtol=1e-10, atol=1e-10)


def test_depthwise_equals_independent_single_channel_convs():
    g = np.random.default_rng(3)
    x, w = g.normal(size=(2, 4, 6, 6)), g.normal(size=(4, 1, 5, 5))
    whole = conv(x, w, groups=4)
    for c in range(4):
        np.testing.assert_array_equal(whole[:, c : c + 1], conv(x[:, c : c + 1], w[c : c + 1]))


@pytest.mark.parametrize("k", [1, 3, 5, 7, 9])
def test_conv_preserves_extent(k):
    out = conv(np.zeros((1, 2, 7, 5)), np.zeros((3, 2, k, k)))
    assert out.shape == (1, 3, 7, 5)


def test_conv_float32_output_dtype():
    x = np.ones((1, 2, 4, 4), np.float32)
    assert conv(x, np.ones((2, 2, 3, 3), np.float32)).dtype == np.float32


def test_convspec_rejects_even_kernel_and_bad_groups():
    with pytest.raises(ValueError):
        ConvSpec(2, 2, 4)
    with pytest.raises(ValueError):
        ConvSpec(3, 4, 3, groups=2)
    assert ConvSpec(4, 8, 5, groups=2).weight_shape == (8, 2, 5, 5)
    assert ConvSpec(4, 8, 5).padding == 2


def test_conv_channel_mismatch():
    with pytest.raises((ShapeError, ValueError)):
        nn.conv2d(Tensor(np.zeros((1, 3, 4, 4))), ConvSpec(2, 2, 3), Tensor(np.zeros((2, 2, 3, 3))))


# -- pooling and resampling


def test_maxpool_direct():
    assert nn.maxpool2x2(Tensor(np.array([[[[1.0, 2], [3, 4]]]]))).data.item() == 4


def test_maxpool_constant():
    np.testing.assert_array_equal(nn.maxpool2x2(Tensor(np.full((1, 2, 4, 6), 7.0))).data, 7.0)


def test_maxpool_matches_window_oracle():
    x = np.random.default_rng(5).normal(size=(2, 3, 4, 4))
    out = nn.maxpool2x2(Tensor(x)).data
    for n, c, i, j in itertools.product(range(2), range(3), range(2), range(2)):
        assert out[n, c, i, j] == x[n, c, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max()
    assert out.max() <= x.max()


def test_maxpool_odd_extent():
    with pytest.raises(ShapeError):
        nn.maxpool2x2(Tensor(np.zeros((1, 1, 3, 4))))


def test_upsample_constant_and_single_pixel():
    np.testing.assert_allclose(nn.upsample_bilinear_2x(Tensor(np.full((1, 2, 3, 4), 2.5))).data, 2.5)
    np.testing.assert_array_equal(nn.upsample_bilinear_2x(Tensor(np.full((1, 1, 1, 1), 5.0))).data, 5.0)


def test_upsample_half_pixel_values():
    out = nn.upsample_bilinear_2x(Tensor(np.array([[[[0.0, 1.0]]]]))).data
    np.testing.assert_allclose(out[0, 0, 0], [0, 0.25, 0.75, 1])
    assert out.shape == (1, 1, 2, 4)


def test_interp_matrix_rows_sum_to_one():
    m = nn.interp_matrix(5, 13)
    np.testing.assert_allclose(m.sum(axis=1), 1.0)


# -- normalization


def test_group_norm_constant_group_gives_shift():
    x = Tensor(np.full((1, 4, 3, 3), 3.0))
    shift = Tensor(np.array([1.0, 2.0, 3.0, 4.0]))
    out = nn.group_norm(x, 2, Tensor(np.ones(4)), shift).data
    np.testing.assert_allclose(out, np.broadcast_to(shift.data[None, :, None, None], x.shape))


def test_group_norm_single_group_layer_style():
    x = np.random.default_rng(6).normal(3.0, 2.0, size=(2, 4, 5, 5))
    out = nn.group_norm(Tensor(x), 1, Tensor(np.ones(4)), Tensor(np.zeros(4))).data
    assert np.abs(out.reshape(2, -1).mean(axis=1)).max() < 1e-6


def test_group_norm_statistics_per_group():
    x = np.random.default_rng(7).normal(1.0, 3.0, size=(3, 8, 4, 4))
    out = nn.group_norm(Tensor(x), 4).data.reshape(3, 4, -1)
    assert np.abs(out.mean(-1)).max() < 1e-5
    assert np.abs(out.var(-1) - 1).max() < 1e-3


def test_group_norm_divisibility():
    with pytest.raises(ValueError):
        nn.group_norm(Tensor(np.zeros((1, 6, 2, 2))), 4)


def test_batch_norm_inference_identity():
    x = np.random.default_rng(8).normal(size=(2, 3, 4, 4))
    out = nn.batch_norm(Tensor(x), running_mean=np.zeros(3), running_var=np.ones(3), training=False).data
    np.testing.assert_allclose(out, x / math.sqrt(1 + 1e-5), rtol=1e-12)


def test_batch_norm_running_stats_training_only():
    x = np.random.default_rng(9).normal(2.0, 1.0, size=(4, 2, 3, 3))
    rm, rv = np.zeros(2), np.ones(2)
    nn.batch_norm(Tensor(x), running_mean=rm, running_var=rv, training=True)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))
    before = rm.copy()
    nn.batch_norm(Tensor(x), running_mean=rm, running_var=rv, training=False)
    np.testing.assert_array_equal(rm, before)


def test_layer_norm_last_axis():
    x = np.random.default_rng(10).normal(size=(2, 3, 6))
    out = nn.layer_norm(Tensor(x)).data
    assert np.abs(out.mean(-1)).max() < 1e-9


def test_normspec_validation():
    with pytest.raises(ValueError):
        NormSpec("group", num_groups=0)
    with pytest.raises(ValueError):
        NormSpec("batch", epsilon=0.0)
    with pytest.raises(ValueError):
        NormSpec("instance")


# -- activations


def test_silu_values():
    out = nn.silu(Tensor(np.array([0.0, 1.0, -20.0]))).data
    assert out[0] == 0
    assert abs(out[1] - 0.7310585786300049) < 1e-12
    assert abs(out[2] - (-20.0 / (1 + math.exp(20.0)))) < 1e-20
    assert np.all(np.isfinite(nn.silu(Tensor(np.array([-1e4, 1e4]))).data))


def test_sigmoid_saturates_without_overflow():
    out = nn.sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0]))).data
    np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])


def test_softmax_examples():
    np.testing.assert_allclose(nn.softmax(Tensor(np.array([0.0, 0.0]))).data, [0.5, 0.5])
    big = nn.softmax(Tensor(np.array([1000.0, 0.0]))).data
    assert np.all(np.isfinite(big)) and big[0] == 1.0 and big[1] < 1e-300
    e = [math.exp(v) for v in (1, 2, 3)]
    np.testing.assert_allclose(nn.softmax(Tensor(np.array([1.0, 2.0, 3.0]))).data, [v / sum(e) for v in e], atol=1e-7)


def test_softmax_rows_sum_to_one():
    x = np.random.default_rng(11).normal(0, 10, size=(4, 7)).astype(np.float32)
    assert np.abs(nn.softmax(Tensor(x), -1).data.sum(-1) - 1).max() < 1e-6


# -- patches


def test_unfold_shapes():
    assert nn.unfold_patches(Tensor(np.zeros((1, 4, 8, 8))), 2).shape == (1, 16, 16)
    assert nn.unfold_patches(Tensor(np.zeros((2, 3, 4, 6))), 1).shape == (2, 24, 3)


def test_unfold_token_order():
    x = np.arange(2 * 4 * 4, dtype=float).reshape(1, 2, 4, 4)
    tok = nn.unfold_patches(Tensor(x), 2).data
    # token 1 is the top row's second patch; elements ordered (channel, row, col)
    expect = [x[0, c, r, 2 + q] for c in range(2) for r in range(2) for q in range(2)]
    np.testing.assert_array_equal(tok[0, 1], expect)


def test_unfold_fold_bijection_sweep():
    g = np.random.default_rng(12)
    for c, h, w, p in itertools.product(range(1, 5), (2, 4, 8), (2, 4, 8), (1, 2, 4)):
        if h % p or w % p:
            continue
        x = g.normal(size=(1, c, h, w))
        back = nn.fold_patches(nn.unfold_patches(Tensor(x), p), p, c, (h, w)).data
        assert back.tobytes() == x.tobytes()


def test_unfold_divisibility():
    with pytest.raises(ShapeError):
        nn.unfold_patches(Tensor(np.zeros((1, 1, 6, 4))), 4)


# -- attention


def attn_params(spec, gen, scale=0.5):
    return {n: Tensor(gen.normal(0, scale, size=s)) for n, s, _ in nn.mhsa_param_shapes(spec)}


def test_single_token_attention_is_value_projection():
    spec = AttentionSpec(embed_dim=4, num_heads=2, depth=1)
    p = attn_params(spec, np.random.default_rng(13))
    t = np.random.default_rng(14).normal(size=(1, 1, 4))
    out = nn.attention(Tensor(t), spec, p, "layer0.").data
    wqkv, bqkv = p["layer0.qkv.weight"].data, p["layer0.qkv.bias"].data
    v = t[0, 0] @ wqkv[:, 8:] + bqkv[8:]
    expect = v @ p["layer0.proj.weight"].data + p["layer0.proj.bias"].data
    np.testing.assert_allclose(out[0, 0], expect, rtol=1e-12)


def test_zero_qk_gives_token_mean():
    spec = AttentionSpec(embed_dim=4, num_heads=2, depth=1)
    p = attn_params(spec, np.random.default_rng(15))
    p["layer0.qkv.weight"].data[:, :8] = 0
    p["layer0.qkv.bias"].data[:8] = 0
    t = np.random.default_rng(16).normal(size=(1, 5, 4))
    out = nn.attention(Tensor(t), spec, p, "layer0.").data
    v = t[0] @ p["layer0.qkv.weight"].data[:, 8:] + p["layer0.qkv.bias"].data[8:]
    expect = v.mean(0) @ p["layer0.proj.weight"].data + p["layer0.proj.bias"].data
    np.testing.assert_allclose(out[0], np.tile(expect, (5, 1)), rtol=1e-12)


def _scalar_attention(tokens, wq, wk, wv, wo, heads):
    """Loop-by-loop multi-head attention for tiny inputs (no biases)."""
    t, d = len(tokens), len(tokens[0])
    dh = d // heads
    proj = lambda w, x: [sum(x[i] * w[i][j] for i in range(d)) for j in range(d)]  # noqa: E731
    q = [proj(wq, x) for x in tokens]
    k = [proj(wk, x) for x in tokens]
    v = [proj(wv, x) for x in tokens]
    mixed = [[0.0] * d for _ in range(t)]
    for h in range(heads):
        cols = range(h * dh, (h + 1) * dh)
        for a in range(t):
            scores = [sum(q[a][c] * k[b][c] for c in cols) / math.sqrt(dh) for b in range(t)]
            top = max(scores)
            e = [math.exp(s - top) for s in scores]
            for c in cols:
                mixed[a][c] = sum(e[b] * v[b][c] for b in range(t)) / sum(e)
    return [proj(wo, m) for m in mixed]


@pytest.mark.parametrize("heads", [1, 2])
def test_attention_matches_scalar_oracle(heads):
    spec = AttentionSpec(embed_dim=2, num_heads=heads, depth=1)
    tokens = [[0.3, -1.2], [0.8, 0.5]]
    wq, wk, wv, wo = [[0.5, -0.3], [0.2, 0.9]], [[-0.7, 0.4], [0.6, 0.1]], [[1.0, 0.5], [-0.5, 0.25]], [[0.3, -0.6], [0.8, 0.2]]
    params = {
        "layer0.qkv.weight": Tensor(np.hstack([wq, wk, wv])),
        "layer0.qkv.bias": Tensor(np.zeros(6)),
        "layer0.proj.weight": Tensor(np.array(wo)),
        "layer0.proj.bias": Tensor(np.zeros(2)),
    }
    out = nn.attention(Tensor(np.array([tokens])), spec, params, "layer0.").data[0]
    np.testing.assert_allclose(out, _scalar_attention(tokens, wq, wk, wv, wo, heads), atol=1e-12)


def test_mhsa_block_permutation_equivariant():
    spec = AttentionSpec(embed_dim=8, num_heads=4, depth=2)
    p = attn_params(spec, np.random.default_rng(17))
    x = np.random.default_rng(18).normal(size=(2, 6, 8))
    perm = np.random.default_rng(19).permutation(6)
    a = nn.mhsa_block(Tensor(x), spec, p).data
    b = nn.mhsa_block(Tensor(x[:, perm]), spec, p).data
    np.testing.assert_allclose(b, a[:, perm], rtol=1e-10, atol=1e-12)


def test_mhsa_block_preserves_shape_and_checks_dim():
    spec = AttentionSpec(embed_dim=8, num_heads=2, depth=2, mlp_ratio=2.0)
    p = attn_params(spec, np.random.default_rng(20))
    assert nn.mhsa_block(Tensor(np.zeros((1, 3, 8))), spec, p).shape == (1, 3, 8)
    with pytest.raises(ShapeError):
        nn.mhsa_block(Tensor(np.zeros((1, 3, 6))), spec, p)


def test_attention_head_divisibility():
    with pytest.raises(ValueError):
        AttentionSpec(embed_dim=6, num_heads=4).check()
