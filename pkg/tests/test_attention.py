import math
from types import SimpleNamespace

import numpy as np
import pytest

from aiatrack import autograd as ag
from aiatrack.attention import (AttentionConfig, ConvBottleneck, InnerAttention, MultiHeadAttention,
                                attention_in_attention, conv_bottleneck_refine, conventional_attention,
                                correlation, grid_encoding, inner_attention, multi_head, sinusoidal_2d)
from aiatrack.autograd import Parameter, ShapeError, Tensor

import oracles


def _outer(rng, c):
    return SimpleNamespace(**{k: Parameter(rng.normal(size=(c, c))) for k in ("w_q", "w_k", "w_v", "w_o")})


def _randomize_inner(rng, inner: InnerAttention, scale=0.5):
    for _, p in inner.named_parameters():
        p.assign(p.data + rng.normal(scale=scale, size=p.shape))


def _inner_args(inner: InnerAttention, variant="v1", pos=None):
    vn = inner.value_norm
    return dict(reduce=inner.reduce, gain=inner.norm.gain, bias=inner.norm.bias, w_q=inner.w_q, w_k=inner.w_k,
                w_o=inner.w_o, value_gain=None if vn is None else vn.gain,
                value_bias=None if vn is None else vn.bias, w_v=inner.w_v, variant=variant,
                pos=None if pos is None else pos.tolist())


# --- correlation / conventional attention ------------------------------------------

def test_correlation_orthogonal_rows_identity_weights():
    c = 3
    eye = Tensor(np.eye(c))
    m = correlation(Tensor(np.eye(c)), Tensor(np.eye(c)), eye, eye)
    np.testing.assert_allclose(m.data, np.eye(c) / math.sqrt(c))


def test_correlation_scalar_case():
    m = correlation(Tensor([[2.0]]), Tensor([[3.5]]), Tensor([[1.0]]), Tensor([[1.0]]))
    assert m.data[0, 0] == 7.0


def test_correlation_matches_loop_oracle():
    rng = np.random.default_rng(0)
    q, k = rng.normal(size=(3, 2)), rng.normal(size=(4, 2))
    wq, wk = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
    got = correlation(Tensor(q), Tensor(k), Tensor(wq), Tensor(wk)).data
    assert got.shape == (3, 4)
    np.testing.assert_allclose(got, oracles.correlation(q, k, wq, wk), atol=1e-12, rtol=0)


def test_correlation_channel_mismatch():
    with pytest.raises(ShapeError):
        correlation(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))), Tensor(np.eye(3)), Tensor(np.eye(4)))


def test_single_key_value_output_independent_of_queries():
    rng = np.random.default_rng(1)
    p = _outer(rng, 2)
    v = Tensor(rng.normal(size=(1, 2)))
    k = Tensor(rng.normal(size=(1, 2)))
    out = conventional_attention(Tensor(rng.normal(size=(5, 2))), k, v, p).data
    expected = v.data @ p.w_v.data @ p.w_o.data
    np.testing.assert_allclose(out, np.repeat(expected, 5, axis=0), atol=1e-12)


def test_conventional_attention_matches_loop_oracle():
    rng = np.random.default_rng(2)
    p = _outer(rng, 2)
    q, k, v = (rng.normal(size=(4, 2)) for _ in range(3))
    got = conventional_attention(Tensor(q), Tensor(k), Tensor(v), p).data
    ref = oracles.conventional_attention(q, k, v, p.w_q, p.w_k, p.w_v, p.w_o)
    np.testing.assert_allclose(got, ref, atol=1e-12, rtol=0)


def test_key_value_permutation_invariance():
    rng = np.random.default_rng(3)
    p = _outer(rng, 4)
    q, k, v = rng.normal(size=(5, 4)), rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    perm = rng.permutation(6)
    a = conventional_attention(Tensor(q), Tensor(k), Tensor(v), p).data
    b = conventional_attention(Tensor(q), Tensor(k[perm]), Tensor(v[perm]), p).data
    np.testing.assert_allclose(a, b, atol=1e-12)


# --- inner attention -------------------------------------------------------------

def test_inner_attention_zero_output_transform_is_plain_aggregation():
    rng = np.random.default_rng(4)
    inner = InnerAttention(rng, 4, 2)
    m = Tensor(rng.normal(size=(4, 4)))
    res = inner(m).data
    x = m.data.T
    feats = oracles.layer_norm_rows(x @ inner.reduce.data)
    qb, kb = np.array(feats) @ inner.w_q.data, np.array(feats) @ inner.w_k.data
    weights = np.array(oracles.softmax_rows(qb @ kb.T / math.sqrt(2)))
    values = np.array(oracles.layer_norm_rows(x))
    np.testing.assert_allclose(res, (weights @ values).T, atol=1e-12)


@pytest.mark.parametrize("hw", [4, 9, 16])
@pytest.mark.parametrize("variant", ["v1", "v2", "v3"])
def test_inner_attention_shape_contract(hw, variant):
    rng = np.random.default_rng(hw)
    inner = InnerAttention(rng, hw, 2, variant=variant)
    assert inner(Tensor(rng.normal(size=(hw, hw)))).shape == (hw, hw)


@pytest.mark.parametrize("variant", ["v1", "v2", "v3"])
def test_inner_attention_matches_step_oracle(variant):
    rng = np.random.default_rng(5)
    inner = InnerAttention(rng, 4, 2, variant=variant)
    _randomize_inner(rng, inner)
    m = rng.normal(size=(4, 4))
    got = inner(Tensor(m)).data
    ref = oracles.inner_attention_keys(m, **_inner_args(inner, variant))
    np.testing.assert_allclose(got, ref, atol=1e-12, rtol=0)


def test_inner_attention_with_positional_cues_matches_oracle():
    rng = np.random.default_rng(6)
    inner = InnerAttention(rng, 6, 4)
    _randomize_inner(rng, inner)
    m = rng.normal(size=(6, 4))  # 6 queries, 4 keys on a 2x2 grid
    pos = grid_encoding((1, 2, 2), 4)
    got = inner(Tensor(m), Tensor(pos)).data
    ref = oracles.inner_attention_keys(m, **_inner_args(inner, "v1", pos))
    np.testing.assert_allclose(got, ref, atol=1e-12, rtol=0)


def test_inner_attention_wrong_length():
    inner = InnerAttention(np.random.default_rng(0), 4, 2)
    with pytest.raises(ShapeError):
        inner(Tensor(np.ones((3, 4))))


def test_inner_attention_requires_enabled_config():
    rng = np.random.default_rng(0)
    inner = InnerAttention(rng, 4, 2)
    with pytest.raises(ValueError):
        inner_attention(Tensor(np.ones((4, 4))), AttentionConfig(4, 1, 2, aia_enabled=False), inner)
    assert inner_attention(Tensor(np.ones((4, 4))), AttentionConfig(4, 1, 2), inner).shape == (4, 4)


def test_inner_dim_not_smaller_warns():
    with pytest.warns(UserWarning):
        InnerAttention(np.random.default_rng(0), 4, 4)


def test_queries_axis_is_transpose_of_keys_axis():
    rng = np.random.default_rng(7)
    keys = InnerAttention(rng, 5, 2, axis="keys")
    _randomize_inner(rng, keys)
    queries = InnerAttention(rng, 5, 2, axis="queries")
    queries.load_state_dict(keys.state_dict())
    m = rng.normal(size=(3, 5))  # refine rows of length 5
    pos = rng.normal(size=(3, 2))
    by_queries = queries(Tensor(m), Tensor(pos)).data
    by_keys = keys(Tensor(m.T), Tensor(pos)).data.T
    np.testing.assert_allclose(by_queries, by_keys, atol=1e-14)


# --- AiA block ---------------------------------------------------------------------

def _aia_params(rng, c, nq, d, randomize=True):
    p = _outer(rng, c)
    p.aia = InnerAttention(rng, nq, d)
    if randomize:
        _randomize_inner(rng, p.aia)
    return p


def test_aia_collapses_to_conventional_with_negated_identity():
    rng = np.random.default_rng(8)
    cfg = AttentionConfig(model_dim=3, num_heads=1, inner_dim=2)
    p = _aia_params(rng, 3, 5, 2)
    p.aia.w_o.assign(-np.eye(5))
    q, k, v = (Tensor(rng.normal(size=(5, 3))) for _ in range(3))
    a = attention_in_attention(q, k, v, cfg, p).data
    b = conventional_attention(q, k, v, p).data
    assert np.array_equal(a, b)


def test_aia_disabled_equals_conventional():
    rng = np.random.default_rng(9)
    cfg = AttentionConfig(model_dim=3, num_heads=1, inner_dim=2, aia_enabled=False)
    p = _aia_params(rng, 3, 4, 2)
    q, k, v = (Tensor(rng.normal(size=(4, 3))) for _ in range(3))
    assert np.array_equal(attention_in_attention(q, k, v, cfg, p).data, conventional_attention(q, k, v, p).data)


def test_aia_matches_end_to_end_oracle():
    rng = np.random.default_rng(10)
    cfg = AttentionConfig(model_dim=2, num_heads=1, inner_dim=2)
    p = _aia_params(rng, 2, 4, 2)
    q, k, v = (rng.normal(size=(4, 2)) for _ in range(3))
    got = attention_in_attention(Tensor(q), Tensor(k), Tensor(v), cfg, p).data
    ref = oracles.attention_in_attention(q, k, v, p.w_q, p.w_k, p.w_v, p.w_o, _inner_args(p.aia))
    np.testing.assert_allclose(got, ref, atol=1e-10, rtol=0)


@pytest.mark.parametrize("hw,c", [(4, 2), (9, 4), (16, 8)])
def test_aia_shape_contract(hw, c):
    rng = np.random.default_rng(hw)
    cfg = AttentionConfig(model_dim=c, num_heads=1, inner_dim=2)
    p = _aia_params(rng, c, hw, 2)
    x = Tensor(rng.normal(size=(hw, c)))
    assert attention_in_attention(x, x, x, cfg, p).shape == conventional_attention(x, x, x, p).shape == (hw, c)


def test_refined_softmax_rows_sum_to_one():
    rng = np.random.default_rng(11)
    cfg = AttentionConfig(model_dim=4, num_heads=2, inner_dim=2)
    blk = MultiHeadAttention(rng, cfg, corr_len=6)
    _randomize_inner(rng, blk.aia, scale=2.0)
    x = Tensor(rng.normal(size=(6, 4)) * 3)
    with ag.record_softmax() as seen:
        blk(x, x, x)
    assert len(seen) == 2
    for s in seen:
        assert np.all(np.abs(s.sum(axis=-1) - 1.0) < 1e-9)


def test_aia_key_permutation_without_positional_cues():
    rng = np.random.default_rng(12)
    cfg = AttentionConfig(model_dim=4, num_heads=2, inner_dim=2, aia_positional=False)
    blk = MultiHeadAttention(rng, cfg, corr_len=5)
    _randomize_inner(rng, blk.aia)
    q, k, v = rng.normal(size=(5, 4)), rng.normal(size=(7, 4)), rng.normal(size=(7, 4))
    perm = rng.permutation(7)
    a = blk(Tensor(q), Tensor(k), Tensor(v)).data
    b = blk(Tensor(q), Tensor(k[perm]), Tensor(v[perm])).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_aia_query_permutation_permutes_rows():
    # self-attention with rows permuted consistently; the refiner's vectors are
    # indexed by query, so the learned reduction must be permuted with them.
    rng = np.random.default_rng(13)
    cfg = AttentionConfig(model_dim=4, num_heads=1, inner_dim=2, aia_positional=False)
    blk = MultiHeadAttention(rng, cfg, corr_len=5)
    _randomize_inner(rng, blk.aia)
    q, k = rng.normal(size=(5, 4)), rng.normal(size=(6, 4))
    perm = rng.permutation(5)
    a = blk(Tensor(q), Tensor(k), Tensor(k)).data
    blk2 = MultiHeadAttention(rng, cfg, corr_len=5)
    state = blk.state_dict()
    state["aia.reduce"] = state["aia.reduce"][perm]
    state["aia.value_norm.gain"] = state["aia.value_norm.gain"][perm]
    state["aia.value_norm.bias"] = state["aia.value_norm.bias"][perm]
    state["aia.w_o"] = state["aia.w_o"][np.ix_(perm, perm)]
    blk2.load_state_dict(state)
    b = blk2(Tensor(q[perm]), Tensor(k), Tensor(k)).data
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


def test_aia_block_gradient_check():
    rng = np.random.default_rng(14)
    cfg = AttentionConfig(model_dim=8, num_heads=2, inner_dim=4)
    blk = MultiHeadAttention(rng, cfg, corr_len=9)
    _randomize_inner(rng, blk.aia, 0.3)
    x, y = Tensor(rng.normal(size=(9, 8))), Tensor(rng.normal(size=(9, 8)))
    proj = rng.normal(size=(9, 8))
    report = ag.grad_check(lambda: (blk(x, y, y, key_grid=(1, 3, 3)) * proj).sum(),
                           dict(blk.named_parameters()), eps=1e-4, tol=1e-4)
    assert report.passed, report.summary()


# --- multi-head ----------------------------------------------------------------------

def test_single_head_equals_attention_in_attention():
    rng = np.random.default_rng(15)
    cfg = AttentionConfig(model_dim=4, num_heads=1, inner_dim=2, aia_positional=False)
    blk = MultiHeadAttention(rng, cfg, corr_len=4)
    _randomize_inner(rng, blk.aia)
    q, k, v = (Tensor(rng.normal(size=(4, 4))) for _ in range(3))
    np.testing.assert_array_equal(multi_head(q, k, v, cfg, blk).data,
                                  attention_in_attention(q, k, v, cfg, blk).data)


def test_aia_parameter_count_independent_of_heads():
    counts = set()
    for heads in (1, 2, 4):
        cfg = AttentionConfig(model_dim=8, num_heads=heads, inner_dim=4)
        blk = MultiHeadAttention(np.random.default_rng(0), cfg, corr_len=16)
        counts.add(sum(p.size for n, p in blk.named_parameters() if n.startswith("aia.")))
    assert len(counts) == 1


def test_multi_head_matches_slicing_oracle():
    rng = np.random.default_rng(16)
    cfg = AttentionConfig(model_dim=4, num_heads=2, inner_dim=2, aia_positional=False)
    blk = MultiHeadAttention(rng, cfg, corr_len=3)
    _randomize_inner(rng, blk.aia)
    q, k, v = rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    got = blk(Tensor(q), Tensor(k), Tensor(v)).data
    ref = oracles.multi_head_by_slicing(q, k, v, blk.w_q, blk.w_k, blk.w_v, blk.w_o, 2, _inner_args(blk.aia))
    np.testing.assert_allclose(got, ref, atol=1e-12, rtol=0)


def test_multi_head_divisibility():
    with pytest.raises(ValueError):
        AttentionConfig(model_dim=6, num_heads=4)


# --- positional encoding ---------------------------------------------------------

def test_sinusoid_origin_and_shape():
    enc = sinusoidal_2d(3, 5, 8)
    assert enc.values.shape == (15, 8)
    origin = enc.values[0]
    assert np.all(origin[0::2] == 0.0) and np.all(origin[1::2] == 1.0)


def test_sinusoid_distinct_positions():
    enc = sinusoidal_2d(4, 4, 8).values
    assert np.linalg.norm(enc[1] - enc[4]) > 0  # (0,1) vs (1,0)
    assert len({tuple(np.round(r, 12)) for r in enc}) == 16


def test_sinusoid_direct_evaluation():
    enc = sinusoidal_2d(2, 3, 8, base=10000.0).values
    row, col = 1, 2
    v = enc[row * 3 + col]
    for i in range(2):
        f = 10000.0 ** (-2 * i / 4)
        assert v[2 * i] == pytest.approx(math.sin(row * f)) and v[2 * i + 1] == pytest.approx(math.cos(row * f))
        assert v[4 + 2 * i] == pytest.approx(math.sin(col * f))


def test_sinusoid_rejects_bad_channels():
    with pytest.raises(ValueError):
        sinusoidal_2d(2, 2, 6)
    with pytest.raises(ValueError):
        sinusoidal_2d(2, 2, 7)


# --- conv bottleneck ----------------------------------------------------------------

def test_conv_bottleneck_zero_weights_zero_residual():
    rng = np.random.default_rng(17)
    conv = ConvBottleneck(rng, 16, 4)
    for _, p in conv.named_parameters():
        p.assign(np.zeros(p.shape))
    out = conv_bottleneck_refine(Tensor(rng.normal(size=(16, 16))), conv)
    assert out.shape == (16, 16) and not out.data.any()


def test_conv_bottleneck_shape_and_square_check():
    rng = np.random.default_rng(18)
    conv = ConvBottleneck(rng, 16, 4)
    assert conv(Tensor(rng.normal(size=(16, 16)))).shape == (16, 16)
    with pytest.raises(ShapeError):
        conv(Tensor(rng.normal(size=(16, 15))))


def test_conv_bottleneck_single_cell_kernel_is_neighbourhood_average():
    rng = np.random.default_rng(19)
    n_q, side = 3, 4
    conv = ConvBottleneck(rng, n_q, n_q)
    conv.reduce.weight.assign(np.eye(n_q))
    conv.reduce.bias.assign(np.zeros(n_q))
    kernel = np.zeros((3, 3, n_q, n_q))
    for c in range(n_q):
        kernel[:, :, c, c] = 1.0 / 9.0
    conv.conv.weight.assign(kernel)
    conv.conv.bias.assign(np.zeros(n_q))
    conv.expand.weight.assign(np.eye(n_q))
    conv.expand.bias.assign(np.zeros(n_q))
    m = rng.uniform(0.1, 1.0, size=(n_q, side * side))
    got = conv(Tensor(m)).data
    for key in range(side * side):
        r, c = divmod(key, side)
        for q in range(n_q):
            total = 0.0
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < side and 0 <= cc < side:
                        total += m[q, rr * side + cc]
            assert got[q, key] == pytest.approx(total / 9.0, abs=1e-12)


def test_conv_refiner_in_block_gradient():
    rng = np.random.default_rng(20)
    cfg = AttentionConfig(model_dim=4, num_heads=2, inner_dim=2, refiner="conv")
    blk = MultiHeadAttention(rng, cfg, corr_len=4)
    assert blk.aia is None and blk.conv_refine is not None
    x = Tensor(rng.normal(size=(4, 4)))
    proj = rng.normal(size=(4, 4))
    rep = ag.grad_check(lambda: (blk(x, x, x, key_grid=(1, 2, 2)) * proj).sum(), dict(blk.named_parameters()))
    assert rep.passed, rep.summary()
