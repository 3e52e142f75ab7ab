import numpy as np
import pytest

from denseswin import tensor as T
from denseswin.config import full_model
from denseswin.errors import ConfigError, DimensionError
from denseswin.swin import (
    ATTENTION_COUNTER,
    MASK_VALUE,
    PatchMerging,
    SwinBlock,
    SwinBranch,
    SwinConfig,
    WindowAttention,
    build_shift_mask,
    merge_neighbours,
    mhsa,
    patch_partition,
    patch_unpartition,
    relative_position_index,
    stage_window,
    sw_msa,
    swin_block_pair,
    w_msa,
    window_partition,
    window_reverse,
)
from denseswin.tensor import Tensor, grad_check

from oracles import attention_loop, shifted_segments, sw_msa_bruteforce


def attention(d, heads, window, seed=0, dtype=np.float32, bias=True):
    """WindowAttention with N(0, 1/sqrt(d)) projections."""
    rng = np.random.default_rng(seed)
    p = WindowAttention(d, heads, window, rel_pos_bias=bias)
    for lin in (p.w_q, p.w_k, p.w_v, p.w_o):
        lin.weight.assign(rng.normal(0, 1 / np.sqrt(d), (d, d)))
    p.w_o.bias.assign(rng.normal(0, 0.1, d))
    if p.bias_table is not None:
        p.bias_table.assign(rng.normal(0, 0.5, p.bias_table.shape))
    return p.to_dtype(dtype)


def weights_of(p):
    return [np.asarray(lin.weight.data, np.float64) for lin in (p.w_q, p.w_k, p.w_v, p.w_o)] + [p.w_o.bias.data]


def weighted_sum(y, seed=99):
    w = Tensor(np.random.default_rng(seed).normal(size=y.shape), dtype=y.dtype)
    return T.tensor_sum(T.mul(y, w))


# ---------------------------------------------------------------- attention


def test_mhsa_three_tokens_matches_loop():
    p = attention(4, 2, None, seed=1, dtype=np.float64)
    x = np.random.default_rng(2).normal(size=(3, 4))
    out = mhsa(Tensor(x[None]), p).data[0]
    ref, _ = attention_loop(x, *weights_of(p), heads=2)
    assert np.abs(out - ref).max() <= 1e-10


def test_mhsa_single_token_is_projected_value():
    p = attention(4, 2, None, seed=3, dtype=np.float64)
    x = np.random.default_rng(4).normal(size=(1, 1, 4))
    out, w = mhsa(Tensor(x), p, return_weights=True)
    np.testing.assert_array_equal(w.data, 1.0)
    wq, wk, wv, wo, bo = weights_of(p)
    np.testing.assert_allclose(out.data[0, 0], (x[0, 0] @ wv.T) @ wo.T + bo, rtol=1e-12)


def test_mhsa_zero_query_weights_average_values():
    p = attention(4, 1, None, seed=5, dtype=np.float64)
    p.w_q.weight.assign(np.zeros((4, 4)))
    p.w_o.weight.assign(np.eye(4))
    p.w_o.bias.assign(np.zeros(4))
    x = np.random.default_rng(6).normal(size=(1, 5, 4))
    out = mhsa(Tensor(x), p).data[0]
    v = x[0] @ p.w_v.weight.data.T
    np.testing.assert_allclose(out, np.tile(v.mean(axis=0), (5, 1)), rtol=1e-12)


def test_mhsa_dimension_errors():
    p = attention(4, 2, None)
    with pytest.raises(DimensionError):
        mhsa(Tensor(np.zeros((1, 3, 6), np.float32)), p)
    with pytest.raises(DimensionError):
        WindowAttention(6, 4, None)


def test_relative_position_index_range():
    idx = relative_position_index(3)
    assert idx.shape == (9, 9)
    assert idx.min() == 0 and idx.max() == 24
    assert np.all(np.diag(idx) == 12)


# ---------------------------------------------------------------- mask


def region_oracle(n, m, s):
    """Region ids of the rolled map by mapping back to original coordinates."""
    seg = shifted_segments(n, m, s)
    reg = np.zeros((n, n), dtype=int)
    for r in range(n):
        for c in range(n):
            oy, ox = (r + s) % n, (c + s) % n
            reg[r, c] = seg[oy] * 1000 + seg[ox]
    return reg


@pytest.mark.parametrize("n,m", [(4, 2), (8, 4), (12, 4), (14, 7)])
def test_shift_mask_matches_region_oracle(n, m):
    s = m // 2
    mask = build_shift_mask(n, n, m, s)
    reg = region_oracle(n, m, s)
    nw = (n // m) ** 2
    assert mask.shape == (nw, m * m, m * m)
    w = 0
    for wy in range(n // m):
        for wx in range(n // m):
            ids = reg[wy * m : (wy + 1) * m, wx * m : (wx + 1) * m].reshape(-1)
            expect = np.where(ids[:, None] == ids[None, :], 0.0, MASK_VALUE)
            np.testing.assert_array_equal(mask[w], expect)
            w += 1
    np.testing.assert_array_equal(mask, mask.transpose(0, 2, 1))


def test_shift_mask_small_example():
    mask = build_shift_mask(4, 4, 2, 1)
    # the last window mixes four regions: each token sees only itself
    assert np.count_nonzero(mask[-1]) == 16 - 4
    assert not mask[0].any()


def test_shift_mask_zero_shift():
    assert not build_shift_mask(8, 8, 4, 0).any()


def test_masked_softmax_rows_and_blocked_weights():
    p = attention(8, 2, 4, seed=7)
    x = np.random.default_rng(8).normal(size=(1, 8, 8, 8)).astype(np.float32)
    mask = build_shift_mask(8, 8, 4, 2)
    win = window_partition(T.cyclic_shift(Tensor(x), -2, -2), 4)
    _, w = mhsa(win, p, mask, return_weights=True)
    w = w.data.astype(np.float64)
    assert np.abs(w.sum(axis=-1) - 1).max() <= 1e-6
    blocked = np.broadcast_to(mask[:, None] != 0, w.shape)
    assert w[blocked].max() <= 1e-12


# ---------------------------------------------------------------- windows


@pytest.mark.parametrize("bias", [False, True])
def test_sw_msa_matches_bruteforce(bias):
    d, heads, m, s = 8, 2, 4, 2
    p = attention(d, heads, m, seed=11, bias=bias)
    x = np.random.default_rng(12).normal(size=(8, 8, d)).astype(np.float32)
    out = sw_msa(Tensor(x[None]), p, m).data[0]
    table = np.asarray(p.bias_table.data, np.float64) if bias else None
    ref = sw_msa_bruteforce(x, *weights_of(p), heads=heads, m=m, s=s, table=table)
    assert out.shape == x.shape
    assert np.abs(out - ref).max() <= 1e-6 * max(1.0, np.abs(ref).max())


def test_sw_msa_rectangular_bruteforce_float64():
    d, heads, m = 4, 1, 2
    p = attention(d, heads, m, seed=13, dtype=np.float64)
    x = np.random.default_rng(14).normal(size=(4, 6, d))
    out = sw_msa(Tensor(x[None]), p, m).data[0]
    ref = sw_msa_bruteforce(x, *weights_of(p), heads=heads, m=m, s=1, table=p.bias_table.data)
    assert np.abs(out - ref).max() <= 1e-10


def test_sw_msa_zero_shift_is_w_msa():
    p = attention(8, 2, 4, seed=15)
    x = Tensor(np.random.default_rng(16).normal(size=(2, 8, 8, 8)).astype(np.float32))
    np.testing.assert_array_equal(sw_msa(x, p, 4, s=0).data, w_msa(x, p, 4).data)


def test_w_msa_single_window_is_full_attention():
    p = attention(8, 2, 4, seed=17, dtype=np.float64)
    x = np.random.default_rng(18).normal(size=(1, 4, 4, 8))
    full = mhsa(Tensor(x.reshape(1, 16, 8)), p).data.reshape(1, 4, 4, 8)
    np.testing.assert_array_equal(w_msa(Tensor(x), p, 4).data, full)


def test_w_msa_locality():
    p = attention(8, 2, 4, seed=19)
    x = np.random.default_rng(20).normal(size=(1, 8, 8, 8)).astype(np.float32)
    base = w_msa(Tensor(x), p, 4).data
    x2 = x.copy()
    x2[0, 1, 1] += 5.0
    pert = w_msa(Tensor(x2), p, 4).data
    np.testing.assert_array_equal(pert[0, :, 4:], base[0, :, 4:])
    np.testing.assert_array_equal(pert[0, 4:, :], base[0, 4:, :])
    assert not np.array_equal(pert[0, :4, :4], base[0, :4, :4])


def test_w_msa_identical_windows_identical_outputs():
    p = attention(8, 2, 4, seed=21)
    tile = np.random.default_rng(22).normal(size=(4, 4, 8)).astype(np.float32)
    x = np.tile(tile, (2, 2, 1))[None]
    y = w_msa(Tensor(x), p, 4).data[0]
    np.testing.assert_array_equal(y[:4, :4], y[4:, 4:])
    np.testing.assert_array_equal(y[:4, :4], y[:4, 4:])


def test_window_partition_roundtrip():
    x = Tensor(np.random.default_rng(23).normal(size=(2, 8, 12, 3)).astype(np.float32))
    win = window_partition(x, 4)
    assert win.shape == (2 * 6, 16, 3)
    np.testing.assert_array_equal(window_reverse(win, 4, 8, 12).data, x.data)
    np.testing.assert_array_equal(window_partition(x, 4).data[1], x.data[0, :4, 4:8].reshape(16, 3))
    with pytest.raises(DimensionError):
        window_partition(x, 5)


def test_window_partition_whole_map_is_reshape():
    x = Tensor(np.arange(48, dtype=np.float32).reshape(1, 4, 4, 3))
    np.testing.assert_array_equal(window_partition(x, 4).data, x.data.reshape(1, 16, 3))


def test_attention_cost_linear_in_tokens():
    p = attention(8, 2, 4)
    ATTENTION_COUNTER.reset()
    w_msa(Tensor(np.zeros((1, 8, 8, 8), np.float32)), p, 4)
    small = (ATTENTION_COUNTER.attentions, ATTENTION_COUNTER.macs)
    ATTENTION_COUNTER.reset()
    w_msa(Tensor(np.zeros((1, 8, 16, 8), np.float32)), p, 4)
    assert (ATTENTION_COUNTER.attentions, ATTENTION_COUNTER.macs) == (2 * small[0], 2 * small[1])


# ---------------------------------------------------------------- patches


def test_patch_partition_example_and_ordering():
    x = np.random.default_rng(24).random((1, 3, 8, 8)).astype(np.float32)
    tok = patch_partition(Tensor(x)).data
    assert tok.shape == (1, 4, 48)
    # token 1 is the top-right patch; pixels row by row, RGB innermost
    manual = np.array([x[0, c, i, 4 + j] for i in range(4) for j in range(4) for c in range(3)])
    np.testing.assert_array_equal(tok[0, 1], manual)
    np.testing.assert_array_equal(patch_unpartition(Tensor(tok), 8, 8).data, x)


def test_patch_partition_constant_and_errors():
    tok = patch_partition(Tensor(np.full((1, 3, 8, 8), 0.25, np.float32))).data
    np.testing.assert_array_equal(tok, 0.25)
    with pytest.raises(DimensionError):
        patch_partition(Tensor(np.zeros((1, 3, 6, 8), np.float32)))


def test_merge_order_tl_tr_bl_br():
    x = np.arange(16, dtype=np.float32).reshape(1, 4, 4, 1)
    y = merge_neighbours(Tensor(x)).data
    np.testing.assert_array_equal(y[0, 0, 0], [0, 1, 4, 5])
    np.testing.assert_array_equal(y[0, 1, 1], [10, 11, 14, 15])
    with pytest.raises(DimensionError):
        merge_neighbours(Tensor(np.zeros((1, 3, 4, 1), np.float32)))


def test_patch_merging_shapes_and_zero_weights():
    pm = PatchMerging(5, np.random.default_rng(0))
    assert pm(Tensor(np.ones((2, 4, 4, 5), np.float32))).shape == (2, 2, 2, 10)
    pm.reduction.weight.assign(np.zeros((10, 20)))
    assert not pm(Tensor(np.ones((1, 4, 4, 5), np.float32))).data.any()


# ---------------------------------------------------------------- blocks and branch


def block_pair(dim=8, heads=2, res=4, window=2, seed=0):
    rng = np.random.default_rng(seed)
    return (
        SwinBlock(dim, heads, res, window, 0, 2.0, rng),
        SwinBlock(dim, heads, res, window, window // 2, 2.0, rng),
    )


def test_block_pair_residual_identity():
    blocks = block_pair()
    for b in blocks:
        b.attn.w_o.weight.assign(np.zeros_like(b.attn.w_o.weight.data))
        b.mlp.fc2.weight.assign(np.zeros_like(b.mlp.fc2.weight.data))
    x = Tensor(np.random.default_rng(1).normal(size=(2, 4, 4, 8)).astype(np.float32))
    np.testing.assert_array_equal(swin_block_pair(x, blocks).data, x.data)


def test_block_pair_gradient():
    blocks = block_pair(seed=2)
    rng = np.random.default_rng(3)
    for b in blocks:
        b.to_dtype(np.float64)
        for lin in (b.attn.w_q, b.attn.w_k, b.attn.w_v, b.attn.w_o, b.mlp.fc1, b.mlp.fc2):
            lin.weight.assign(rng.normal(0, 1 / np.sqrt(lin.weight.shape[1]), lin.weight.shape))
        b.attn.bias_table.assign(rng.normal(0, 0.5, b.attn.bias_table.shape))
    x = Tensor(rng.normal(size=(1, 4, 4, 8)))
    params = [p for b in blocks for p in b.parameters()]
    rep = grad_check(lambda x, *_: weighted_sum(swin_block_pair(x, blocks)), [x, *params])
    assert rep.ok(1e-4), rep.errors


def test_stage_window_clamp():
    assert stage_window(16, 4) == (4, 2)
    assert stage_window(2, 4) == (2, 0)
    assert stage_window(7, 7) == (7, 0)


def test_desk_branch_stage_shapes_and_determinism():
    branch = SwinBranch(SwinConfig(), 64).eval()
    x = Tensor(np.random.default_rng(4).random((1, 3, 64, 64)).astype(np.float32))
    y = branch(x)
    assert [s[1:] for s in branch.stage_shapes] == [(16, 16, 16), (8, 8, 32), (4, 4, 64), (2, 2, 128)]
    assert branch.stage_shapes == branch.expected_stage_shapes()
    assert y.shape == branch.out_shape() == (1, 128, 2, 2)
    np.testing.assert_array_equal(branch(x).data, y.data)


def test_full_branch_stage_schedule():
    cfg = full_model().swin
    cfg.validate(224)
    assert cfg.resolutions(224) == [56, 28, 14, 7]
    dims = [cfg.embed_dim * 2**s for s in range(4)]
    assert dims == [96, 192, 384, 768]
    assert stage_window(7, cfg.window) == (7, 0)


def test_full_branch_forward_shapes():
    branch = SwinBranch(full_model().swin, 224).eval()
    branch(Tensor(np.zeros((1, 3, 224, 224), np.float32)))
    assert [s[1:] for s in branch.stage_shapes] == [(56, 56, 96), (28, 28, 192), (14, 14, 384), (7, 7, 768)]


def test_branch_config_errors():
    with pytest.raises(ConfigError):
        SwinConfig(depths=[2, 3, 6, 2]).validate(64)
    with pytest.raises(ConfigError):
        SwinConfig().validate(48)
    with pytest.raises(ConfigError):
        SwinConfig(heads=[3, 4, 8, 16]).validate(64)
    with pytest.raises(ConfigError):
        SwinConfig(window=3).validate(64)
