import numpy as np
import pytest
import scipy.fft
import torch
from hypothesis import given, strategies as st

from oracles import naive_dct, naive_global_attention, relative_error, shifted_pair_blocked
from swinmark.blocks import (FETB, LCESTB, FrequencyEnhance, LocalChannelEnhance, SwinPair, ViTBlock,
                             WindowAttention, dct_per_channel, idct_per_channel, shifted_window_mask,
                             window_partition, window_reverse)
from swinmark.core import ShapeError, make_generator


def _gen(seed=0):
    return make_generator(seed)


def test_window_partition_groups_and_inverse():
    x = torch.arange(16, dtype=torch.float32).reshape(1, 4, 4, 1)
    win = window_partition(x, 2)
    assert win.shape == (4, 4, 1)
    assert win[0, :, 0].tolist() == [0, 1, 4, 5]
    assert 3.0 in win[1, :, 0].tolist()  # token (0, 3) lands in the second window
    assert torch.equal(window_reverse(win, 2, 4, 4), x)
    with pytest.raises(ShapeError):
        window_partition(torch.zeros(1, 5, 4, 1), 2)


@pytest.mark.parametrize("grid,heads", [(4, 1), (4, 2), (8, 4)])
def test_window_attention_full_window_matches_global(grid, heads):
    dim = 16
    attn = WindowAttention(dim, heads, grid, 0, _gen(1))
    x = torch.randn(2, grid * grid, dim, generator=_gen(2))
    with torch.no_grad():
        out = attn(x, grid, grid)
    wq, bq, wp, bp = (t.detach().double().numpy() for t in
                      (attn.qkv.weight, attn.qkv.bias, attn.proj.weight, attn.proj.bias))
    for b in range(2):
        ref = naive_global_attention(x[b].double().numpy(), wq, bq, wp, bp, heads)
        assert np.abs(out[b].numpy() - ref).max() <= 1e-5


def test_identical_tokens_get_uniform_attention():
    attn = WindowAttention(8, 2, 2, 0, _gen())
    x = torch.ones(1, 16, 8)
    _, weights = attn(x, 4, 4, return_attn=True)
    assert torch.allclose(weights, torch.full_like(weights, 0.25), atol=1e-7)


def test_shift_mask_matches_index_oracle():
    mask = shifted_window_mask(4, 4, 2, 1).numpy()
    assert np.array_equal(mask, shifted_pair_blocked(4, 4, 2, 1))
    mask8 = shifted_window_mask(8, 8, 4, 2).numpy()
    assert np.array_equal(mask8, shifted_pair_blocked(8, 8, 4, 2))


def test_shifted_attention_weights_zero_on_blocked_pairs():
    attn = WindowAttention(8, 2, 2, 1, _gen())
    x = torch.randn(1, 16, 8, generator=_gen(3))
    _, weights = attn(x, 4, 4, return_attn=True)
    blocked = torch.from_numpy(shifted_pair_blocked(4, 4, 2, 1))
    w = weights[0].permute(1, 0, 2, 3)  # [heads, nW, n, n]
    assert torch.all(w[:, blocked] == 0)
    assert torch.all(w[:, ~blocked] > 0)
    assert torch.allclose(weights.sum(-1), torch.ones(()), atol=1e-6)


def test_shift_disabled_when_grid_fits_one_window():
    a = WindowAttention(8, 2, 4, 2, _gen(5))
    b = WindowAttention(8, 2, 4, 0, _gen(5))
    x = torch.randn(1, 16, 8, generator=_gen(6))
    assert torch.equal(a(x, 4, 4), b(x, 4, 4))


def _zero_residual_branches(pair: SwinPair):
    with torch.no_grad():
        for blk in (pair.regular, pair.shifted):
            for lin in (blk.attn.proj, blk.mlp.fc2):
                lin.weight.zero_()
                lin.bias.zero_()


def test_swin_pair_shape_and_zero_weight_identity():
    pair = SwinPair(16, 2, 2, generator=_gen())
    x = torch.randn(3, 16, 16, generator=_gen(1))
    assert pair(x, 4, 4).shape == x.shape
    _zero_residual_branches(pair)
    assert torch.equal(pair(x, 4, 4), x)


def test_swin_pair_gradients_match_finite_differences():
    pair = SwinPair(8, 2, 2, generator=_gen()).double()
    x = torch.randn(1, 16, 8, generator=_gen(1), dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda t: pair(t, 4, 4), (x,), eps=1e-6, atol=1e-6)


def test_lce_gate_in_open_unit_interval_and_shape():
    lce = LocalChannelEnhance(16, 2, 4, _gen())
    x = torch.randn(2, 16, 16, generator=_gen(1))
    assert lce(x, 4, 4).shape == x.shape
    xc = torch.randn(2, 4, 8, 8, generator=_gen(2))
    w = lce.channel_weights(xc)
    assert w.shape == (2, 4)
    assert torch.all((w > 0) & (w < 1))


def test_lce_zero_reduce_is_identity():
    lce = LocalChannelEnhance(16, 2, 4, _gen())
    with torch.no_grad():
        lce.reduce.weight.zero_()
        lce.reduce.bias.zero_()
    x = torch.randn(2, 16, 16, generator=_gen(1))
    assert torch.equal(lce(x, 4, 4), x)


def test_lcestb_ablation():
    on = LCESTB(16, 2, 2, 2, use_lceb=True, generator=_gen(0))
    off = LCESTB(16, 2, 2, 2, use_lceb=False, generator=_gen(0))
    assert off.lce is None
    off.swin.load_state_dict(on.swin.state_dict())
    x = torch.randn(2, 16, 16, generator=_gen(1))
    with torch.no_grad():
        assert torch.equal(off(x, 4, 4), on.swin(x, 4, 4))
        assert not torch.allclose(on(x, 4, 4), off(x, 4, 4))


def test_vit_block_equals_full_window_swin_block():
    from swinmark.blocks import SwinBlock
    vit = ViTBlock(16, 2, generator=_gen())
    swin = SwinBlock(16, 2, 4, 0)
    missing = swin.load_state_dict(vit.state_dict(), strict=False)
    assert missing.missing_keys == ["attn.bias_table"]
    x = torch.randn(2, 16, 16, generator=_gen(1))
    with torch.no_grad():
        assert torch.allclose(vit(x), swin(x, 4, 4), atol=1e-5)


@pytest.mark.parametrize("n", [8, 16, 64])
def test_dct_matches_cosine_sum_and_scipy(n):
    x = torch.randn(1, n, 3, generator=_gen(n), dtype=torch.float64)
    got = dct_per_channel(x)[0].numpy()
    for ch in range(3):
        assert np.abs(got[:, ch] - naive_dct(x[0, :, ch].numpy())).max() <= 1e-5
    assert np.allclose(got, scipy.fft.dct(x[0].numpy(), type=2, norm="ortho", axis=0), atol=1e-10)
    x32 = x.float()
    assert (idct_per_channel(dct_per_channel(x32)) - x32).abs().max() <= 1e-5


@given(n=st.integers(1, 40), d=st.integers(1, 5), seed=st.integers(0, 10_000))
def test_dct_parseval(n, d, seed):
    x = torch.randn(2, n, d, generator=_gen(seed), dtype=torch.float64)
    c = dct_per_channel(x)
    assert torch.allclose((c**2).sum(1), (x**2).sum(1), rtol=1e-10, atol=1e-10)


def test_dct_of_constant_is_dc_only():
    c = dct_per_channel(torch.full((1, 16, 2), 3.0, dtype=torch.float64))
    assert torch.allclose(c[0, 0], torch.full((2,), 12.0, dtype=torch.float64))
    assert c[0, 1:].abs().max() < 1e-12


def test_feb_gate_and_saturation():
    feb = FrequencyEnhance(8, _gen())
    x = torch.randn(2, 16, 8, generator=_gen(1))
    w = feb.weights(x)
    assert w.shape == (2, 8) and torch.all((w > 0) & (w < 1))
    with torch.no_grad():
        feb.fc.weight.zero_()
        feb.fc.bias.fill_(100.0)
    assert torch.equal(feb(x), x)


def test_fetb_depth_zero_and_ablation():
    x = torch.randn(2, 16, 8, generator=_gen(1))
    assert torch.equal(FETB(8, 2, depth=0, use_feb=False)(x), x)
    on = FETB(8, 2, depth=2, use_feb=True, generator=_gen(0))
    off = FETB(8, 2, depth=2, use_feb=False, generator=_gen(0))
    assert off.feb is None
    off.blocks.load_state_dict(on.blocks.state_dict())
    with torch.no_grad():
        assert not torch.allclose(on(x), off(x))


def test_fetb_gradient_reaches_every_parameter():
    fetb = FETB(8, 2, depth=2, generator=_gen())
    x = torch.randn(2, 16, 8, generator=_gen(1))
    fetb(x).square().sum().backward()
    for name, p in fetb.named_parameters():
        assert p.grad is not None and p.grad.abs().sum() > 0, name


def test_window_attention_rejects_bad_heads():
    with pytest.raises(ShapeError):
        WindowAttention(10, 3, 2)
