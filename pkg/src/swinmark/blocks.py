"""Swin / ViT transformer blocks, the local-channel enhancement block and the DCT gate."""

from __future__ import annotations

import math
from functools import lru_cache

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ShapeError, unpatchify, patchify

LN_EPS = 1e-5


def window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    """[B, h, w, D] -> [B * h/win * w/win, win*win, D].

    Windows are raster-ordered over the grid, and tokens raster-ordered inside each window.
    """
    b, h, w, d = x.shape
    if h % window or w % window:
        raise ShapeError(f"grid {h}x{w} not divisible by window {window}")
    x = x.reshape(b, h // window, window, w // window, window, d).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, window * window, d)


def window_reverse(windows: torch.Tensor, window: int, h: int, w: int) -> torch.Tensor:
    d = windows.shape[-1]
    b = windows.shape[0] // ((h // window) * (w // window))
    x = windows.reshape(b, h // window, w // window, window, window, d).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, w, d)


def relative_position_index(window: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij"))
    coords = coords.flatten(1)
    rel = coords[:, :, None] - coords[:, None, :] + (window - 1)
    return rel[0] * (2 * window - 1) + rel[1]


@lru_cache(maxsize=64)
def shifted_window_mask(h: int, w: int, window: int, shift: int) -> torch.Tensor:
    """Boolean [nW, win*win, win*win]; True where the pair must not attend.

    After the cyclic roll a window can hold tokens from opposite image borders;
    those pairs are labelled by the three row/column bands of the rolled grid.
    """
    label = torch.zeros(h, w, dtype=torch.long)
    bands = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    n = 0
    for hs in bands:
        for ws in bands:
            label[hs, ws] = n
            n += 1
    lw = window_partition(label[None, :, :, None], window).squeeze(-1)
    return lw[:, :, None] != lw[:, None, :]


def _trunc_normal(t: torch.Tensor, generator: torch.Generator | None) -> None:
    nn.init.trunc_normal_(t, std=0.02, a=-0.04, b=0.04, generator=generator)


def init_linear(layer: nn.Linear, generator: torch.Generator | None) -> nn.Linear:
    _trunc_normal(layer.weight, generator)
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)
    return layer


def init_conv(layer: nn.Conv2d | nn.ConvTranspose2d, generator: torch.Generator | None):
    w = layer.weight
    if isinstance(layer, nn.ConvTranspose2d):
        fan_in = w.shape[0] * w.shape[2] * w.shape[3] // layer.groups
    else:
        fan_in = w.shape[1] * w.shape[2] * w.shape[3]
    nn.init.normal_(w, std=1.0 / math.sqrt(fan_in), generator=generator)
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)
    return layer


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: int = 4, generator: torch.Generator | None = None):
        super().__init__()
        self.fc1 = init_linear(nn.Linear(dim, dim * ratio), generator)
        self.fc2 = init_linear(nn.Linear(dim * ratio, dim), generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class WindowAttention(nn.Module):
    """Multi-head self-attention inside (optionally shifted) square windows.

    A learned relative-position bias is added to the scores; the table starts at zero.
    """

    def __init__(self, dim: int, heads: int, window: int, shift: int = 0,
                 generator: torch.Generator | None = None):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"heads={heads} does not divide dim={dim}")
        if shift not in (0, window // 2):
            raise ValueError(f"shift must be 0 or window/2, got {shift}")
        self.dim, self.heads, self.window, self.shift = dim, heads, window, shift
        self.scale = (dim // heads) ** -0.5
        self.qkv = init_linear(nn.Linear(dim, 3 * dim), generator)
        self.proj = init_linear(nn.Linear(dim, dim), generator)
        self.bias_table = nn.Parameter(torch.zeros((2 * window - 1) ** 2, heads))
        self.register_buffer("bias_index", relative_position_index(window), persistent=False)

    def position_bias(self) -> torch.Tensor:
        n = self.window**2
        bias = self.bias_table[self.bias_index.reshape(-1)].reshape(n, n, self.heads)
        return bias.permute(2, 0, 1)

    def forward(self, tokens: torch.Tensor, h: int, w: int,
                return_attn: bool = False):
        b, n, d = tokens.shape
        if n != h * w:
            raise ShapeError(f"{n} tokens do not fill a {h}x{w} grid")
        win = self.window
        shift = self.shift if min(h, w) > win else 0
        x = tokens.reshape(b, h, w, d)
        if shift:
            x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))
        xw = window_partition(x, win)
        nw = xw.shape[0] // b

        qkv = self.qkv(xw).reshape(xw.shape[0], win * win, 3, self.heads, d // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        scores = (q * self.scale) @ k.transpose(-2, -1) + self.position_bias()
        if shift:
            mask = shifted_window_mask(h, w, win, shift).to(tokens.device)
            scores = scores.reshape(b, nw, self.heads, win * win, win * win)
            scores = scores.masked_fill(mask[None, :, None], float("-inf"))
            scores = scores.reshape(-1, self.heads, win * win, win * win)
        attn = scores.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(xw.shape[0], win * win, d)
        out = self.proj(out)

        x = window_reverse(out, win, h, w)
        if shift:
            x = torch.roll(x, shifts=(shift, shift), dims=(1, 2))
        out = x.reshape(b, n, d)
        if return_attn:
            return out, attn.reshape(b, nw, self.heads, win * win, win * win)
        return out


class GlobalAttention(nn.Module):
    """Plain multi-head self-attention over the whole token sequence."""

    def __init__(self, dim: int, heads: int, generator: torch.Generator | None = None):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"heads={heads} does not divide dim={dim}")
        self.dim, self.heads = dim, heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = init_linear(nn.Linear(dim, 3 * dim), generator)
        self.proj = init_linear(nn.Linear(dim, dim), generator)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        b, n, d = tokens.shape
        q, k, v = self.qkv(tokens).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        attn = ((q * self.scale) @ k.transpose(-2, -1)).softmax(dim=-1)
        return self.proj((attn @ v).transpose(1, 2).reshape(b, n, d))


class SwinBlock(nn.Module):
    def __init__(self, dim: int, heads: int, window: int, shift: int, mlp_ratio: int = 4,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=LN_EPS)
        self.attn = WindowAttention(dim, heads, window, shift, generator)
        self.norm2 = nn.LayerNorm(dim, eps=LN_EPS)
        self.mlp = Mlp(dim, mlp_ratio, generator)

    def forward(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), h, w)
        return x + self.mlp(self.norm2(x))


class SwinPair(nn.Module):
    """A W-MSA block followed by an SW-MSA block (shift = window/2)."""

    def __init__(self, dim: int, heads: int, window: int, mlp_ratio: int = 4,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.regular = SwinBlock(dim, heads, window, 0, mlp_ratio, generator)
        self.shifted = SwinBlock(dim, heads, window, window // 2, mlp_ratio, generator)

    def forward(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        return self.shifted(self.regular(x, h, w), h, w)


class LocalChannelEnhance(nn.Module):
    """Adds a gated depthwise-conv bias to the token map.

    Tokens are unpatchified back to a [B, C, H, W] map. Expand with a 1x1
    projection, apply a 3x3 depthwise conv, reduce to C, gate each channel with
    sigmoid(FC(avgpool)), and add the result to the map.
    """

    def __init__(self, dim: int, patch: int, ratio: int = 4,
                 generator: torch.Generator | None = None):
        super().__init__()
        if dim % (patch * patch):
            raise ShapeError(f"token width {dim} not divisible by patch area")
        c = dim // (patch * patch)
        self.patch = patch
        self.expand = init_conv(nn.Conv2d(c, c * ratio, 1), generator)
        self.depthwise = init_conv(nn.Conv2d(c * ratio, c * ratio, 3, padding=1, groups=c * ratio), generator)
        self.reduce = init_conv(nn.Conv2d(c * ratio, c, 1), generator)
        self.gate = init_linear(nn.Linear(c, c), generator)

    def channel_weights(self, x_channel: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.gate(x_channel.mean(dim=(2, 3))))

    def forward(self, tokens: torch.Tensor, h: int, w: int) -> torch.Tensor:
        p = self.patch
        img = unpatchify(tokens, p, h * p, w * p)
        x_channel = self.reduce(self.depthwise(F.gelu(self.expand(img))))
        x_bias = x_channel * self.channel_weights(x_channel)[:, :, None, None]
        return patchify(img + x_bias, p)


class LCESTB(nn.Module):
    """Optional local-channel enhancement followed by a Swin pair."""

    def __init__(self, dim: int, patch: int, heads: int, window: int, use_lceb: bool = True,
                 lce_ratio: int = 4, mlp_ratio: int = 4, generator: torch.Generator | None = None):
        super().__init__()
        self.lce = LocalChannelEnhance(dim, patch, lce_ratio, generator) if use_lceb else None
        self.swin = SwinPair(dim, heads, window, mlp_ratio, generator)

    def forward(self, tokens: torch.Tensor, h: int, w: int) -> torch.Tensor:
        if self.lce is not None:
            tokens = self.lce(tokens, h, w)
        return self.swin(tokens, h, w)


class ViTBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=LN_EPS)
        self.attn = GlobalAttention(dim, heads, generator)
        self.norm2 = nn.LayerNorm(dim, eps=LN_EPS)
        self.mlp = Mlp(dim, mlp_ratio, generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


@lru_cache(maxsize=32)
def _dct_matrix(n: int) -> torch.Tensor:
    k = torch.arange(n, dtype=torch.float64)[:, None]
    i = torch.arange(n, dtype=torch.float64)[None, :]
    m = torch.cos(math.pi * (2 * i + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    m[0] /= math.sqrt(2.0)
    return m


def dct_matrix(n: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Orthonormal DCT-II matrix; row k is the k-th basis vector."""
    return _dct_matrix(n).to(dtype=dtype, device=device)


def dct_per_channel(tokens: torch.Tensor) -> torch.Tensor:
    """Orthonormal DCT-II along the token axis of [B, N, D], each channel independently."""
    m = dct_matrix(tokens.shape[1], tokens.dtype, tokens.device)
    return torch.einsum("kn,bnd->bkd", m, tokens)


def idct_per_channel(coeffs: torch.Tensor) -> torch.Tensor:
    m = dct_matrix(coeffs.shape[1], coeffs.dtype, coeffs.device)
    return torch.einsum("kn,bkd->bnd", m, coeffs)


class FrequencyEnhance(nn.Module):
    """Channel gate computed from the per-channel DCT spectrum of the tokens.

    The [N, D] spectrum is summarised per channel by mean |coefficient|, then
    FC + sigmoid gives one weight per channel.
    """

    def __init__(self, dim: int, generator: torch.Generator | None = None):
        super().__init__()
        self.fc = init_linear(nn.Linear(dim, dim), generator)

    def weights(self, tokens: torch.Tensor) -> torch.Tensor:
        spectrum = dct_per_channel(tokens).abs().mean(dim=1)
        return torch.sigmoid(self.fc(spectrum))

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return tokens * self.weights(tokens)[:, None, :]


class FETB(nn.Module):
    def __init__(self, dim: int, heads: int, depth: int = 2, use_feb: bool = True,
                 mlp_ratio: int = 4, generator: torch.Generator | None = None):
        super().__init__()
        self.blocks = nn.ModuleList(ViTBlock(dim, heads, mlp_ratio, generator) for _ in range(depth))
        self.feb = FrequencyEnhance(dim, generator) if use_feb else None

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        for blk in self.blocks:
            tokens = blk(tokens)
        if self.feb is not None:
            tokens = self.feb(tokens)
        return tokens
