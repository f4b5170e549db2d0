"""Shared per-view 2D feature extractor.

A U-shaped CNN/attention hybrid: three strided conv stages down to 1/8
resolution, a stack of token self-attention blocks on the 1/8 grid, then a
cascaded upsampler with skip connections. The four decoder outputs form the
feature pyramid, coarsest first: (256 ch @ 1/8, 128 @ 1/4, 64 @ 1/2, 16 @ 1/1).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

PYRAMID_CHANNELS = (256, 128, 64, 16)


@dataclass
class EncoderConfig:
    image_size: int = 256
    widths: tuple[int, int, int, int] = (16, 64, 128, 256)
    blocks: int = 4
    heads: int = 4
    token_dim: int = 256
    mlp_dim: int = 512
    enforce_size: bool = True


def _norm(channels: int) -> nn.GroupNorm:
    groups = min(8, channels)
    while channels % groups:
        groups -= 1
    return nn.GroupNorm(groups, channels)


class ConvBlock(nn.Sequential):
    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__(
            nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False),
            _norm(c_out),
            nn.ReLU(inplace=True),
            nn.Conv2d(c_out, c_out, 3, padding=1, bias=False),
            _norm(c_out),
            nn.ReLU(inplace=True),
        )


class MultiHeadSelfAttention(nn.Module):
    """Scaled dot-product self-attention over a token sequence (B, T, D)."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"token dim {dim} is not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.last_attention = None

    def forward(self, x, keep_attention: bool = False):
        b, t, d = x.shape
        h = self.heads
        qkv = self.qkv(x).reshape(b, t, 3, h, d // h).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d // h), dim=-1)
        self.last_attention = attn.detach() if keep_attention else None
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out)


class TokenBlock(nn.Module):
    """Pre-norm transformer block: x + MHSA(LN x), then x + MLP(LN x)."""

    def __init__(self, dim: int, heads: int, mlp_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_dim), nn.GELU(), nn.Linear(mlp_dim, dim))

    def forward(self, x, keep_attention: bool = False):
        x = x + self.attn(self.norm1(x), keep_attention)
        return x + self.mlp(self.norm2(x))


def token_self_attention(tokens: torch.Tensor, heads: int, block: TokenBlock | None = None):
    """Apply one self-attention block to a (T, D) token matrix.

    A fresh block is built when none is given.
    """
    t, d = tokens.shape
    if d % heads:
        raise ValueError(f"token dim {d} is not divisible by {heads} heads")
    if block is None:
        block = TokenBlock(d, heads, 2 * d).to(tokens.dtype)
    return block(tokens[None])[0]


class DecoderBlock(nn.Module):
    def __init__(self, c_in: int, c_skip: int, c_out: int):
        super().__init__()
        self.conv = ConvBlock(c_in + c_skip, c_out)

    def forward(self, x, skip):
        x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        return self.conv(torch.cat([x, skip], dim=1))


class HybridEncoder(nn.Module):
    """Maps (B, 1, H, W) images to a list of four feature maps."""

    def __init__(self, cfg: EncoderConfig | None = None):
        super().__init__()
        cfg = cfg or EncoderConfig()
        self.cfg = cfg
        w0, w1, w2, w3 = cfg.widths
        self.stem = ConvBlock(1, w0)
        self.down1 = ConvBlock(w0, w1, stride=2)
        self.down2 = ConvBlock(w1, w2, stride=2)
        self.down3 = ConvBlock(w2, w3, stride=2)
        self.embed = nn.Conv2d(w3, cfg.token_dim, 1)
        grid = cfg.image_size // 8
        self.pos = nn.Parameter(torch.zeros(1, cfg.token_dim, grid, grid))
        self.blocks = nn.ModuleList(
            TokenBlock(cfg.token_dim, cfg.heads, cfg.mlp_dim) for _ in range(cfg.blocks))
        self.norm = nn.LayerNorm(cfg.token_dim)
        c1, c2, c3, c4 = PYRAMID_CHANNELS
        self.bridge = nn.Sequential(
            nn.Conv2d(cfg.token_dim, c1, 3, padding=1, bias=False), _norm(c1), nn.ReLU(inplace=True))
        self.up2 = DecoderBlock(c1, w2, c2)
        self.up3 = DecoderBlock(c2, w1, c3)
        self.up4 = DecoderBlock(c3, w0, c4)
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Linear):
                nn.init.normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
        nn.init.normal_(self.pos, std=0.02)

    def _pos_embedding(self, h, w):
        if self.pos.shape[-2:] == (h, w):
            return self.pos
        return F.interpolate(self.pos, size=(h, w), mode="bilinear", align_corners=False)

    def forward(self, images):
        if images.ndim != 4 or images.shape[1] != 1:
            raise ValueError(f"expected (B, 1, H, W) images, got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        if h != w or h % 8:
            raise ValueError(f"images must be square with side divisible by 8, got {h}x{w}")
        if self.cfg.enforce_size and h != self.cfg.image_size:
            raise ValueError(f"encoder configured for {self.cfg.image_size}px input, got {h}px")
        s0 = self.stem(images)
        s1 = self.down1(s0)
        s2 = self.down2(s1)
        x = self.embed(self.down3(s2))
        b, d, gh, gw = x.shape
        x = x + self._pos_embedding(gh, gw)
        tokens = x.flatten(2).transpose(1, 2)
        for blk in self.blocks:
            tokens = blk(tokens)
        x = self.norm(tokens).transpose(1, 2).reshape(b, d, gh, gw)
        f1 = self.bridge(x)
        f2 = self.up2(f1, s2)
        f3 = self.up3(f2, s1)
        f4 = self.up4(f3, s0)
        return [f1, f2, f3, f4]


def encode_views(encoder: HybridEncoder, images: torch.Tensor):
    """Encode (M, H, W) or (M, 1, H, W) views with one shared encoder."""
    if images.ndim == 3:
        images = images[:, None]
    return encoder(images)
