"""Conformer blocks over real frame sequences of shape [batch, time, model_dim].

Each block is the macaron stack::

    x1 = x  + 0.5 * FFN(x)
    x2 = x1 + MHSA(x1)
    x3 = x2 + Conv(x2)
    y  = LayerNorm(x3 + 0.5 * FFN(x3))

No positional encoding is added; the depthwise convolution carries local order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigMismatch, ShapeError


@dataclass(frozen=True)
class ConformerConfig:
    model_dim: int = 128
    num_heads: int = 4
    ffn_expansion: int = 4
    conv_kernel: int = 15
    num_blocks: int = 2
    dropout: float = 0.0

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ConfigMismatch(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.conv_kernel % 2 == 0:
            raise ConfigMismatch(f"conv_kernel must be odd, got {self.conv_kernel}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigMismatch("dropout must lie in [0, 1)")


def _check_dim(x, dim):
    if x.dim() != 3 or x.shape[-1] != dim:
        raise ShapeError(f"expected [batch, time, {dim}], got {tuple(x.shape)}")


class HalfStepFFN(nn.Module):
    """x + 0.5 * (LN -> Linear -> swish -> dropout -> Linear -> dropout)(x)."""

    def __init__(self, dim, expansion=4, dropout=0.0):
        super().__init__()
        self.dim = dim
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, expansion * dim)
        self.fc2 = nn.Linear(expansion * dim, dim)
        self.dropout = nn.Dropout(dropout)

    def branch(self, x):
        h = self.dropout(F.silu(self.fc1(self.norm(x))))
        return self.dropout(self.fc2(h))

    def forward(self, x):
        _check_dim(x, self.dim)
        return x + 0.5 * self.branch(x)


class MultiHeadSelfAttention(nn.Module):
    """Pre-norm multi-head self-attention with residual."""

    def __init__(self, dim, num_heads, dropout=0.0):
        super().__init__()
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.norm = nn.LayerNorm(dim)
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def _split(self, t):
        b, n, _ = t.shape
        return t.view(b, n, self.num_heads, self.head_dim).transpose(1, 2)

    def attention(self, x):
        """Returns (attention weights [B, H, T, T], per-head values [B, H, T, d])."""
        h = self.norm(x)
        q, k, v = self._split(self.q(h)), self._split(self.k(h)), self._split(self.v(h))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        return torch.softmax(scores, dim=-1), v

    def branch(self, x):
        weights, v = self.attention(x)
        ctx = (self.dropout(weights) @ v).transpose(1, 2).reshape(x.shape)
        return self.dropout(self.out(ctx))

    def forward(self, x):
        _check_dim(x, self.dim)
        return x + self.branch(x)


class ConvModule(nn.Module):
    def __init__(self, dim, kernel=15, dropout=0.0):
        super().__init__()
        self.dim = dim
        self.norm = nn.LayerNorm(dim)
        self.pointwise_in = nn.Linear(dim, 2 * dim)
        self.depthwise = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=dim)
        self.bn = nn.BatchNorm1d(dim)
        self.pointwise_out = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def branch(self, x):
        h = F.glu(self.pointwise_in(self.norm(x)), dim=-1)
        h = self.depthwise(h.transpose(1, 2))
        h = F.silu(self.bn(h)).transpose(1, 2)
        return self.dropout(self.pointwise_out(h))

    def forward(self, x):
        _check_dim(x, self.dim)
        return x + self.branch(x)


class ConformerBlock(nn.Module):
    def __init__(self, cfg: ConformerConfig):
        super().__init__()
        d = cfg.model_dim
        self.ffn1 = HalfStepFFN(d, cfg.ffn_expansion, cfg.dropout)
        self.mhsa = MultiHeadSelfAttention(d, cfg.num_heads, cfg.dropout)
        self.conv = ConvModule(d, cfg.conv_kernel, cfg.dropout)
        self.ffn2 = HalfStepFFN(d, cfg.ffn_expansion, cfg.dropout)
        self.norm = nn.LayerNorm(d)

    def forward(self, x):
        x = self.ffn1(x)
        x = self.mhsa(x)
        x = self.conv(x)
        return self.norm(self.ffn2(x))

    def zero_branches(self):
        """Zero every residual branch's output projection (block reduces to LayerNorm)."""
        with torch.no_grad():
            for lin in (self.ffn1.fc2, self.mhsa.out, self.conv.pointwise_out, self.ffn2.fc2):
                lin.weight.zero_()
                lin.bias.zero_()


class Conformer(nn.Module):
    def __init__(self, cfg: ConformerConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList(ConformerBlock(cfg) for _ in range(cfg.num_blocks))

    def forward(self, x):
        _check_dim(x, self.cfg.model_dim)
        for block in self.blocks:
            x = block(x)
        return x
