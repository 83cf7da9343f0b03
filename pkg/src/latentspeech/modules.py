"""Shared neural building blocks: transformer stacks and length regulation."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def sinusoidal_positions(length: int, dim: int, device=None, dtype=torch.float32) -> torch.Tensor:
    """Standard fixed position encoding, shape (length, dim)."""
    position = torch.arange(length, device=device, dtype=dtype).unsqueeze(1)
    half = torch.arange(0, dim, 2, device=device, dtype=dtype)
    freq = torch.exp(-math.log(10000.0) * half / dim)
    enc = torch.zeros(length, dim, device=device, dtype=dtype)
    enc[:, 0::2] = torch.sin(position * freq)
    enc[:, 1::2] = torch.cos(position * freq[: (dim - dim // 2)])
    return enc


class ConvFeedForward(nn.Module):
    """Two same-padded 1d convolutions with a ReLU, time axis preserved."""

    def __init__(self, d_model: int, filter_size: int, kernel: int, dropout: float):
        super().__init__()
        pad = kernel // 2
        self.conv1 = nn.Conv1d(d_model, filter_size, kernel, padding=pad)
        self.conv2 = nn.Conv1d(filter_size, d_model, kernel, padding=pad)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # (B, T, D) -> conv over T -> (B, T, D)
        y = x.transpose(1, 2)
        y = self.conv2(self.dropout(F.relu(self.conv1(y))))
        return y.transpose(1, 2)


class TransformerBlock(nn.Module):
    """Self-attention plus convolutional feed-forward, post-norm residuals."""

    def __init__(self, d_model: int, n_heads: int, filter_size: int, kernel: int, dropout: float):
        super().__init__()
        self.attention = nn.MultiheadAttention(d_model, n_heads, dropout=dropout, batch_first=True)
        self.feed_forward = ConvFeedForward(d_model, filter_size, kernel, dropout)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """mask: (B, T) bool, True on valid steps."""
        key_padding = None if mask is None else ~mask
        attn, _ = self.attention(x, x, x, key_padding_mask=key_padding, need_weights=False)
        x = self.norm1(x + self.dropout(attn))
        x = self.norm2(x + self.dropout(self.feed_forward(x)))
        if mask is not None:
            x = x * mask.unsqueeze(-1)
        return x


class TransformerStack(nn.Module):
    """Position encoding plus a pile of TransformerBlocks."""

    def __init__(
        self,
        n_layers: int,
        d_model: int,
        n_heads: int,
        filter_size: int,
        kernel: int,
        dropout: float,
    ):
        super().__init__()
        self.d_model = d_model
        self.blocks = nn.ModuleList(
            TransformerBlock(d_model, n_heads, filter_size, kernel, dropout)
            for _ in range(n_layers)
        )
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        positions = sinusoidal_positions(x.shape[1], self.d_model, device=x.device, dtype=x.dtype)
        x = self.dropout(x + positions.unsqueeze(0))
        for block in self.blocks:
            x = block(x, mask)
        return x


def length_regulate(per_phoneme: torch.Tensor, durations: torch.Tensor) -> torch.Tensor:
    """Repeat row i of (N, D) input durations[i] times; output is (sum(d), D).

    Zero-duration rows drop out.
    """
    if durations.min() < 0:
        raise ValueError("negative duration in length regulation")
    return torch.repeat_interleave(per_phoneme, durations, dim=0)


def length_regulate_batch(
    per_phoneme: torch.Tensor, durations: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched length regulation with padding.

    per_phoneme: (B, N, D); durations: (B, N) non-negative ints (0 on pad).
    Returns frames (B, M_max, D) and a (B, M_max) bool mask.
    """
    if durations.min() < 0:
        raise ValueError("negative duration in length regulation")
    lengths = durations.sum(dim=1)
    m_max = int(lengths.max().item())
    batch, _, dim = per_phoneme.shape
    out = per_phoneme.new_zeros(batch, m_max, dim)
    mask = torch.zeros(batch, m_max, dtype=torch.bool, device=per_phoneme.device)
    for b in range(batch):
        m = int(lengths[b].item())
        out[b, :m] = torch.repeat_interleave(per_phoneme[b], durations[b], dim=0)
        mask[b, :m] = True
    return out, mask
