"""Shared neural building blocks: explicit-mask attention and embeddings."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class MultiHeadAttention(nn.Module):
    """Multi-head attention with an explicit boolean mask.

    Masked positions get a score of -inf before the softmax, so their
    attention weight is exactly zero and masked values cannot leak into the
    output. Written out by hand (no fused kernels) to keep the arithmetic
    order fixed and the masking semantics auditable.
    """

    def __init__(self, d_model: int, n_heads: int, kv_dim: int | None = None):
        super().__init__()
        if d_model % n_heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        kv_dim = kv_dim or d_model
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(kv_dim, d_model)
        self.v_proj = nn.Linear(kv_dim, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def forward(
        self,
        query: torch.Tensor,
        kv: torch.Tensor,
        mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """query [B, Lq, d], kv [B, Lk, kv_dim], mask [B, Lq, Lk] bool (True = attend)."""
        b, lq, _ = query.shape
        lk = kv.shape[1]
        q = self.q_proj(query).view(b, lq, self.n_heads, self.d_head).transpose(1, 2)
        k = self.k_proj(kv).view(b, lk, self.n_heads, self.d_head).transpose(1, 2)
        v = self.v_proj(kv).view(b, lk, self.n_heads, self.d_head).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        if mask is not None:
            scores = scores.masked_fill(~mask.unsqueeze(1), float("-inf"))
        attn = F.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, lq, -1)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d_model, d_ff), nn.GELU(), nn.Linear(d_ff, d_model))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def sinusoidal_table(max_len: int, dim: int) -> torch.Tensor:
    """Fixed sine/cosine position table [max_len, dim]."""
    position = torch.arange(max_len, dtype=torch.float32).unsqueeze(1)
    half = dim // 2
    freq = torch.exp(torch.arange(half, dtype=torch.float32) * (-math.log(10000.0) / half))
    args = position * freq
    table = torch.zeros(max_len, dim)
    table[:, 0::2] = torch.sin(args)
    table[:, 1::2] = torch.cos(args)
    return table


def timestep_embedding(timesteps: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of diffusion timesteps [B] -> [B, dim]."""
    half = dim // 2
    freq = torch.exp(
        torch.arange(half, dtype=torch.float32, device=timesteps.device)
        * (-math.log(10000.0) / half)
    )
    args = timesteps.float().unsqueeze(1) * freq.unsqueeze(0)
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1).to(timesteps.device)
