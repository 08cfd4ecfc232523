"""Attention stack and mask encoder plus small functional op surfaces.

All sequence modules take batch-first float tensors (batch, time, dim) and
raise DimensionError on rank or width mismatches and on empty sequences.
"""

from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F

from sketchchat.errors import ConfigError, DimensionError


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    return F.linear(x, weight, bias)


def embedding_lookup(table: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    if table.dim() != 2:
        raise DimensionError(f"embedding table must be 2-d, got {tuple(table.shape)}")
    return F.embedding(ids, table)


def layer_norm(
    x: torch.Tensor,
    gamma: torch.Tensor,
    beta: torch.Tensor,
    eps: float = 1e-5,
) -> torch.Tensor:
    return F.layer_norm(x, gamma.shape, gamma, beta, eps)


def relu(x: torch.Tensor) -> torch.Tensor:
    return F.relu(x)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def seeded_init_(module: nn.Module, generator: torch.Generator) -> nn.Module:
    """Reinitialize weights with fan-in scaled uniform draws from the given
    generator; biases go to zero, norm gains stay at one."""
    for name, param in module.named_parameters():
        with torch.no_grad():
            if param.dim() >= 2:
                fan_in = 1
                for d in param.shape[1:]:
                    fan_in *= d
                bound = 1.0 / math.sqrt(fan_in)
                param.uniform_(-bound, bound, generator=generator)
            elif "bias" in name:
                param.zero_()
    return module


def _check_seq(x: torch.Tensor, dim: int) -> None:
    if x.dim() != 3:
        raise DimensionError(f"expected (batch, time, dim), got rank {x.dim()}")
    if x.shape[1] == 0:
        raise DimensionError("zero-length sequence")
    if x.shape[2] != dim:
        raise DimensionError(f"expected width {dim}, got {x.shape[2]}")


class MaskedSelfAttention(nn.Module):
    """Multi-head self-attention under a causal mask.

    Returns both the mixed values and the per-head attention weights so
    callers can surface which positions each step looked at.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ConfigError(f"heads ({heads}) must divide model dim ({dim})")
        self.dim = dim
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        _check_seq(x, self.dim)
        b, t, d = x.shape
        head_dim = d // self.heads
        q, k, v = self.qkv(x).split(d, dim=2)
        q = q.view(b, t, self.heads, head_dim).transpose(1, 2)
        k = k.view(b, t, self.heads, head_dim).transpose(1, 2)
        v = v.view(b, t, self.heads, head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(head_dim)
        future = torch.triu(torch.ones(t, t, dtype=torch.bool, device=x.device), diagonal=1)
        scores = scores.masked_fill(future, float("-inf"))
        weights = F.softmax(scores, dim=-1)
        mixed = (weights @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(mixed), weights


class TransformerBlock(nn.Module):
    """Pre-norm attention block: residual attention then residual MLP."""

    def __init__(self, dim: int, heads: int, ff_dim: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = MaskedSelfAttention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_dim), nn.GELU(), nn.Linear(ff_dim, dim))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mixed, weights = self.attn(self.ln1(x))
        x = x + mixed
        x = x + self.ff(self.ln2(x))
        return x, weights


class TransformerStack(nn.Module):
    """Stack of causal blocks with a final norm; keeps every layer's
    attention weights."""

    def __init__(self, dim: int, heads: int, ff_dim: int, layers: int):
        super().__init__()
        if layers < 1:
            raise ConfigError("need at least one layer")
        self.dim = dim
        self.blocks = nn.ModuleList(TransformerBlock(dim, heads, ff_dim) for _ in range(layers))
        self.ln_out = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        _check_seq(x, self.dim)
        all_weights = []
        for block in self.blocks:
            x, weights = block(x)
            all_weights.append(weights)
        return self.ln_out(x), all_weights


class ConvMaskEncoder(nn.Module):
    """Three stride-2 convolutions over a square occupancy mask, flattened
    into a fixed-width embedding."""

    def __init__(self, input_size: int = 64, embed_dim: int = 64, channels: tuple[int, int, int] = (4, 8, 8)):
        super().__init__()
        if input_size % 8 != 0:
            raise ConfigError(f"input size must be divisible by 8, got {input_size}")
        self.input_size = input_size
        c1, c2, c3 = channels
        self.conv = nn.Sequential(
            nn.Conv2d(1, c1, kernel_size=3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(c1, c2, kernel_size=3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(c2, c3, kernel_size=3, stride=2, padding=1),
            nn.GELU(),
        )
        side = input_size // 8
        self.out = nn.Linear(c3 * side * side, embed_dim)

    def forward(self, mask: torch.Tensor) -> torch.Tensor:
        if mask.dim() == 2:
            mask = mask.unsqueeze(0)
        if mask.dim() != 3 or mask.shape[-1] != self.input_size or mask.shape[-2] != self.input_size:
            raise DimensionError(
                f"expected (batch, {self.input_size}, {self.input_size}), got {tuple(mask.shape)}"
            )
        h = self.conv(mask.unsqueeze(1))
        return self.out(h.flatten(1))
