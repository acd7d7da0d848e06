"""Masked transformer encoders mapping an embedded series to a diagonal Gaussian over z."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .embedding import EmbeddingBatch, SpatialEmbedding, combine

SIGMA_FLOOR = 1e-4


class EmptyContextError(ValueError):
    """Raised when a sample has no position the encoder may attend to."""


@dataclass
class GaussianLatent:
    mu: torch.Tensor
    sigma: torch.Tensor

    def sample(self, eps: torch.Tensor) -> torch.Tensor:
        return self.mu + self.sigma * eps


def kl_to_prior(q: GaussianLatent, p: GaussianLatent) -> torch.Tensor:
    """KL(q || p) between diagonal Gaussians, summed over the last axis."""
    if q.mu.shape != p.mu.shape or q.sigma.shape != p.sigma.shape:
        raise ValueError(f"latent shape mismatch: {tuple(q.mu.shape)} vs {tuple(p.mu.shape)}")
    r = q.sigma / p.sigma
    # r^2 - 1 - 2 log r >= 0; clamp rounding noise around r = 1
    spread = (r**2 - 1 - 2 * torch.log(r)).clamp_min(0)
    kl = 0.5 * spread + (q.mu - p.mu) ** 2 / (2 * p.sigma**2)
    return kl.sum(dim=-1)


class MaskedSelfAttention(nn.Module):
    def __init__(self, d_model: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if d_model % heads:
            raise ValueError(f"d_model ({d_model}) must be divisible by heads ({heads})")
        self.heads = heads
        self.q = nn.Linear(d_model, d_model)
        # a key bias shifts every score of a query equally, so softmax ignores it
        self.k = nn.Linear(d_model, d_model, bias=False)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)
        self.dropout_p = dropout

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        B, L, D = x.shape
        dh = D // self.heads
        q, k, v = (lin(x).view(B, L, self.heads, dh).transpose(1, 2) for lin in (self.q, self.k, self.v))
        # callers compact valid positions to the front, so every query row keeps
        # at least one allowed key and the softmax never sees an all-masked row
        h = F.scaled_dot_product_attention(q, k, v, attn_mask=allowed, dropout_p=self.dropout_p if self.training else 0.0)
        h = h.transpose(1, 2).reshape(B, L, D)
        return self.out(h)


class TransformerBlock(nn.Module):
    """Pre-norm block: attention then a 4x-wide GELU feed-forward, both residual."""

    def __init__(self, d_model: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = MaskedSelfAttention(d_model, heads, dropout)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(
            nn.Linear(d_model, 4 * d_model), nn.GELU(), nn.Dropout(dropout), nn.Linear(4 * d_model, d_model)
        )
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        x = x + self.dropout(self.attn(self.norm1(x), allowed))
        return x + self.dropout(self.ff(self.norm2(x)))


def compact(E: torch.Tensor, valid: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Move valid positions to the front (order preserved) and drop trailing invalid columns."""
    counts = valid.sum(dim=1)
    if bool((counts == 0).any()):
        raise EmptyContextError("sample has no valid position to encode")
    order = torch.sort((~valid).to(torch.int8), dim=1, stable=True).indices
    n = int(counts.max())
    idx = order[:, :n]
    Ec = torch.gather(E, 1, idx.unsqueeze(-1).expand(-1, -1, E.shape[-1]))
    vc = torch.arange(n, device=E.device).unsqueeze(0) < counts.unsqueeze(1)
    return Ec, vc


class Encoder(nn.Module):
    """Transformer encoder producing ``GaussianLatent``; ``role`` is 'prior' or 'posterior'."""

    def __init__(
        self,
        d: int,
        d_model: int,
        heads: int,
        layers: int,
        dim_z: int,
        role: str,
        dropout: float = 0.0,
        causal: bool = False,
    ):
        super().__init__()
        self.role = role
        self.causal = causal
        self.spatial = SpatialEmbedding(d, d_model)
        self.blocks = nn.ModuleList(TransformerBlock(d_model, heads, dropout) for _ in range(layers))
        self.norm = nn.LayerNorm(d_model)
        self.head = nn.Sequential(nn.Linear(d_model, d_model), nn.GELU(), nn.Linear(d_model, 2 * dim_z))

    def encode(self, batch: EmbeddingBatch) -> GaussianLatent:
        E, valid = compact(batch.E, batch.valid)
        L = E.shape[1]
        allowed = valid[:, None, None, :]
        if self.causal:
            allowed = allowed & torch.ones(L, L, dtype=torch.bool, device=E.device).tril()
        h = E
        for block in self.blocks:
            h = block(h, allowed)
        h = self.norm(h)
        keep = valid.unsqueeze(-1)
        pooled = torch.where(keep, h, torch.zeros((), dtype=h.dtype)).sum(dim=1) / valid.sum(
            dim=1, keepdim=True
        ).to(h.dtype)
        mu, s = self.head(pooled).chunk(2, dim=-1)
        return GaussianLatent(mu, F.softplus(s) + SIGMA_FLOOR)

    def forward(self, values: torch.Tensor, keep: torch.Tensor, temporal: torch.Tensor) -> GaussianLatent:
        return self.encode(combine(self.spatial(values, keep), temporal, keep))
