"""Per-stamp input embeddings: Fourier features of (time, channel) coordinates
plus a linear embedding of the zero-filled values concatenated with the mask."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn


class FourierBasis(nn.Module):
    """Random Fourier features of 2-d (time, channel) coordinates, projected to ``d_model``.

    The frequency matrix is drawn once from N(0, sigma^2) with its own seed
    and stored as a buffer; only the projection is trained.
    """

    def __init__(self, m: int, sigma: float, d_model: int, seed: int = 0, coord_dim: int = 2):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.register_buffer("B", torch.randn(m, coord_dim, generator=gen, dtype=torch.float64) * sigma)
        self.proj = nn.Linear(2 * m, d_model)
        self.m = m
        self.sigma = sigma

    def raw(self, coords: torch.Tensor) -> torch.Tensor:
        """``[cos(2 pi B x), sin(2 pi B x)]`` for coordinates of shape ``(..., coord_dim)``."""
        f = 2 * math.pi * coords @ self.B.to(coords.dtype).T
        return torch.cat([f.cos(), f.sin()], dim=-1)

    def forward(self, coords: torch.Tensor) -> torch.Tensor:
        return self.proj(self.raw(coords))


def expand_channels(stamps: torch.Tensor, d: int) -> torch.Tensor:
    """Pair each stamp with each normalized channel index: ``(..., L) -> (..., L, d, 2)``."""
    if d < 1:
        raise ValueError("d must be >= 1")
    chan = torch.arange(d, dtype=stamps.dtype, device=stamps.device) / max(d - 1, 1)
    t = stamps.unsqueeze(-1).expand(*stamps.shape, d)
    c = chan.expand(*stamps.shape, d)
    return torch.stack([t, c], dim=-1)


def fourier_features(coords: torch.Tensor, basis: FourierBasis) -> torch.Tensor:
    return basis(coords)


def temporal_embedding(stamps: torch.Tensor, d: int, basis: FourierBasis) -> torch.Tensor:
    """Encoder-side temporal embedding: channel-mean of the per-cell Fourier vectors."""
    raw = basis.raw(expand_channels(stamps, d)).mean(dim=-2)
    return basis.proj(raw)


def query_encoding(stamps: torch.Tensor, basis: FourierBasis) -> torch.Tensor:
    """Generator input: Fourier encoding of ``(t, 0)`` for every query stamp."""
    coords = torch.stack([stamps, torch.zeros_like(stamps)], dim=-1)
    return basis(coords)


class SpatialEmbedding(nn.Module):
    """Affine map of ``[zero-filled values ; mask]`` (width ``2d``) to ``d_model``."""

    def __init__(self, d: int, d_model: int):
        super().__init__()
        self.linear = nn.Linear(2 * d, d_model)

    def forward(self, values: torch.Tensor, keep: torch.Tensor) -> torch.Tensor:
        filled = torch.where(keep, values, torch.zeros((), dtype=values.dtype))
        return self.linear(torch.cat([filled, keep.to(values.dtype)], dim=-1))


@dataclass
class EmbeddingBatch:
    E: torch.Tensor  # (B, L, d_model)
    valid: torch.Tensor  # (B, L) bool: position has at least one kept channel


def combine(spatial: torch.Tensor, temporal: torch.Tensor, keep: torch.Tensor) -> EmbeddingBatch:
    if spatial.shape != temporal.shape:
        raise ValueError(f"shape mismatch: {tuple(spatial.shape)} vs {tuple(temporal.shape)}")
    return EmbeddingBatch(spatial + temporal, keep.any(dim=-1))
