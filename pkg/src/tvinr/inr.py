"""Evaluation of generated implicit networks at arbitrary time stamps."""

from __future__ import annotations

import torch

from .embedding import FourierBasis, query_encoding
from .hypergenerator import InrParameters, activation


def inr_forward(theta: InrParameters, e: torch.Tensor) -> torch.Tensor:
    """Run each sample's MLP on its encoded coordinates.

    ``e`` is ``(B, Q, d_in)``; a single coordinate ``(d_in,)`` or an unbatched
    ``(Q, d_in)`` block is accepted when ``theta`` holds one network.
    """
    squeeze = 0
    if e.ndim == 1:
        e, squeeze = e[None, None], 2
    elif e.ndim == 2:
        e, squeeze = e[None], 1
    B = theta.weights[0].shape[0]
    if e.shape[0] != B or e.shape[-1] != theta.arch.d_in:
        raise ValueError(
            f"coordinate encoding {tuple(e.shape)} does not fit {B} networks with input width {theta.arch.d_in}"
        )
    act = activation(theta.arch.activation)
    h = e
    last = len(theta.weights) - 1
    for i, (W, b) in enumerate(zip(theta.weights, theta.biases)):
        h = torch.baddbmm(b.unsqueeze(1), h, W)
        if i < last:
            h = act(h)
    if squeeze == 2:
        return h[0, 0]
    if squeeze == 1:
        return h[0]
    return h


def predict_series(theta: InrParameters, stamps: torch.Tensor, basis: FourierBasis) -> torch.Tensor:
    """Point predictions ``(B, Q, d)`` at query stamps ``(B, Q)`` (mean of the unit-variance likelihood)."""
    if stamps.ndim == 1:
        stamps = stamps.unsqueeze(0)
    if stamps.shape[-1] == 0:
        return stamps.new_zeros(*stamps.shape, theta.arch.d_out)
    return inr_forward(theta, query_encoding(stamps, basis))
