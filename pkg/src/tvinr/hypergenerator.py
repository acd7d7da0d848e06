"""Hypernetwork producing the full weight set of the per-sample implicit network."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn
from torch.nn import functional as F


def activation(name: str):
    if name == "relu":
        return F.relu
    if name == "lrelu_01":
        return lambda x: F.leaky_relu(x, 0.1)
    if name == "gelu":
        return F.gelu
    raise ValueError(f"unknown activation {name!r}")


def _module_activation(name: str) -> nn.Module:
    return {"relu": nn.ReLU(), "lrelu_01": nn.LeakyReLU(0.1), "gelu": nn.GELU()}[name]


@dataclass(frozen=True)
class InrArchitecture:
    d_in: int
    hidden: tuple[int, ...]
    d_out: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if min((self.d_in, self.d_out) + self.hidden) < 1:
            raise ValueError("all widths must be >= 1")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.d_in,) + self.hidden + (self.d_out,)

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        w = self.widths
        return list(zip(w[:-1], w[1:]))

    @property
    def n_params(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.layer_shapes)


@dataclass
class InrParameters:
    """Batched INR weights: ``weights[i]`` is ``(B, fan_in, fan_out)``, ``biases[i]`` is ``(B, fan_out)``."""

    weights: list[torch.Tensor]
    biases: list[torch.Tensor]
    arch: InrArchitecture

    def flatten(self) -> torch.Tensor:
        """Layer-major layout: each layer's weight (row-major, ``fan_in x fan_out``) then its bias."""
        B = self.weights[0].shape[0]
        parts = []
        for W, b in zip(self.weights, self.biases):
            parts += [W.reshape(B, -1), b]
        return torch.cat(parts, dim=1)

    @classmethod
    def unflatten(cls, flat: torch.Tensor, arch: InrArchitecture) -> "InrParameters":
        if flat.ndim == 1:
            flat = flat.unsqueeze(0)
        if flat.shape[-1] != arch.n_params:
            raise ValueError(f"expected {arch.n_params} parameters, got {flat.shape[-1]}")
        B = flat.shape[0]
        weights, biases, pos = [], [], 0
        for fi, fo in arch.layer_shapes:
            weights.append(flat[:, pos : pos + fi * fo].reshape(B, fi, fo))
            pos += fi * fo
            biases.append(flat[:, pos : pos + fo])
            pos += fo
        return cls(weights, biases, arch)


def mlp(widths: Sequence[int], act: str) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(widths) - 2:
            layers.append(_module_activation(act))
    return nn.Sequential(*layers)


class CovariateEncoder(nn.Module):
    """Feed-forward map of static covariates to ``dim_c`` features; empty when there are none."""

    def __init__(self, k: int, layers: Sequence[int] = (8, 8), dim_c: int = 4, act: str = "gelu"):
        super().__init__()
        self.k = k
        self.dim_c = dim_c if k > 0 else 0
        self.net = mlp([k, *layers, dim_c], act) if k > 0 else None

    def forward(self, c: torch.Tensor) -> torch.Tensor:
        if c.shape[-1] != self.k:
            raise ValueError(f"expected {self.k} covariates, got {c.shape[-1]}")
        if self.net is None:
            return c[..., :0]
        return self.net(c)


class HyperNetwork(nn.Module):
    """MLP ``[z ; c_bar] -> theta``.

    The output layer is initialised so generated weights start at the scale of
    a standard fan-in initialised MLP: the bias holds one such MLP and the
    weight rows for INR layer ``i`` have std ``1/sqrt(hidden * fan_in_i)``.
    """

    def __init__(self, d_in: int, hidden: Sequence[int], arch: InrArchitecture, act: str = "gelu"):
        super().__init__()
        self.arch = arch
        self.net = mlp([d_in, *hidden, arch.n_params], act)
        last = self.net[-1]
        h = last.in_features
        with torch.no_grad():
            pos = 0
            for fi, fo in arch.layer_shapes:
                n = fi * fo + fo
                bound = 1.0 / math.sqrt(fi)
                last.weight[pos : pos + n].normal_(0.0, 1.0 / math.sqrt(h * fi))
                last.bias[pos : pos + n].uniform_(-bound, bound)
                pos += n

    def forward(self, h_dec: torch.Tensor) -> InrParameters:
        return InrParameters.unflatten(self.net(h_dec), self.arch)


def generate_params(
    z: torch.Tensor, c_bar: torch.Tensor, hyper: HyperNetwork, arch: InrArchitecture | None = None
) -> InrParameters:
    if arch is not None and arch != hyper.arch:
        raise ValueError("hypernetwork was built for a different INR architecture")
    h_dec = torch.cat([z, c_bar], dim=-1)
    if h_dec.shape[-1] != hyper.net[0].in_features:
        raise ValueError(f"hypernetwork expects input width {hyper.net[0].in_features}, got {h_dec.shape[-1]}")
    return hyper(h_dec)
