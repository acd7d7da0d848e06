"""The full model: embeddings, prior/posterior encoders, covariate encoder, hypernetwork."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .config import TrainConfig
from .dataset import Cell, TimeSeriesSample
from .embedding import FourierBasis, temporal_embedding
from .encoder import Encoder, GaussianLatent
from .hypergenerator import CovariateEncoder, HyperNetwork, InrArchitecture, InrParameters, generate_params
from .inr import predict_series


def torch_dtype(precision: int) -> torch.dtype:
    return torch.float64 if precision == 64 else torch.float32


@dataclass
class Batch:
    stamps: torch.Tensor  # (B, L)
    values: torch.Tensor  # (B, L, d); zero at absent cells
    state: torch.Tensor  # (B, L, d) int8 cell states
    covariates: torch.Tensor  # (B, k)

    @property
    def observed(self) -> torch.Tensor:
        return self.state == Cell.OBSERVED

    @property
    def masked(self) -> torch.Tensor:
        return self.state == Cell.MASKED

    @property
    def available(self) -> torch.Tensor:
        return self.state != Cell.ABSENT

    def __len__(self) -> int:
        return self.stamps.shape[0]


def collate(samples: Sequence[TimeSeriesSample], dtype: torch.dtype = torch.float64) -> Batch:
    """Stack samples, padding shorter ones with absent rows."""
    if not samples:
        raise ValueError("empty batch")
    B, L = len(samples), max(s.length for s in samples)
    d, k = samples[0].n_channels, len(samples[0].covariates)
    stamps = np.zeros((B, L))
    values = np.zeros((B, L, d))
    state = np.full((B, L, d), Cell.ABSENT, dtype=np.int8)
    cov = np.zeros((B, k))
    for i, s in enumerate(samples):
        if s.n_channels != d or len(s.covariates) != k:
            raise ValueError("samples in a batch must share channel and covariate counts")
        n = s.length
        stamps[i, :n] = s.stamps
        values[i, :n] = np.where(s.available, s.features, 0.0)
        state[i, :n] = s.mask
        cov[i] = s.covariates
    return Batch(
        torch.from_numpy(stamps).to(dtype),
        torch.from_numpy(values).to(dtype),
        torch.from_numpy(state),
        torch.from_numpy(cov).to(dtype),
    )


class TVINR(nn.Module):
    def __init__(self, config: TrainConfig):
        super().__init__()
        c = config
        self.config = c
        self.arch = InrArchitecture(c.d_model, c.generator_layers, c.n_channels, c.generator_activation)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(c.seed)
            self.basis = FourierBasis(c.fourier_m, c.fourier_sigma, c.d_model, seed=c.seed + 7919)
            enc_kw = dict(dropout=c.dropout, causal=c.causal)
            self.prior = Encoder(c.n_channels, c.d_model, c.heads, c.layers, c.dim_z, "prior", **enc_kw)
            self.posterior = Encoder(c.n_channels, c.d_model, c.heads, c.layers, c.dim_z, "posterior", **enc_kw)
            self.covariates = CovariateEncoder(c.n_covariates, c.covariate_layers, c.dim_c, c.hyper_activation)
            self.hyper = HyperNetwork(c.dim_z + self.covariates.dim_c, c.hyper_layers, self.arch, c.hyper_activation)
        self.to(torch_dtype(c.precision))

    @property
    def dtype(self) -> torch.dtype:
        return self.basis.proj.weight.dtype

    def latent(self, batch: Batch, role: str) -> GaussianLatent:
        """``prior`` sees observed cells only; ``posterior`` sees every available cell."""
        keep = batch.observed if role == "prior" else batch.available
        temporal = temporal_embedding(batch.stamps, batch.values.shape[-1], self.basis)
        encoder = self.prior if role == "prior" else self.posterior
        return encoder(batch.values, keep, temporal)

    def inr_params(self, z: torch.Tensor, covariates: torch.Tensor) -> InrParameters:
        return generate_params(z, self.covariates(covariates), self.hyper)

    def decode(self, z: torch.Tensor, covariates: torch.Tensor, stamps: torch.Tensor) -> torch.Tensor:
        return predict_series(self.inr_params(z, covariates), stamps, self.basis)

    def param_groups(self) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = {}
        for name, _ in self.named_parameters():
            groups.setdefault(name.split(".")[0], []).append(name)
        return groups
