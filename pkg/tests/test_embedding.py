import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tvinr.embedding import (
    FourierBasis,
    SpatialEmbedding,
    combine,
    expand_channels,
    fourier_features,
    query_encoding,
    temporal_embedding,
)


def test_raw_features_at_origin():
    basis = FourierBasis(16, 2.0, 8, seed=0)
    raw = basis.raw(torch.zeros(2))
    np.testing.assert_array_equal(raw.numpy(), np.r_[np.ones(16), np.zeros(16)])


def test_fourier_features_deterministic_for_seed():
    coords = torch.rand(5, 2, generator=torch.Generator().manual_seed(1))
    torch.manual_seed(0)
    a = FourierBasis(32, 2.0, 8, seed=3)
    torch.manual_seed(0)
    b = FourierBasis(32, 2.0, 8, seed=3)
    assert torch.equal(fourier_features(coords, a), fourier_features(coords, b))
    assert torch.equal(a.B, b.B)


def test_published_widths():
    basis = FourierBasis(256, 2.0, 128)
    coords = torch.rand(7, 2)
    assert basis.raw(coords).shape == (7, 512)
    assert basis(coords).shape == (7, 128)


def test_frequency_scale():
    basis = FourierBasis(4000, 2.0, 4, seed=0)
    assert basis.B.std().item() == pytest.approx(2.0, rel=0.05)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=2))
def test_raw_features_bounded(xy):
    basis = FourierBasis(32, 2.0, 4, seed=1)
    raw = basis.raw(torch.tensor(xy))
    assert raw.abs().max() <= 1.0


def test_expand_channels_univariate():
    t = torch.tensor([0.0, 0.25, 1.0])
    grid = expand_channels(t, 1)
    assert grid.shape == (3, 1, 2)
    assert torch.equal(grid[:, 0, 0], t)
    assert torch.all(grid[..., 1] == 0)


def test_expand_channels_normalized_indices():
    grid = expand_channels(torch.tensor([0.5]), 3)
    assert grid[0].tolist() == [[0.5, 0.0], [0.5, 0.5], [0.5, 1.0]]


def test_expand_channels_shape():
    assert expand_channels(torch.rand(4), 2).shape == (4, 2, 2)
    assert expand_channels(torch.rand(3, 4), 2).shape == (3, 4, 2, 2)


def test_temporal_embedding_univariate_matches_query_encoding():
    basis = FourierBasis(16, 2.0, 8)
    t = torch.rand(2, 5)
    assert torch.allclose(temporal_embedding(t, 1, basis), query_encoding(t, basis), atol=1e-14)


def test_spatial_zero_input():
    emb = SpatialEmbedding(3, 8)
    with torch.no_grad():
        emb.linear.bias.zero_()
    out = emb(torch.zeros(5, 3), torch.zeros(5, 3, dtype=torch.bool))
    assert torch.equal(out, torch.zeros(5, 8))


def test_spatial_ignores_values_outside_mask():
    emb = SpatialEmbedding(2, 8)
    vals = torch.randn(6, 2)
    keep = torch.rand(6, 2) > 0.5
    keep[0, 0] = False
    a = emb(vals, keep)
    vals2 = vals.clone()
    vals2[~keep] = torch.randn(int((~keep).sum())) * 100
    assert torch.equal(a, emb(vals2, keep))


def test_spatial_input_width():
    assert SpatialEmbedding(8, 16).linear.in_features == 16


def test_combine_identity_and_commutativity():
    a, b = torch.randn(4, 8), torch.randn(4, 8)
    keep = torch.ones(4, 2, dtype=torch.bool)
    assert torch.equal(combine(a, torch.zeros(4, 8), keep).E, a)
    assert torch.equal(combine(a, b, keep).E, combine(b, a, keep).E)


def test_combine_validity_flags():
    keep = torch.tensor([[True, False], [False, False], [False, True]])
    batch = combine(torch.zeros(3, 4), torch.zeros(3, 4), keep)
    assert batch.valid.tolist() == [True, False, True]


def test_combine_shape_mismatch():
    with pytest.raises(ValueError):
        combine(torch.zeros(3, 4), torch.zeros(3, 5), torch.ones(3, 1, dtype=torch.bool))
