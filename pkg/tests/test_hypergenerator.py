import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from tvinr.hypergenerator import (
    CovariateEncoder,
    HyperNetwork,
    InrArchitecture,
    InrParameters,
    generate_params,
)


def brute_force_count(arch: InrArchitecture) -> int:
    """Count parameters of an equivalent stack of torch Linear layers."""
    w = arch.widths
    net = nn.Sequential(*[nn.Linear(a, b) for a, b in zip(w[:-1], w[1:])])
    return sum(p.numel() for p in net.parameters())


def test_published_generator_count():
    arch = InrArchitecture(128, (64, 64, 64), 1)
    assert arch.n_params == 128 * 64 + 64 + 64 * 64 + 64 + 64 * 64 + 64 + 64 * 1 + 1 == 16641
    assert brute_force_count(arch) == 16641


def test_small_count():
    assert InrArchitecture(2, (64,), 1).n_params == 257


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.lists(st.integers(1, 40), min_size=0, max_size=4), st.integers(1, 6))
def test_count_matches_enumeration(d_in, hidden, d_out):
    arch = InrArchitecture(d_in, tuple(hidden), d_out)
    assert arch.n_params == brute_force_count(arch)
    theta = InrParameters.unflatten(torch.zeros(arch.n_params), arch)
    assert sum(w[0].numel() for w in theta.weights) + sum(b[0].numel() for b in theta.biases) == arch.n_params


def test_flatten_roundtrip_bit_identical():
    arch = InrArchitecture(5, (7, 3), 2)
    flat = torch.randn(4, arch.n_params)
    theta = InrParameters.unflatten(flat, arch)
    assert torch.equal(theta.flatten(), flat)
    again = InrParameters.unflatten(theta.flatten(), arch)
    for a, b in zip(theta.weights + theta.biases, again.weights + again.biases):
        assert torch.equal(a, b)


def test_flatten_layout_layer_major():
    arch = InrArchitecture(2, (3,), 1)
    flat = torch.arange(float(arch.n_params))
    theta = InrParameters.unflatten(flat, arch)
    assert theta.weights[0][0].tolist() == [[0, 1, 2], [3, 4, 5]]
    assert theta.biases[0][0].tolist() == [6, 7, 8]
    assert theta.weights[1][0].flatten().tolist() == [9, 10, 11]
    assert theta.biases[1][0].tolist() == [12]


def test_unflatten_rejects_wrong_count():
    arch = InrArchitecture(2, (64,), 1)
    with pytest.raises(ValueError):
        InrParameters.unflatten(torch.zeros(arch.n_params + 1), arch)


def test_no_covariates_gives_empty_vector():
    enc = CovariateEncoder(0)
    out = enc(torch.zeros(3, 0))
    assert out.shape == (3, 0)
    assert enc.dim_c == 0


def test_covariate_encoder_har_shape_and_determinism():
    enc = CovariateEncoder(6, (8, 8), 4)
    c = torch.nn.functional.one_hot(torch.tensor([2]), 6).double()
    a, b = enc(c), enc(c)
    assert a.shape == (1, 4)
    assert torch.equal(a, b)


def test_covariate_width_mismatch():
    with pytest.raises(ValueError):
        CovariateEncoder(3)(torch.zeros(1, 4))


def make_hyper(arch, d_in=6):
    torch.manual_seed(0)
    return HyperNetwork(d_in, (16, 32), arch)


def test_zero_hypernetwork_gives_zero_theta():
    arch = InrArchitecture(4, (8,), 1)
    hyper = make_hyper(arch)
    with torch.no_grad():
        for p in hyper.parameters():
            p.zero_()
    theta = generate_params(torch.randn(2, 4), torch.randn(2, 2), hyper)
    assert torch.all(theta.flatten() == 0)


def test_different_latents_give_different_theta():
    arch = InrArchitecture(4, (8,), 1)
    hyper = make_hyper(arch)
    z = torch.randn(2, 6)
    theta = generate_params(z, z[:, :0], hyper).flatten()
    assert (theta[0] - theta[1]).norm() > 0


def test_generate_params_deterministic():
    arch = InrArchitecture(4, (8,), 1)
    hyper = make_hyper(arch)
    z, c = torch.randn(3, 4), torch.randn(3, 2)
    assert torch.equal(generate_params(z, c, hyper).flatten(), generate_params(z, c, hyper).flatten())


def test_generate_params_width_checks():
    arch = InrArchitecture(4, (8,), 1)
    hyper = make_hyper(arch)
    with pytest.raises(ValueError):
        generate_params(torch.randn(1, 5), torch.randn(1, 2), hyper)
    with pytest.raises(ValueError):
        generate_params(torch.randn(1, 4), torch.randn(1, 2), hyper, InrArchitecture(4, (9,), 1))


def test_initial_generated_weight_scale():
    """Generated layers start near a fan-in initialised MLP, not exploding."""
    arch = InrArchitecture(64, (64, 64), 1)
    hyper = make_hyper(arch, d_in=16)
    theta = generate_params(torch.randn(64, 16), torch.zeros(64, 0), hyper)
    for W in theta.weights:
        fan_in = W.shape[1]
        assert W.std().item() < 3.0 / fan_in**0.5
