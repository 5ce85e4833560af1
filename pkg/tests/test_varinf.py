import math

import numpy as np
import pytest
import torch

from imvae.errors import NumericalError
from imvae.seqenc import DomainSequenceEncoder
from imvae.varinf import (
    CrossDomainEncoder, GaussianEncoder, GaussianParams, LearnablePrior, reparameterize, standard_normal,
)


def test_zero_input_gives_bias_path_and_positive_sigma():
    torch.manual_seed(0)
    enc = GaussianEncoder(8, 8)
    out = enc(torch.zeros(3, 8))
    # zero input through a bias-only path: identical rows
    assert torch.equal(out.mu[0], out.mu[1])
    assert (out.sigma > 0).all()


def test_encoder_determinism_and_lipschitz():
    torch.manual_seed(1)
    enc = GaussianEncoder(8, 8).double()
    x = torch.randn(4, 8, dtype=torch.float64)
    a, b = enc(x), enc(x.clone())
    assert torch.equal(a.mu, b.mu) and torch.equal(a.sigma, b.sigma)
    ratios = []
    for eps in (1e-3, 1e-4, 1e-5):
        delta = torch.randn_like(x) * eps
        ratios.append(((enc(x + delta).mu - a.mu).norm() / delta.norm()).item())
    assert max(ratios) < 100
    assert ratios[-1] == pytest.approx(ratios[-2], rel=0.2)


def test_non_finite_output_is_fatal():
    enc = GaussianEncoder(4, 4)
    with pytest.raises(NumericalError):
        enc(torch.full((1, 4), float("nan")))


def test_mlp_cross_encoder_zero_inputs():
    torch.manual_seed(0)
    enc = CrossDomainEncoder(8, "mlp")
    seq = DomainSequenceEncoder(10, 8, 4, 4, heads=2, dropout=0.0)
    rep = seq(torch.zeros(2, 4, dtype=torch.long))
    out = enc(rep, rep)
    assert torch.equal(out.mu[0], out.mu[1]) and (out.sigma > 0).all()


def test_directions_have_separate_parameters():
    torch.manual_seed(0)
    seq = DomainSequenceEncoder(10, 8, 4, 4, heads=2, dropout=0.0).eval()
    yx, xy = CrossDomainEncoder(8, heads=2, dropout=0.0), CrossDomainEncoder(8, heads=2, dropout=0.0)
    x = seq(torch.tensor([[0, 1, 2, 3]]))
    y = seq(torch.tensor([[4, 5, 6, 7]]))
    assert not torch.allclose(yx(x, y).mu, xy(y, x).mu)


def test_attention_pool_invariant_to_key_permutation_with_equal_keys():
    torch.manual_seed(0)
    enc = CrossDomainEncoder(8, "attention", heads=2, dropout=0.0).eval()
    q = torch.randn(1, 5, 8)
    key_row = torch.randn(8)
    values = torch.randn(1, 5, 8)
    keys = key_row.expand(1, 5, 8).clone()
    mask = torch.tensor([[False, True, True, True, True]])
    a = enc.attn(q, keys, values, key_mask=mask)
    perm = [0, 3, 1, 4, 2]
    b = enc.attn(q, keys[:, perm], values[:, perm], key_mask=mask[:, perm])
    torch.testing.assert_close(a, b)


def test_cross_attention_all_pad_query_is_defined():
    torch.manual_seed(0)
    seq = DomainSequenceEncoder(10, 8, 4, 4, heads=2, dropout=0.0).eval()
    enc = CrossDomainEncoder(8, heads=2, dropout=0.0).eval()
    out = enc(seq(torch.zeros(1, 4, dtype=torch.long)), seq(torch.tensor([[0, 1, 2, 3]])))
    assert torch.isfinite(out.mu).all() and (out.sigma > 0).all()


def test_prior_starts_standard_normal():
    p = LearnablePrior(5)()
    assert torch.equal(p.mu, torch.zeros(5))
    torch.testing.assert_close(p.sigma, torch.ones(5))
    fixed = standard_normal(5, torch.zeros(1))
    assert torch.equal(fixed.sigma, torch.ones(5)) and not fixed.mu.requires_grad


def test_reparameterize_examples():
    mu = torch.tensor([0.5, -1.0])
    params = GaussianParams(mu, torch.ones(2))
    assert torch.equal(reparameterize(params, torch.zeros(2), True), mu)
    assert torch.equal(reparameterize(params, torch.randn(2), False), mu)


def test_reparameterize_monte_carlo_mean():
    g = torch.Generator().manual_seed(0)
    mu = torch.tensor([0.3, -2.0, 5.0], dtype=torch.float64)
    sigma = torch.tensor([0.5, 1.0, 2.0], dtype=torch.float64)
    noise = torch.randn(10_000, 3, generator=g, dtype=torch.float64)
    z = reparameterize(GaussianParams(mu, sigma), noise, True)
    assert ((z.mean(0) - mu).abs() <= 4 * sigma / math.sqrt(10_000)).all()


def test_reparameterize_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    mu = torch.tensor(rng.normal(size=4), dtype=torch.float64, requires_grad=True)
    sigma = torch.tensor(rng.uniform(0.5, 2, size=4), dtype=torch.float64, requires_grad=True)
    noise = torch.tensor(rng.normal(size=4), dtype=torch.float64)
    jac_mu, jac_sigma = torch.autograd.functional.jacobian(
        lambda m, s: reparameterize(GaussianParams(m, s), noise, True), (mu, sigma)
    )
    torch.testing.assert_close(jac_mu, torch.eye(4, dtype=torch.float64))
    torch.testing.assert_close(jac_sigma, torch.diag(noise))
    h = 1e-6
    for i in range(4):
        e = torch.zeros(4, dtype=torch.float64)
        e[i] = h
        with torch.no_grad():
            fd = (reparameterize(GaussianParams(mu, sigma + e), noise, True)
                  - reparameterize(GaussianParams(mu, sigma - e), noise, True)) / (2 * h)
        rel = (fd - jac_sigma[:, i]).norm() / jac_sigma[:, i].norm().clamp_min(1e-12)
        assert rel < 1e-4
