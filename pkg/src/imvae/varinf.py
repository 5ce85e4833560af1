"""Gaussian posterior encoders, auxiliary single-domain encoders and priors."""

from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import NumericalError
from .seqenc import MultiHeadAttention, SequenceRep, pool

SIGMA_FLOOR = 1e-6
HIDDEN = (32, 64, 32)


class GaussianParams(NamedTuple):
    mu: torch.Tensor
    sigma: torch.Tensor


def positive(x: torch.Tensor) -> torch.Tensor:
    return F.softplus(x) + SIGMA_FLOOR


def mlp(in_dim: int, out_dim: int, hidden: Sequence[int] = HIDDEN) -> nn.Sequential:
    """ReLU perceptron with He (fan-in) initialisation and zero biases."""
    layers: list[nn.Module] = []
    prev = in_dim
    for h in hidden:
        layers += [nn.Linear(prev, h), nn.ReLU()]
        prev = h
    layers.append(nn.Linear(prev, out_dim))
    for layer in layers:
        if isinstance(layer, nn.Linear):
            nn.init.kaiming_normal_(layer.weight, nonlinearity="relu")
            nn.init.zeros_(layer.bias)
    return nn.Sequential(*layers)


class GaussianEncoder(nn.Module):
    """Separate MLP heads for the mean and the (softplus) standard deviation."""

    def __init__(self, in_dim: int, d: int, hidden: Sequence[int] = HIDDEN):
        super().__init__()
        self.mu_net = mlp(in_dim, d, hidden)
        self.sigma_net = mlp(in_dim, d, hidden)

    def forward(self, x: torch.Tensor) -> GaussianParams:
        mu, sigma = self.mu_net(x), positive(self.sigma_net(x))
        if not (torch.isfinite(mu).all() and torch.isfinite(sigma).all()):
            raise NumericalError("encoder produced non-finite Gaussian parameters")
        return GaussianParams(mu, sigma)


class CrossDomainEncoder(nn.Module):
    """Posterior of a transfer latent given both domains.

    ``attention`` mode lets the target-domain sequence attend over the source
    domain sequence and pools the result; ``mlp`` mode concatenates the two
    pooled vectors.
    """

    def __init__(self, d: int, mode: str = "attention", heads: int = 4, dropout: float = 0.2,
                 hidden: Sequence[int] = HIDDEN):
        super().__init__()
        if mode not in ("attention", "mlp"):
            raise ValueError(f"unknown cross encoder mode {mode!r}")
        self.mode = mode
        if mode == "attention":
            self.attn = MultiHeadAttention(d, heads, dropout)
            self.heads = GaussianEncoder(d, d, hidden)
        else:
            self.heads = GaussianEncoder(2 * d, d, hidden)

    def forward(self, query: SequenceRep, source: SequenceRep) -> GaussianParams:
        if self.mode == "mlp":
            return self.heads(torch.cat([query.pooled, source.pooled], dim=-1))
        attended = self.attn(query.matrix, source.matrix, source.matrix, key_mask=source.mask)
        return self.heads(pool(attended, query.mask))


class LearnablePrior(nn.Module):
    """Diagonal Gaussian prior with trainable mean and scale, starting at N(0, I)."""

    def __init__(self, d: int):
        super().__init__()
        self.mu = nn.Parameter(torch.zeros(d))
        # softplus(raw) + floor == 1 at initialisation
        self.raw_sigma = nn.Parameter(torch.full((d,), math.log(math.expm1(1.0 - SIGMA_FLOOR))))

    def forward(self) -> GaussianParams:
        return GaussianParams(self.mu, positive(self.raw_sigma))


def standard_normal(d: int, like: torch.Tensor) -> GaussianParams:
    return GaussianParams(torch.zeros(d, dtype=like.dtype), torch.ones(d, dtype=like.dtype))


def reparameterize(params: GaussianParams, noise: torch.Tensor | None, train_mode: bool) -> torch.Tensor:
    """``mu + sigma * noise`` in training, ``mu`` otherwise."""
    if not train_mode or noise is None:
        return params.mu
    return params.mu + params.sigma * noise
