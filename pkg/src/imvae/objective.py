"""Decoding, scoring and assembly of the training objective.

The minimized loss is

    (1 + lambda_t) * (recon_x + recon_y + kl_zx + kl_zy)
    + kl_ztx + kl_zty + kl_zax + kl_zay
    + lambda_t * (kl_transfer_yx + kl_transfer_xy)
    + lambda_a * (mean(lambda_d_x * kl_denoise_x) + mean(lambda_d_y * kl_denoise_y))

where every term is a batch mean of a per-user quantity (zero for users whose
domain is missing or masked).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Sequence

import torch
from torch import nn

from .corpus import PAD
from .errors import NumericalError
from .varinf import HIDDEN, GaussianParams, mlp

PROB_EPS = 1e-7


class UserDecoder(nn.Module):
    """MLP over ``[z; z_t; z_a]`` giving the user vector of one domain."""

    def __init__(self, d: int, hidden: Sequence[int] = HIDDEN):
        super().__init__()
        self.net = mlp(3 * d, d, hidden)

    def forward(self, z: torch.Tensor, z_t: torch.Tensor, z_a: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([z, z_t, z_a], dim=-1))


def score(h_u: torch.Tensor, item_table: torch.Tensor, items: torch.Tensor) -> torch.Tensor:
    """Dot products between user vectors ``(B, d)`` and items ``(B, C)``."""
    if (items == PAD).any():
        raise ValueError("PAD item passed to the scorer")
    return torch.einsum("bd,bcd->bc", h_u, item_table[items])


def bce_terms(pos_scores: torch.Tensor, neg_scores: torch.Tensor) -> torch.Tensor:
    """Per-user binary cross-entropy: one positive ``(B,)`` and negatives ``(B, n)``."""
    p_pos = torch.sigmoid(pos_scores).clamp(PROB_EPS, 1 - PROB_EPS)
    p_neg = torch.sigmoid(neg_scores).clamp(PROB_EPS, 1 - PROB_EPS)
    return -(torch.log(p_pos) + torch.log1p(-p_neg).sum(dim=-1))


def bce_loss(pos_scores: torch.Tensor, neg_scores: torch.Tensor) -> torch.Tensor:
    return bce_terms(pos_scores, neg_scores).mean()


def kl_diag_gaussians(q: GaussianParams, p: GaussianParams) -> torch.Tensor:
    """Closed-form ``KL(q || p)`` summed over the last dimension."""
    var_ratio = (q.sigma / p.sigma) ** 2
    mean_term = ((q.mu - p.mu) / p.sigma) ** 2
    return (torch.log(p.sigma / q.sigma) + 0.5 * (var_ratio + mean_term) - 0.5).sum(dim=-1)


def adaptive_weight(L, T: int, a: float = 0.8, b: float = 0.8):
    """Noise-adaptive denoising weight ``exp(a L / T) - b``.

    Accepts a Python number or a tensor of lengths.
    """
    if isinstance(L, torch.Tensor):
        if (L > T).any() or (L < 0).any():
            raise ValueError(f"sequence length outside [0, {T}]")
        return torch.exp(a * L / T) - b
    if not 0 <= L <= T:
        raise ValueError(f"sequence length {L} outside [0, {T}]")
    return math.exp(a * L / T) - b


@dataclass
class LossBreakdown:
    recon_x: torch.Tensor
    recon_y: torch.Tensor
    kl_zx: torch.Tensor
    kl_zy: torch.Tensor
    kl_ztx: torch.Tensor
    kl_zty: torch.Tensor
    kl_zax: torch.Tensor
    kl_zay: torch.Tensor
    kl_transfer_yx: torch.Tensor
    kl_transfer_xy: torch.Tensor
    kl_denoise_x: torch.Tensor
    kl_denoise_y: torch.Tensor
    denoise_x_weighted: torch.Tensor
    denoise_y_weighted: torch.Tensor
    lambda_d_x: torch.Tensor
    lambda_d_y: torch.Tensor
    lambda_t: float
    lambda_a: float
    total: torch.Tensor

    def as_dict(self) -> dict[str, float]:
        return {f.name: float(torch.as_tensor(getattr(self, f.name)).detach()) for f in fields(self)}


def compose_total(parts: dict, lambda_t: float, lambda_a: float):
    """The weighted sum of the objective's terms (works on floats or tensors)."""
    return (
        (1 + lambda_t) * (parts["recon_x"] + parts["recon_y"] + parts["kl_zx"] + parts["kl_zy"])
        + parts["kl_ztx"] + parts["kl_zty"] + parts["kl_zax"] + parts["kl_zay"]
        + lambda_t * (parts["kl_transfer_yx"] + parts["kl_transfer_xy"])
        + lambda_a * (parts["denoise_x_weighted"] + parts["denoise_y_weighted"])
    )


_ORDER = (
    "recon_x", "recon_y", "kl_zx", "kl_zy", "kl_ztx", "kl_zty", "kl_zax", "kl_zay",
    "kl_transfer_yx", "kl_transfer_xy", "denoise_x_weighted", "denoise_y_weighted",
)


def total_objective(
    per_user: dict[str, torch.Tensor],
    masks: dict[str, torch.Tensor],
    lambda_d: dict[str, torch.Tensor],
    lambda_t: float,
    lambda_a: float,
) -> LossBreakdown:
    """Batch-average masked per-user terms and combine them.

    ``per_user`` maps every term name of :data:`_ORDER` except the weighted
    denoisers, plus ``kl_denoise_x``/``kl_denoise_y``, to ``(B,)`` tensors;
    ``masks`` gives the matching 0/1 weights.
    """
    B = next(iter(per_user.values())).shape[0]

    def mean(name, weight=None):
        v = per_user[name] * masks[name]
        if weight is not None:
            v = v * weight
        return v.sum() / B

    parts = {name: mean(name) for name in _ORDER[:10]}
    parts["kl_denoise_x"] = mean("kl_denoise_x")
    parts["kl_denoise_y"] = mean("kl_denoise_y")
    parts["denoise_x_weighted"] = mean("kl_denoise_x", lambda_d["x"])
    parts["denoise_y_weighted"] = mean("kl_denoise_y", lambda_d["y"])
    total = compose_total(parts, lambda_t, lambda_a)
    if not torch.isfinite(total):
        bad = next((n for n in _ORDER if not torch.isfinite(parts[n])), "total")
        raise NumericalError(f"non-finite objective (first offending term: {bad})")

    def masked_mean(w, m):
        return (w * m).sum() / m.sum().clamp_min(1)

    return LossBreakdown(
        **parts,
        lambda_d_x=masked_mean(lambda_d["x"], masks["kl_denoise_x"]).detach(),
        lambda_d_y=masked_mean(lambda_d["y"], masks["kl_denoise_y"]).detach(),
        lambda_t=lambda_t,
        lambda_a=lambda_a,
        total=total,
    )
