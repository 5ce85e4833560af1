"""The IM-VAE network: sequence encoders, six posteriors, auxiliary encoders,
priors and per-domain decoders, plus batching of :class:`UserExample` objects."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .corpus import DOMAINS, PAD, X, Y, UserExample
from .objective import LossBreakdown, UserDecoder, adaptive_weight, bce_terms, kl_diag_gaussians, score, total_objective
from .seqenc import DomainSequenceEncoder, SequenceRep
from .varinf import (
    HIDDEN,
    CrossDomainEncoder,
    GaussianEncoder,
    GaussianParams,
    LearnablePrior,
    reparameterize,
    standard_normal,
)

LATENTS = ("zx", "zy", "zax", "zay", "ztx", "zty")
# z_t^y (Y -> X transfer) feeds domain X; z_t^x feeds domain Y.
DOMAIN_LATENTS = {X: ("zx", "zty", "zax"), Y: ("zy", "ztx", "zay")}


@dataclass(frozen=True)
class ModelConfig:
    n_items_x: int
    n_items_y: int
    d: int = 128
    T: int = 20
    T_pseudo: int = 40
    heads: int = 4
    dropout: float = 0.2
    hidden: tuple[int, ...] = HIDDEN
    cross_encoder_mode: str = "attention"
    mask_cold_pseudo: bool = True
    aux_for_cold_start: bool = True
    init_std: float = 0.02

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["hidden"] = tuple(d.get("hidden", HIDDEN))
        return cls(**d)


@dataclass
class Batch:
    """Tensors for a group of users. Missing targets are stored as PAD."""

    seq: dict[str, torch.Tensor]
    pseudo: dict[str, torch.Tensor]
    length: dict[str, torch.Tensor]
    target: dict[str, torch.Tensor]
    cold: dict[str, torch.Tensor]
    negatives: dict[str, torch.Tensor] = field(default_factory=dict)

    def __len__(self) -> int:
        return self.seq[X].shape[0]

    def has_target(self, domain: str) -> torch.Tensor:
        return self.target[domain] != PAD

    def present(self, domain: str) -> torch.Tensor:
        """Users with usable real history (or a training target) in ``domain``."""
        has_data = (self.length[domain] > 0) | self.has_target(domain)
        return has_data & ~self.cold[domain]


class ExampleArrays:
    """Column-wise numpy view of examples for fast batch assembly."""

    def __init__(self, examples: Sequence[UserExample]):
        if any(e.pseudo_x is None or e.pseudo_y is None for e in examples):
            raise ValueError("examples lack pseudo-sequences; run the pseudo stage first")
        self.examples = tuple(examples)
        self.user_ids = [e.user_id for e in examples]
        self.seq = {d: np.asarray([e.seq(d) for e in examples], dtype=np.int64) for d in DOMAINS}
        self.pseudo = {d: np.asarray([e.pseudo(d) for e in examples], dtype=np.int64) for d in DOMAINS}
        self.length = {d: np.asarray([e.true_len(d) for e in examples], dtype=np.int64) for d in DOMAINS}
        self.target = {
            d: np.asarray([e.target(d) or PAD for e in examples], dtype=np.int64) for d in DOMAINS
        }
        self.cold = {d: np.asarray([e.cold_start_domain == d for e in examples]) for d in DOMAINS}
        self.seen = {d: [e.seen(d) for e in examples] for d in DOMAINS}

    def __len__(self) -> int:
        return len(self.user_ids)

    def batch(self, idx: np.ndarray, negatives: dict[str, np.ndarray] | None = None) -> Batch:
        t = torch.from_numpy
        return Batch(
            seq={d: t(self.seq[d][idx]) for d in DOMAINS},
            pseudo={d: t(self.pseudo[d][idx]) for d in DOMAINS},
            length={d: t(self.length[d][idx]) for d in DOMAINS},
            target={d: t(self.target[d][idx]) for d in DOMAINS},
            cold={d: t(self.cold[d][idx]) for d in DOMAINS},
            negatives={d: t(v) for d, v in (negatives or {}).items()},
        )

    def sample_train_negatives(
        self, idx: np.ndarray, n_items: dict[str, int], n_neg: int, rng: np.random.Generator
    ) -> dict[str, np.ndarray]:
        """Uniform same-domain items the user never interacted with."""
        out = {}
        for d in DOMAINS:
            neg = rng.integers(1, n_items[d] + 1, size=(len(idx), n_neg))
            for row, i in enumerate(idx):
                seen = self.seen[d][i]
                if len(seen) >= n_items[d]:
                    continue
                for col in range(n_neg):
                    while int(neg[row, col]) in seen:
                        neg[row, col] = rng.integers(1, n_items[d] + 1)
            out[d] = neg
        return out


@dataclass
class ForwardOutput:
    posteriors: dict[str, GaussianParams]
    aux: dict[str, GaussianParams]
    priors: dict[str, GaussianParams]
    latents: dict[str, torch.Tensor]
    user_vectors: dict[str, torch.Tensor]
    reps: dict[str, SequenceRep]


class IMVAE(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        c = self.config = config
        self.n_items = {X: c.n_items_x, Y: c.n_items_y}
        self.seq_encoders = nn.ModuleDict({
            d: DomainSequenceEncoder(self.n_items[d], c.d, c.T, c.T_pseudo, c.heads, c.dropout, c.init_std)
            for d in DOMAINS
        })
        self.domain_encoders = nn.ModuleDict({d: GaussianEncoder(c.d, c.d, c.hidden) for d in DOMAINS})
        self.pseudo_encoders = nn.ModuleDict({d: GaussianEncoder(c.d, c.d, c.hidden) for d in DOMAINS})
        # keyed by the latent they produce: zty is Y -> X (query X, source Y)
        self.cross_encoders = nn.ModuleDict({
            name: CrossDomainEncoder(c.d, c.cross_encoder_mode, c.heads, c.dropout, c.hidden)
            for name in ("zty", "ztx")
        })
        self.aux_encoders = nn.ModuleDict({name: GaussianEncoder(c.d, c.d, c.hidden) for name in ("zty", "ztx")})
        self.priors = nn.ModuleDict({name: LearnablePrior(c.d) for name in ("zx", "zy", "zax", "zay")})
        self.decoders = nn.ModuleDict({d: UserDecoder(c.d, c.hidden) for d in DOMAINS})

    def item_table(self, domain: str) -> torch.Tensor:
        return self.seq_encoders[domain].item_emb.weight

    def prior_params(self, like: torch.Tensor) -> dict[str, GaussianParams]:
        out = {name: prior() for name, prior in self.priors.items()}
        out["ztx"] = out["zty"] = standard_normal(self.config.d, like)
        return out

    def encode(self, batch: Batch) -> tuple[dict, dict, dict]:
        """Posterior and auxiliary parameters. Inputs of a cold-start domain are
        blanked first so that nothing downstream can depend on them."""
        c = self.config
        reps = {}
        for d in DOMAINS:
            cold = batch.cold[d].unsqueeze(-1)
            seq = batch.seq[d].masked_fill(cold, PAD)
            pseudo = batch.pseudo[d].masked_fill(cold, PAD) if c.mask_cold_pseudo else batch.pseudo[d]
            reps[d] = self.seq_encoders[d](seq, "real")
            reps[d + "a"] = self.seq_encoders[d](pseudo, "pseudo")
        post = {
            "zx": self.domain_encoders[X](reps[X].pooled),
            "zy": self.domain_encoders[Y](reps[Y].pooled),
            "zax": self.pseudo_encoders[X](reps["Xa"].pooled),
            "zay": self.pseudo_encoders[Y](reps["Ya"].pooled),
            "zty": self.cross_encoders["zty"](reps[X], reps[Y]),
            "ztx": self.cross_encoders["ztx"](reps[Y], reps[X]),
        }
        aux = {
            "zty": self.aux_encoders["zty"](reps[Y].pooled),
            "ztx": self.aux_encoders["ztx"](reps[X].pooled),
        }
        return post, aux, reps

    def forward(
        self,
        batch: Batch,
        noise: dict[str, torch.Tensor] | None = None,
        generator: torch.Generator | None = None,
    ) -> ForwardOutput:
        c = self.config
        post, aux, reps = self.encode(batch)
        train_mode = self.training
        if train_mode and noise is None:
            noise = {
                name: torch.randn(post[name].mu.shape, generator=generator, dtype=post[name].mu.dtype)
                for name in LATENTS
            }
        noise = noise or {}
        z = {name: reparameterize(post[name], noise.get(name), train_mode) for name in LATENTS}
        # cold-start routing: domain-specific latents of the cold domain are masked
        # and the transfer latent into it comes from the other domain alone
        for d, (z_own, z_in, z_pseudo) in DOMAIN_LATENTS.items():
            cold = batch.cold[d].unsqueeze(-1)
            if not cold.any():
                continue
            zeros = torch.zeros_like(z[z_own])
            z[z_own] = torch.where(cold, zeros, z[z_own])
            if c.mask_cold_pseudo:
                z[z_pseudo] = torch.where(cold, zeros, z[z_pseudo])
            if c.aux_for_cold_start:
                z_aux = reparameterize(aux[z_in], noise.get(z_in), train_mode)
            else:
                z_aux = zeros  # prior mean of the transfer latent
            z[z_in] = torch.where(cold, z_aux, z[z_in])
        h = {d: self.decoders[d](*(z[n] for n in DOMAIN_LATENTS[d])) for d in DOMAINS}
        return ForwardOutput(post, aux, self.prior_params(h[X]), z, h, reps)

    def score_candidates(self, h: torch.Tensor, domain: str, items: torch.Tensor) -> torch.Tensor:
        return score(h, self.item_table(domain), items)


def per_user_terms(model: IMVAE, batch: Batch, out: ForwardOutput) -> tuple[dict, dict]:
    """Unreduced objective terms and their masks for one batch."""
    post, aux, pri = out.posteriors, out.aux, out.priors
    terms: dict[str, torch.Tensor] = {}
    masks: dict[str, torch.Tensor] = {}
    present = {d: batch.present(d) for d in DOMAINS}
    fdt = out.user_vectors[X].dtype
    for d, rx, kl_z, kl_a, kl_t, kl_tr, kl_dn in (
        (X, "recon_x", "zx", "zax", "zty", "kl_transfer_yx", "kl_denoise_x"),
        (Y, "recon_y", "zy", "zay", "ztx", "kl_transfer_xy", "kl_denoise_y"),
    ):
        has_t = batch.has_target(d)
        target = batch.target[d].clamp_min(1).unsqueeze(-1)
        neg = batch.negatives[d]
        h = out.user_vectors[d]
        pos_s = model.score_candidates(h, d, target).squeeze(-1)
        neg_s = model.score_candidates(h, d, neg)
        terms[rx] = bce_terms(pos_s, neg_s)
        masks[rx] = has_t.to(fdt)
        terms["kl_" + kl_z] = kl_diag_gaussians(post[kl_z], pri[kl_z])
        masks["kl_" + kl_z] = present[d].to(fdt)
        terms["kl_" + kl_a] = kl_diag_gaussians(post[kl_a], pri[kl_a])
        masks["kl_" + kl_a] = present[d].to(fdt)
        terms["kl_" + kl_t] = kl_diag_gaussians(post[kl_t], pri[kl_t])
        masks["kl_" + kl_t] = present[d].to(fdt)
        terms[kl_tr] = kl_diag_gaussians(post[kl_t], aux[kl_t])
        masks[kl_tr] = (present[X] & present[Y]).to(fdt)
        terms[kl_dn] = kl_diag_gaussians(post[kl_z], post[kl_a])
        masks[kl_dn] = present[d].to(fdt)
    return terms, masks


def compute_loss(
    model: IMVAE,
    batch: Batch,
    lambda_t: float,
    lambda_a: float,
    a: float = 0.8,
    b: float = 0.8,
    noise: dict[str, torch.Tensor] | None = None,
    generator: torch.Generator | None = None,
) -> tuple[LossBreakdown, ForwardOutput]:
    out = model(batch, noise=noise, generator=generator)
    terms, masks = per_user_terms(model, batch, out)
    T = model.config.T
    dtype = out.user_vectors[X].dtype
    lambda_d = {
        "x": adaptive_weight(batch.length[X].to(dtype), T, a, b),
        "y": adaptive_weight(batch.length[Y].to(dtype), T, a, b),
    }
    return total_objective(terms, masks, lambda_d, lambda_t, lambda_a), out
