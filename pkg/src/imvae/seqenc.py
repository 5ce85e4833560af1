"""Item/position embeddings, SASRec-style self-attention and masked mean-pooling."""

from __future__ import annotations

from typing import NamedTuple

import torch
from torch import nn

from .corpus import PAD


class SequenceRep(NamedTuple):
    matrix: torch.Tensor  # (B, L, d)
    mask: torch.Tensor  # (B, L) True at real positions
    pooled: torch.Tensor  # (B, d)


def pool(matrix: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over unmasked rows; all-masked sequences pool to zero."""
    m = mask.to(matrix.dtype).unsqueeze(-1)
    count = m.sum(dim=-2).clamp_min(1.0)
    return (matrix * m).sum(dim=-2) / count


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with key-padding and optional causal masks.

    Queries without any visible key produce zero output instead of NaN.
    """

    def __init__(self, d: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if d % heads:
            raise ValueError(f"embedding size {d} not divisible by {heads} heads")
        self.d, self.heads, self.head_dim = d, heads, d // heads
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)
        self.dropout = nn.Dropout(dropout)
        self.last_weights: torch.Tensor | None = None

    def forward(
        self,
        query: torch.Tensor,
        key: torch.Tensor,
        value: torch.Tensor,
        key_mask: torch.Tensor,
        causal: bool = False,
    ) -> torch.Tensor:
        B, Lq, _ = query.shape
        Lk = key.shape[1]

        def split(t, L):
            return t.view(B, L, self.heads, self.head_dim).transpose(1, 2)

        q = split(self.q_proj(query), Lq)
        k = split(self.k_proj(key), Lk)
        v = split(self.v_proj(value), Lk)
        scores = q @ k.transpose(-1, -2) / self.head_dim ** 0.5

        allowed = key_mask[:, None, None, :]
        if causal:
            tri = torch.ones(Lq, Lk, dtype=torch.bool, device=query.device).tril()
            allowed = allowed & tri
        scores = scores.masked_fill(~allowed, torch.finfo(scores.dtype).min)
        weights = torch.softmax(scores, dim=-1) * allowed
        self.last_weights = weights.detach()
        out = self.dropout(weights) @ v
        return self.out_proj(out.transpose(1, 2).reshape(B, Lq, self.d))


class SelfAttentionBlock(nn.Module):
    """One SASRec block: causal attention and a point-wise feed-forward layer."""

    def __init__(self, d: int, heads: int, dropout: float):
        super().__init__()
        self.attn_norm = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, dropout)
        self.ffn_norm = nn.LayerNorm(d)
        self.ffn = nn.Sequential(
            nn.Linear(d, d), nn.ReLU(), nn.Dropout(dropout), nn.Linear(d, d), nn.Dropout(dropout)
        )
        self.out_norm = nn.LayerNorm(d)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        q = self.attn_norm(x)
        x = q + self.attn(q, x, x, key_mask=mask, causal=True)
        x = self.ffn_norm(x)
        x = x + self.ffn(x)
        return self.out_norm(x) * mask.unsqueeze(-1).to(x.dtype)


class DomainSequenceEncoder(nn.Module):
    """Encodes real and pseudo sequences of one domain.

    The item table is shared by both paths (and by the scorer); each path has
    its own position table.
    """

    def __init__(
        self,
        n_items: int,
        d: int,
        max_len: int,
        pseudo_len: int,
        heads: int = 4,
        dropout: float = 0.2,
        init_std: float = 0.02,
    ):
        super().__init__()
        self.n_items = n_items
        self.item_emb = nn.Embedding(n_items + 1, d, padding_idx=PAD)
        self.pos_real = nn.Embedding(max_len, d)
        self.pos_pseudo = nn.Embedding(pseudo_len, d)
        for emb in (self.item_emb, self.pos_real, self.pos_pseudo):
            nn.init.normal_(emb.weight, std=init_std)
        with torch.no_grad():
            self.item_emb.weight[PAD].zero_()
        self.emb_dropout = nn.Dropout(dropout)
        self.block = SelfAttentionBlock(d, heads, dropout)

    def embed_sequence(self, items: torch.Tensor, kind: str = "real") -> tuple[torch.Tensor, torch.Tensor]:
        table = {"real": self.pos_real, "pseudo": self.pos_pseudo}[kind]
        if items.shape[-1] != table.num_embeddings:
            raise ValueError(
                f"{kind} sequence length {items.shape[-1]} != expected {table.num_embeddings}"
            )
        if items.numel() and (items.min() < 0 or items.max() > self.n_items):
            raise IndexError(f"item index out of range [0, {self.n_items}]")
        positions = torch.arange(items.shape[-1], device=items.device)
        matrix = self.item_emb(items) + table(positions)
        return matrix, items != PAD

    def attend(self, matrix: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        return self.block(self.emb_dropout(matrix), mask)

    def forward(self, items: torch.Tensor, kind: str = "real") -> SequenceRep:
        matrix, mask = self.embed_sequence(items, kind)
        out = self.attend(matrix, mask)
        return SequenceRep(out, mask, pool(out, mask))
