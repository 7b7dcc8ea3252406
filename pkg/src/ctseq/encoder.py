"""Causal self-attention next-item encoder with seed-addressed dropout.

Every forward pass is a pure function of (parameters, batch, dropout_seed):
dropout masks come from an explicit torch.Generator instead of global RNG
state, which is what makes two-pass consistency training reproducible and
finite-difference checkable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .corpus import PAD_ID, SequenceBatch


@dataclass
class EncoderConfig:
    embed_dim: int = 50
    n_layers: int = 2
    n_heads: int = 2
    max_seq_len: int = 50
    dropout_rate: float = 0.5
    ffn_dim: int | None = None  # None -> embed_dim

    def __post_init__(self) -> None:
        if self.embed_dim % self.n_heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.ffn_dim is None:
            self.ffn_dim = self.embed_dim


@dataclass
class PassOutput:
    """Per-step user representations from one forward pass (dropout_id 1 or 2)."""

    representations: torch.Tensor  # [B, L, d]
    dropout_id: int


def seeded_dropout(x: torch.Tensor, rate: float, gen: torch.Generator | None) -> torch.Tensor:
    """Inverted dropout driven by an explicit generator; identity when off."""
    if gen is None or rate == 0.0:
        return x
    keep = torch.rand(x.shape, generator=gen, dtype=x.dtype) >= rate
    return x * keep / (1.0 - rate)


def _trunc_normal_(t: torch.Tensor, std: float, gen: torch.Generator) -> None:
    # Resample anything beyond 2 sigma; deterministic per generator.
    t.normal_(0.0, std, generator=gen)
    bad = t.abs() > 2 * std
    while bad.any():
        t[bad] = torch.empty(int(bad.sum()), dtype=t.dtype).normal_(0.0, std, generator=gen)
        bad = t.abs() > 2 * std


class EncoderBlock(nn.Module):
    """Pre-norm block: LN -> causal multi-head attention -> residual -> LN -> FFN -> residual."""

    def __init__(self, d: int, n_heads: int, ffn_dim: int, dtype: torch.dtype):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d // n_heads
        self.attn_q = nn.Parameter(torch.empty(d, d, dtype=dtype))
        self.attn_k = nn.Parameter(torch.empty(d, d, dtype=dtype))
        self.attn_v = nn.Parameter(torch.empty(d, d, dtype=dtype))
        self.attn_o = nn.Parameter(torch.empty(d, d, dtype=dtype))
        self.ln1_scale = nn.Parameter(torch.ones(d, dtype=dtype))
        self.ln1_offset = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.ffn_w1 = nn.Parameter(torch.empty(d, ffn_dim, dtype=dtype))
        self.ffn_b1 = nn.Parameter(torch.zeros(ffn_dim, dtype=dtype))
        self.ffn_w2 = nn.Parameter(torch.empty(ffn_dim, d, dtype=dtype))
        self.ffn_b2 = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.ln2_scale = nn.Parameter(torch.ones(d, dtype=dtype))
        self.ln2_offset = nn.Parameter(torch.zeros(d, dtype=dtype))

    def forward(
        self,
        x: torch.Tensor,
        additive_mask: torch.Tensor,
        rate: float,
        gen: torch.Generator | None,
    ) -> torch.Tensor:
        B, L, d = x.shape
        h = torch.nn.functional.layer_norm(x, (d,), self.ln1_scale, self.ln1_offset)
        q = (h @ self.attn_q).view(B, L, self.n_heads, self.head_dim).transpose(1, 2)
        k = (h @ self.attn_k).view(B, L, self.n_heads, self.head_dim).transpose(1, 2)
        v = (h @ self.attn_v).view(B, L, self.n_heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        scores = scores + additive_mask  # [B, 1, L, L] broadcast over heads
        probs = torch.softmax(scores, dim=-1)
        probs = seeded_dropout(probs, rate, gen)
        ctx = (probs @ v).transpose(1, 2).reshape(B, L, d)
        x = x + ctx @ self.attn_o

        h = torch.nn.functional.layer_norm(x, (d,), self.ln2_scale, self.ln2_offset)
        hidden = torch.relu(h @ self.ffn_w1 + self.ffn_b1)
        hidden = seeded_dropout(hidden, rate, gen)
        return x + hidden @ self.ffn_w2 + self.ffn_b2


class SequenceEncoder(nn.Module):
    """Item + learned positional embeddings feeding stacked causal attention blocks.

    The item table has catalog_size + 2 rows: row 0 is padding (held at zero),
    row catalog_size + 1 is the augmentation mask token. Item embeddings are
    tied between input lookup and candidate scoring.
    """

    def __init__(
        self,
        config: EncoderConfig,
        catalog_size: int,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if catalog_size < 1:
            raise ValueError("catalog_size must be >= 1")
        self.config = config
        self.catalog_size = catalog_size
        d = config.embed_dim
        self.item_emb = nn.Parameter(torch.empty(catalog_size + 2, d, dtype=dtype))
        self.pos_emb = nn.Parameter(torch.empty(config.max_seq_len, d, dtype=dtype))
        self.blocks = nn.ModuleList(
            EncoderBlock(d, config.n_heads, config.ffn_dim, dtype) for _ in range(config.n_layers)
        )
        self.final_scale = nn.Parameter(torch.ones(d, dtype=dtype))
        self.final_offset = nn.Parameter(torch.zeros(d, dtype=dtype))
        self._init_weights(seed)

    def _init_weights(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for name, p in self.named_parameters():
                leaf = name.rsplit(".", 1)[-1]
                if leaf in ("ffn_b1", "ffn_b2", "ln1_offset", "ln2_offset", "final_offset"):
                    p.zero_()
                elif leaf in ("ln1_scale", "ln2_scale", "final_scale"):
                    p.fill_(1.0)
                else:
                    _trunc_normal_(p, 0.02, gen)
            self.item_emb[PAD_ID].zero_()

    @property
    def dtype(self) -> torch.dtype:
        return self.item_emb.dtype

    def _check_ids(self, ids: torch.Tensor) -> None:
        if ids.numel() and int(ids.max()) >= self.item_emb.shape[0]:
            raise ValueError(
                f"item id {int(ids.max())} out of range for embedding table "
                f"of {self.item_emb.shape[0]} rows"
            )

    def forward(self, inputs: torch.Tensor, dropout_seed: int | None = None) -> torch.Tensor:
        """Per-step representations [B, L, d]; dropout_seed None means eval mode."""
        if inputs.shape[1] != self.config.max_seq_len:
            raise ValueError(f"inputs must be [B, {self.config.max_seq_len}], got {tuple(inputs.shape)}")
        self._check_ids(inputs)
        rate = self.config.dropout_rate
        gen = None
        if dropout_seed is not None and rate > 0.0:
            gen = torch.Generator().manual_seed(int(dropout_seed))

        B, L = inputs.shape
        x = self.item_emb[inputs] + self.pos_emb.unsqueeze(0)
        x = seeded_dropout(x, rate, gen)

        # Query t may attend to keys <= t that hold real items; a padding query
        # keeps its own key so no softmax row is empty.
        causal = torch.tril(torch.ones(L, L, dtype=torch.bool))
        allowed = causal.unsqueeze(0) & (inputs != PAD_ID).unsqueeze(1)
        allowed = allowed | torch.eye(L, dtype=torch.bool).unsqueeze(0)
        additive = torch.zeros(B, 1, L, L, dtype=x.dtype)
        additive.masked_fill_(~allowed.unsqueeze(1), float("-inf"))

        for block in self.blocks:
            x = block(x, additive, rate, gen)
        return torch.nn.functional.layer_norm(
            x, (x.shape[-1],), self.final_scale, self.final_offset
        )


def init_params(config: EncoderConfig, catalog_size: int, seed: int) -> SequenceEncoder:
    """Fresh encoder with truncated-normal (sigma 0.02) weights, deterministic per seed."""
    return SequenceEncoder(config, catalog_size, seed=seed)


def forward_pass(
    model: SequenceEncoder,
    batch: SequenceBatch,
    dropout_seed: int | None = None,
    dropout_id: int = 1,
) -> PassOutput:
    inputs = torch.from_numpy(batch.inputs)
    return PassOutput(representations=model(inputs, dropout_seed), dropout_id=dropout_id)


def forward_two_pass(
    model: SequenceEncoder, batch: SequenceBatch, seed1: int, seed2: int
) -> tuple[PassOutput, PassOutput]:
    """Two forwards over identical inputs and parameters with independent dropout."""
    if seed1 == seed2:
        raise ValueError("two-pass forward needs distinct dropout seeds")
    return (
        forward_pass(model, batch, dropout_seed=seed1, dropout_id=1),
        forward_pass(model, batch, dropout_seed=seed2, dropout_id=2),
    )


def score(representation: torch.Tensor, candidate_items, model: SequenceEncoder) -> torch.Tensor:
    """Inner-product logits of one representation against candidate item embeddings."""
    ids = torch.as_tensor(candidate_items, dtype=torch.long)
    model._check_ids(ids)
    return representation @ model.item_emb[ids].T


def parameter_tensors(model: SequenceEncoder) -> dict[str, torch.Tensor]:
    return dict(model.named_parameters())
