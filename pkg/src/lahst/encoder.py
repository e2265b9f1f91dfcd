"""Pluggable chunk encoder: one embedding per chunk.

The default desk-scale encoder mean-pools learned token embeddings, adds a
learned note-category embedding, and applies a single linear layer with a
tanh. Anything that maps a chunk sequence to an (N, D) embedding matrix
satisfies the same contract and can be swapped in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lahst import autodiff as ad
from lahst.autodiff import DiffArray
from lahst.data import CATEGORIES, CATEGORY_INDEX, ChunkSequence, ValidationError


@dataclass
class EncoderParams:
    token_emb: DiffArray  # (V, D)
    cat_emb: DiffArray  # (len(CATEGORIES), D)
    w: DiffArray  # (D, D)
    b: DiffArray  # (D,)
    use_category: bool = True

    @property
    def vocab_size(self) -> int:
        return self.token_emb.shape[0]

    @property
    def dim(self) -> int:
        return self.token_emb.shape[1]

    def named(self, prefix: str = "encoder") -> dict:
        return {
            f"{prefix}.token_emb": self.token_emb,
            f"{prefix}.cat_emb": self.cat_emb,
            f"{prefix}.w": self.w,
            f"{prefix}.b": self.b,
        }


def init_encoder(vocab_size: int, dim: int, rng, use_category: bool = True) -> EncoderParams:
    bound = 1.0 / np.sqrt(dim)
    return EncoderParams(
        token_emb=DiffArray.param(rng.uniform(-bound, bound, size=(vocab_size, dim)), "encoder.token_emb"),
        cat_emb=DiffArray.param(rng.uniform(-bound, bound, size=(len(CATEGORIES), dim)), "encoder.cat_emb"),
        w=DiffArray.param(rng.uniform(-bound, bound, size=(dim, dim)), "encoder.w"),
        b=DiffArray.param(np.zeros(dim), "encoder.b"),
        use_category=use_category,
    )


@dataclass
class ChunkEmbeddings:
    e: DiffArray  # (N, D)
    meta: list  # (category, timestamp, note_id) per row

    def __len__(self) -> int:
        return self.e.shape[0]


def encode_chunks(seq: ChunkSequence, params: EncoderParams) -> ChunkEmbeddings:
    """Encode every chunk to one D-vector; empty input gives a 0 x D matrix."""
    meta = [(c.category, c.timestamp, c.note_id) for c in seq.chunks]
    if not seq.chunks:
        return ChunkEmbeddings(DiffArray(np.zeros((0, params.dim))), meta)

    vocab = params.vocab_size
    for chunk in seq.chunks:
        bad = chunk.tokens[(chunk.tokens < 0) | (chunk.tokens >= vocab)]
        if bad.size:
            raise ValidationError(
                f"token id {int(bad[0])} outside vocabulary of size {vocab}"
            )

    x = ad.bag_mean(params.token_emb, [c.tokens for c in seq.chunks])
    if params.use_category:
        cat_idx = np.array([CATEGORY_INDEX[c.category] for c in seq.chunks], dtype=np.int64)
        x = ad.add(x, ad.take_rows(params.cat_emb, cat_idx))
    e = ad.tanh(ad.add(ad.matmul(x, params.w), params.b))
    if np.isnan(e.data).any():
        raise FloatingPointError("chunk embeddings contain NaN")
    return ChunkEmbeddings(e, meta)
