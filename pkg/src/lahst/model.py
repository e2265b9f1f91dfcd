"""Temporal core: causal sequence attention over chunk embeddings, masked
multi-head label attention, and the per-position label-wise output layer.

For a stay of N chunks the model emits an (N, L) probability matrix whose
row t is a function of chunks 1..t only. Label attention uses L learnable
label embeddings as queries against the causal context; the output layer
scores each label against its own attended context vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from lahst import autodiff as ad
from lahst.autodiff import AttentionMask, DiffArray, NEG_INF
from lahst.data import CATEGORIES, ChunkSequence
from lahst.encoder import ChunkEmbeddings, EncoderParams, encode_chunks, init_encoder


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    n_layers: int = 1
    n_heads: int = 1  # causal self-attention heads
    n_label_heads: int = 1
    vocab_size: int = 400
    n_labels: int = 20
    chunk_tokens: int = 32
    use_category_embedding: bool = True
    output_bias: bool = True
    learned_positions: bool = False
    max_positions: int = 512

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_model % self.n_label_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_label_heads {self.n_label_heads}"
            )
        if self.n_labels < 1:
            raise ValueError("need at least one label")

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "n_label_heads": self.n_label_heads,
            "vocab_size": self.vocab_size,
            "n_labels": self.n_labels,
            "chunk_tokens": self.chunk_tokens,
            "use_category_embedding": self.use_category_embedding,
            "output_bias": self.output_bias,
            "learned_positions": self.learned_positions,
            "max_positions": self.max_positions,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class MultiHeadParams:
    """Per-head query/key/value projections plus the shared output projection."""

    wq: list  # H x (D, D/H)
    wk: list
    wv: list
    wo: DiffArray  # (D, D)

    @property
    def n_heads(self) -> int:
        return len(self.wq)

    def named(self, prefix: str) -> dict:
        out = {}
        for i in range(self.n_heads):
            out[f"{prefix}.wq.{i}"] = self.wq[i]
            out[f"{prefix}.wk.{i}"] = self.wk[i]
            out[f"{prefix}.wv.{i}"] = self.wv[i]
        out[f"{prefix}.wo"] = self.wo
        return out


@dataclass
class BlockParams:
    """One pre-norm transformer block: masked self-attention + feed-forward."""

    ln1_g: DiffArray
    ln1_b: DiffArray
    attn: MultiHeadParams
    ln2_g: DiffArray
    ln2_b: DiffArray
    ffn_w1: DiffArray  # (D, 4D)
    ffn_b1: DiffArray
    ffn_w2: DiffArray  # (4D, D)
    ffn_b2: DiffArray

    def named(self, prefix: str) -> dict:
        out = {
            f"{prefix}.ln1_g": self.ln1_g,
            f"{prefix}.ln1_b": self.ln1_b,
            f"{prefix}.ln2_g": self.ln2_g,
            f"{prefix}.ln2_b": self.ln2_b,
            f"{prefix}.ffn_w1": self.ffn_w1,
            f"{prefix}.ffn_b1": self.ffn_b1,
            f"{prefix}.ffn_w2": self.ffn_w2,
            f"{prefix}.ffn_b2": self.ffn_b2,
        }
        out.update(self.attn.named(f"{prefix}.attn"))
        return out


@dataclass
class LahstParams:
    config: ModelConfig
    encoder: EncoderParams
    blocks: list  # of BlockParams
    label_q: DiffArray  # (L, D)
    label_attn: MultiHeadParams
    out_w: DiffArray  # (L, D)
    out_b: DiffArray | None  # (L,) or None under strict no-bias mode
    pos_emb: DiffArray | None = None
    label_prior: np.ndarray | None = None  # non-trainable metadata

    def named_parameters(self) -> dict:
        out = dict(self.encoder.named())
        for i, block in enumerate(self.blocks):
            out.update(block.named(f"causal.{i}"))
        out["label_q"] = self.label_q
        out.update(self.label_attn.named("label_attn"))
        out["out_w"] = self.out_w
        if self.out_b is not None:
            out["out_b"] = self.out_b
        if self.pos_emb is not None:
            out["pos_emb"] = self.pos_emb
        return out

    def zero_grads(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def copy(self) -> "LahstParams":
        def cp(arr):
            return arr.copy() if arr is not None else None

        return LahstParams(
            config=self.config,
            encoder=EncoderParams(
                token_emb=cp(self.encoder.token_emb),
                cat_emb=cp(self.encoder.cat_emb),
                w=cp(self.encoder.w),
                b=cp(self.encoder.b),
                use_category=self.encoder.use_category,
            ),
            blocks=[
                BlockParams(
                    ln1_g=cp(b.ln1_g),
                    ln1_b=cp(b.ln1_b),
                    attn=MultiHeadParams(
                        wq=[cp(w) for w in b.attn.wq],
                        wk=[cp(w) for w in b.attn.wk],
                        wv=[cp(w) for w in b.attn.wv],
                        wo=cp(b.attn.wo),
                    ),
                    ln2_g=cp(b.ln2_g),
                    ln2_b=cp(b.ln2_b),
                    ffn_w1=cp(b.ffn_w1),
                    ffn_b1=cp(b.ffn_b1),
                    ffn_w2=cp(b.ffn_w2),
                    ffn_b2=cp(b.ffn_b2),
                )
                for b in self.blocks
            ],
            label_q=cp(self.label_q),
            label_attn=MultiHeadParams(
                wq=[cp(w) for w in self.label_attn.wq],
                wk=[cp(w) for w in self.label_attn.wk],
                wv=[cp(w) for w in self.label_attn.wv],
                wo=cp(self.label_attn.wo),
            ),
            out_w=cp(self.out_w),
            out_b=cp(self.out_b),
            pos_emb=cp(self.pos_emb),
            label_prior=None if self.label_prior is None else self.label_prior.copy(),
        )


def _init_heads(rng, dim: int, n_heads: int, prefix: str) -> MultiHeadParams:
    head_dim = dim // n_heads
    bound = 1.0 / np.sqrt(dim)

    def proj(tag, i):
        return DiffArray.param(rng.uniform(-bound, bound, size=(dim, head_dim)), f"{prefix}.{tag}.{i}")

    return MultiHeadParams(
        wq=[proj("wq", i) for i in range(n_heads)],
        wk=[proj("wk", i) for i in range(n_heads)],
        wv=[proj("wv", i) for i in range(n_heads)],
        wo=DiffArray.param(rng.uniform(-bound, bound, size=(dim, dim)), f"{prefix}.wo"),
    )


def init_params(config: ModelConfig, seed: int) -> LahstParams:
    """Scaled-uniform projections, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng([seed, 0xC0FFEE])
    d = config.d_model
    bound = 1.0 / np.sqrt(d)
    blocks = []
    for i in range(config.n_layers):
        blocks.append(
            BlockParams(
                ln1_g=DiffArray.param(np.ones(d), f"causal.{i}.ln1_g"),
                ln1_b=DiffArray.param(np.zeros(d), f"causal.{i}.ln1_b"),
                attn=_init_heads(rng, d, config.n_heads, f"causal.{i}.attn"),
                ln2_g=DiffArray.param(np.ones(d), f"causal.{i}.ln2_g"),
                ln2_b=DiffArray.param(np.zeros(d), f"causal.{i}.ln2_b"),
                ffn_w1=DiffArray.param(rng.uniform(-bound, bound, size=(d, 4 * d)), f"causal.{i}.ffn_w1"),
                ffn_b1=DiffArray.param(np.zeros(4 * d), f"causal.{i}.ffn_b1"),
                ffn_w2=DiffArray.param(
                    rng.uniform(-1.0 / np.sqrt(4 * d), 1.0 / np.sqrt(4 * d), size=(4 * d, d)),
                    f"causal.{i}.ffn_w2",
                ),
                ffn_b2=DiffArray.param(np.zeros(d), f"causal.{i}.ffn_b2"),
            )
        )
    return LahstParams(
        config=config,
        encoder=init_encoder(config.vocab_size, d, rng, use_category=config.use_category_embedding),
        blocks=blocks,
        label_q=DiffArray.param(rng.uniform(-bound, bound, size=(config.n_labels, d)), "label_q"),
        label_attn=_init_heads(rng, d, config.n_label_heads, "label_attn"),
        out_w=DiffArray.param(rng.uniform(-bound, bound, size=(config.n_labels, d)), "out_w"),
        out_b=DiffArray.param(np.zeros(config.n_labels), "out_b") if config.output_bias else None,
        pos_emb=(
            DiffArray.param(rng.uniform(-bound, bound, size=(config.max_positions, d)), "pos_emb")
            if config.learned_positions
            else None
        ),
        label_prior=None,
    )


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------


def build_time_mask(t: int, n: int) -> AttentionMask:
    """Availability mask for temporal position t (1-indexed): live i <= t.

    Constant across the label dimension, so a 1-D row broadcasts over any
    (L, n) score matrix.
    """
    if not 1 <= t <= n:
        raise ValueError(f"temporal position {t} outside [1, {n}]")
    values = np.full(n, NEG_INF)
    values[:t] = 0.0
    return AttentionMask(values)


def stacked_time_masks(n: int) -> AttentionMask:
    """All n time masks stacked for one batched label-attention pass.

    Shape (n, 1, n): entry [t-1, 0, i] is live iff i < t, broadcasting over
    the label dimension of an (L, n) score matrix.
    """
    live = np.tril(np.ones((n, n), dtype=bool))[:, None, :]
    return AttentionMask.from_live(live)


# ---------------------------------------------------------------------------
# attention stages
# ---------------------------------------------------------------------------


def _self_attention(x: DiffArray, attn: MultiHeadParams, mask: AttentionMask) -> DiffArray:
    d = x.shape[-1]
    head_dim = d // attn.n_heads
    scale = 1.0 / np.sqrt(head_dim)
    heads = []
    for i in range(attn.n_heads):
        q = ad.matmul(x, attn.wq[i])
        k = ad.matmul(x, attn.wk[i])
        v = ad.matmul(x, attn.wv[i])
        scores = ad.scale(ad.matmul(q, ad.transpose_last(k)), scale)
        weights = ad.masked_softmax(scores, mask)
        heads.append(ad.matmul(weights, v))
    return ad.matmul(ad.concat(heads, axis=-1), attn.wo)


def causal_attend(e: ChunkEmbeddings | DiffArray, params: LahstParams) -> DiffArray:
    """Contextualize chunk embeddings; row i depends on rows 1..i only.

    Pre-norm blocks: masked self-attention plus residual, then a 4x GELU
    feed-forward plus residual.
    """
    x = e.e if isinstance(e, ChunkEmbeddings) else e
    n = x.shape[0]
    if n == 0:
        return x
    if params.pos_emb is not None:
        if n > params.pos_emb.shape[0]:
            raise ValueError(
                f"sequence of {n} chunks exceeds max_positions {params.pos_emb.shape[0]}"
            )
        x = ad.add(x, ad.take_rows(params.pos_emb, np.arange(n)))
    mask = AttentionMask.causal(n)
    for block in params.blocks:
        attended = _self_attention(ad.layer_norm(x, block.ln1_g, block.ln1_b), block.attn, mask)
        x = ad.add(x, attended)
        hidden = ad.gelu(ad.add(ad.matmul(ad.layer_norm(x, block.ln2_g, block.ln2_b), block.ffn_w1), block.ffn_b1))
        x = ad.add(x, ad.add(ad.matmul(hidden, block.ffn_w2), block.ffn_b2))
    return x


@dataclass
class LabelAttentionTrace:
    """Recorded label-attention weights: (H, N, L, N) over positions.

    weights[h, t-1, l, i] is head h's weight from label l onto position i at
    temporal position t; zero for i >= t.
    """

    weights: np.ndarray
    categories: list
    stay_id: str | None = None

    def mean_over_labels(self) -> np.ndarray:
        """(N, N) attention averaged across heads and labels."""
        return self.weights.mean(axis=(0, 2))

    def final_position_category_mass(self) -> dict:
        """Attention mass per note category at the last temporal position,
        averaged over heads and labels."""
        final = self.weights[:, -1]  # (H, L, N)
        mass = {c: 0.0 for c in CATEGORIES}
        for i, cat in enumerate(self.categories):
            mass[cat] += float(final[:, :, i].mean())
        return mass


def label_attend(
    h: DiffArray,
    q: DiffArray,
    t: int,
    attn: MultiHeadParams,
    record_trace: bool = False,
):
    """Attend the L label embeddings over context rows 1..t.

    Returns the (L, D) label-wise context at position t, plus per-head
    weights when tracing.
    """
    n, d = h.shape
    head_dim = d // attn.n_heads
    scale = 1.0 / np.sqrt(head_dim)
    mask = build_time_mask(t, n)
    heads = []
    traces = []
    for i in range(attn.n_heads):
        qh = ad.matmul(q, attn.wq[i])  # (L, D/H)
        kh = ad.matmul(h, attn.wk[i])  # (N, D/H)
        vh = ad.matmul(h, attn.wv[i])
        scores = ad.scale(ad.matmul(qh, ad.transpose_last(kh)), scale)  # (L, N)
        weights = ad.masked_softmax(scores, mask)
        if record_trace:
            traces.append(weights.data.copy())
        heads.append(ad.matmul(weights, vh))
    out = ad.matmul(ad.concat(heads, axis=-1), attn.wo)
    return (out, np.stack(traces)) if record_trace else (out, None)


def label_attend_all(
    h: DiffArray,
    q: DiffArray,
    attn: MultiHeadParams,
    record_trace: bool = False,
):
    """One batched pass over all temporal positions.

    The (L, N) score matrix is shared across positions; only the stacked
    availability masks differ, so the batched result equals stacking
    ``label_attend`` over t = 1..N. Returns (N, L, D) and optionally the
    per-head weight stack (H, N, L, N).
    """
    n, d = h.shape
    head_dim = d // attn.n_heads
    scale = 1.0 / np.sqrt(head_dim)
    masks = stacked_time_masks(n)
    heads = []
    traces = []
    for i in range(attn.n_heads):
        qh = ad.matmul(q, attn.wq[i])
        kh = ad.matmul(h, attn.wk[i])
        vh = ad.matmul(h, attn.wv[i])
        scores = ad.scale(ad.matmul(qh, ad.transpose_last(kh)), scale)  # (L, N)
        weights = ad.masked_softmax(scores, masks)  # (N, L, N)
        if record_trace:
            traces.append(weights.data.copy())
        heads.append(ad.matmul(weights, vh))  # (N, L, D/H)
    out = ad.matmul(ad.concat(heads, axis=-1), attn.wo)  # (N, L, D)
    return (out, np.stack(traces)) if record_trace else (out, None)


def predict(d: DiffArray, w: DiffArray, b: DiffArray | None) -> DiffArray:
    """Per-position, per-label probability: sigmoid(w_l . d[t, l] + b_l)."""
    logits = ad.sum_(ad.mul(d, w), axis=-1)
    if b is not None:
        logits = ad.add(logits, b)
    return ad.sigmoid(logits)


# ---------------------------------------------------------------------------
# composed forward
# ---------------------------------------------------------------------------


@dataclass
class TemporalPredictions:
    """Probability matrix (N, L); row t depends only on chunks 1..t."""

    p: np.ndarray
    meta: list  # (category, timestamp, note_id) per row
    diff: DiffArray | None = None

    def __len__(self) -> int:
        return self.p.shape[0]

    @property
    def is_empty(self) -> bool:
        return self.p.shape[0] == 0

    def final_row(self) -> np.ndarray:
        if self.is_empty:
            raise ValueError("no temporal positions in empty predictions")
        return self.p[-1]


def empty_predictions(n_labels: int) -> TemporalPredictions:
    return TemporalPredictions(p=np.zeros((0, n_labels)), meta=[], diff=None)


def forward(
    seq: ChunkSequence,
    params: LahstParams,
    record_trace: bool = False,
    encoder_fn=None,
):
    """encode -> causal attention -> label attention -> output layer.

    Returns (TemporalPredictions, h, trace); h is the (N, D) context matrix
    reused by extended-context inference. An empty sequence produces the
    empty-predictions marker and h of shape (0, D).
    """
    if len(seq) == 0:
        return empty_predictions(params.config.n_labels), DiffArray(np.zeros((0, params.config.d_model))), None
    embedded = encoder_fn(seq) if encoder_fn is not None else encode_chunks(seq, params.encoder)
    h = causal_attend(embedded, params)
    d, weights = label_attend_all(h, params.label_q, params.label_attn, record_trace)
    p = predict(d, params.out_w, params.out_b)
    meta = embedded.meta if isinstance(embedded, ChunkEmbeddings) else [
        (c.category, c.timestamp, c.note_id) for c in seq.chunks
    ]
    trace = (
        LabelAttentionTrace(weights=weights, categories=[m[0] for m in meta], stay_id=seq.stay_id)
        if record_trace
        else None
    )
    return TemporalPredictions(p=p.data, meta=meta, diff=p), h, trace
