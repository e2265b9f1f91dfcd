"""Extended-context inference over arbitrarily long stays.

The sequence is encoded in consecutive windows of at most ``n_max`` chunks;
the per-window context matrices are concatenated in position order and one
label-attention pass runs over the whole thing. The label-attention stage
is exactly batching-invariant: its queries are the L label embeddings, so
predictions from concatenated windows equal a single pass over the same
context matrix. The causal stage is window-local by default (each window
attends within itself); an exact ``full-prefix`` mode recomputes the causal
stage with complete left context instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from lahst.data import ChunkSequence, CutoffSpec, ValidationError, chunk_stay, truncate_to_cutoff
from lahst.encoder import encode_chunks
from lahst.model import (
    LabelAttentionTrace,
    LahstParams,
    TemporalPredictions,
    causal_attend,
    empty_predictions,
    forward,
    label_attend_all,
    predict,
)

CAUSAL_SCOPES = ("window-local", "full-prefix")


def window_bounds(n_total: int, n_max: int):
    """Consecutive [start, stop) windows of at most n_max chunks."""
    if n_max < 1:
        raise ValidationError(f"n_max must be >= 1, got {n_max}")
    return [(i, min(i + n_max, n_total)) for i in range(0, n_total, n_max)]


def window_context(seq: ChunkSequence, params: LahstParams, n_max: int) -> np.ndarray:
    """Window-local context rows, concatenated in chunk position order."""
    pieces = []
    for start, stop in window_bounds(len(seq), n_max):
        window = seq.window(start, stop)
        pieces.append(causal_attend(encode_chunks(window, params.encoder), params).data)
    return np.concatenate(pieces, axis=0)


def eca_infer(
    seq: ChunkSequence,
    params: LahstParams,
    n_max: int,
    causal_scope: str = "window-local",
    record_trace: bool = False,
):
    """Predict at every temporal position of a sequence of any length.

    Runs gradient-free. Returns :class:`TemporalPredictions` (plus the
    label-attention trace when requested via ``record_trace``).
    """
    if causal_scope not in CAUSAL_SCOPES:
        raise ValidationError(f"unknown causal scope {causal_scope!r}")
    if len(seq) == 0:
        empty = empty_predictions(params.config.n_labels)
        return (empty, None) if record_trace else empty

    if causal_scope == "full-prefix":
        h = causal_attend(encode_chunks(seq, params.encoder), params).data
    else:
        h = window_context(seq, params, n_max)

    from lahst.autodiff import DiffArray

    d, weights = label_attend_all(DiffArray(h), params.label_q, params.label_attn, record_trace)
    p = predict(d, params.out_w, params.out_b)
    meta = [(c.category, c.timestamp, c.note_id) for c in seq.chunks]
    preds = TemporalPredictions(p=p.data, meta=meta, diff=None)
    if not record_trace:
        return preds
    trace = LabelAttentionTrace(
        weights=weights, categories=[m[0] for m in meta], stay_id=seq.stay_id
    )
    return preds, trace


@dataclass
class ExactnessReport:
    """Deviation measurements for the two stages of windowed inference."""

    n_total: int
    n_max: int
    label_attention_max_abs_diff: float
    causal_stage_max_abs_diff: float

    def to_dict(self) -> dict:
        return {
            "n_total": self.n_total,
            "n_max": self.n_max,
            "label_attention_max_abs_diff": self.label_attention_max_abs_diff,
            "causal_stage_max_abs_diff": self.causal_stage_max_abs_diff,
        }


def exactness_check(seq: ChunkSequence, params: LahstParams, n_max: int) -> ExactnessReport:
    """Measure where windowed inference is exact and where it deviates.

    Label-attention stage: given the same context matrix, predictions after
    window-wise computation and concatenation must equal a single pass (the
    queries are the label embeddings, independent of batching). Causal
    stage: window-local context is compared against full-prefix context and
    the deviation is reported rather than hidden.
    """
    from lahst.autodiff import DiffArray

    h_local = window_context(seq, params, n_max)
    h_full = causal_attend(encode_chunks(seq, params.encoder), params).data

    def label_stage(h: np.ndarray) -> np.ndarray:
        d, _ = label_attend_all(DiffArray(h), params.label_q, params.label_attn)
        return predict(d, params.out_w, params.out_b).data

    # single pass over h_local vs pass over the window-concatenated copy
    pieces = [h_local[start:stop] for start, stop in window_bounds(len(seq), n_max)]
    reassembled = np.concatenate(pieces, axis=0)
    la_diff = float(np.max(np.abs(label_stage(reassembled) - label_stage(h_local)), initial=0.0))
    causal_diff = float(np.max(np.abs(h_local - h_full), initial=0.0))
    return ExactnessReport(
        n_total=len(seq),
        n_max=n_max,
        label_attention_max_abs_diff=la_diff,
        causal_stage_max_abs_diff=causal_diff,
    )


def fallback_prior(params: LahstParams) -> np.ndarray:
    """Label probabilities for a stay with nothing available at the cutoff."""
    if params.label_prior is not None:
        return params.label_prior.copy()
    return np.full(params.config.n_labels, 0.5)


def predict_at_cutoff(
    stay,
    cutoff: CutoffSpec,
    params: LahstParams,
    n_max: int,
    causal_scope: str = "window-local",
) -> np.ndarray:
    """Stay-level label probabilities using notes available at the cutoff.

    Returns the final row of the truncated sequence's predictions, or the
    training-corpus label prior when truncation leaves no chunks.
    """
    seq = truncate_to_cutoff(chunk_stay(stay, params.config.chunk_tokens), cutoff)
    if len(seq) == 0:
        return fallback_prior(params)
    preds = eca_infer(seq, params, n_max, causal_scope=causal_scope)
    return preds.final_row()
