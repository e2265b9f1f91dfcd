"""Temporal multi-label code prediction over clinical note sequences.

A small numpy library: float64 autodiff substrate, stay/note/chunk data
model with a synthetic corpus generator, a causal hierarchical transformer
with per-label attention, extended-context training and inference, and a
multi-label evaluation suite.
"""

from lahst.autodiff import (
    AttentionMask,
    DiffArray,
    DimensionError,
    MaskError,
    Tape,
    TapeError,
    bce_loss,
    masked_softmax,
    matmul,
    sigmoid,
)

__all__ = [
    "AttentionMask",
    "DiffArray",
    "DimensionError",
    "MaskError",
    "Tape",
    "TapeError",
    "bce_loss",
    "masked_softmax",
    "matmul",
    "sigmoid",
]

__version__ = "0.1.0"
