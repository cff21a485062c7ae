"""Desk-scale LSTM video captioning with external linguistic knowledge.

A two-layer encoder/decoder over frame features, an LSTM language model
trained on raw text, and three ways to combine them (weight transplant at
initialization, per-step probability interpolation, hidden-state
concatenation), plus pretrained word vectors, ensembling, beam search and
corpus BLEU@4. Deterministic end to end: one fully specified counter-based
RNG, float64 training math, and byte-stable file formats.
"""

__version__ = "0.1.0"
