"""Confidence-aware audio captioning and quality-aware generation on a toy corpus."""

from ._core import (
    CapTeller,
    DataError,
    Generator,
    bleu4,
    confidence_distribution,
    decode,
    encode,
    filter_stats,
    load_manifest,
    preference_pairs,
    quantizer_boundaries,
    rouge_l,
    run_cli,
    to_mel,
    toy_clip,
    vocabulary_size,
)

__all__ = [
    "CapTeller",
    "DataError",
    "Generator",
    "bleu4",
    "confidence_distribution",
    "decode",
    "encode",
    "filter_stats",
    "load_manifest",
    "preference_pairs",
    "quantizer_boundaries",
    "rouge_l",
    "run_cli",
    "to_mel",
    "toy_clip",
    "vocabulary_size",
]
