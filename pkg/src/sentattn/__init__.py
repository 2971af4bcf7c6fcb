"""Sentence-constrained encoder-decoder attention at desk scale."""
from .attention import AttentionConfig, OpCounter
from .corpus import SentencePartition, SummaryExample, Vocab
from .model import (ApproxSubset, Full, IdealSubset, MixSubset, ModelConfig, ModelFreeSubset, RandomSubset,
                    Seq2Seq)

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig", "OpCounter", "SentencePartition", "SummaryExample", "Vocab",
    "ApproxSubset", "Full", "IdealSubset", "MixSubset", "ModelConfig", "ModelFreeSubset", "RandomSubset",
    "Seq2Seq",
]
