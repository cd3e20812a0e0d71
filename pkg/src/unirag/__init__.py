"""Prompt-bank conditioned multi-style retrieval with a small RAG front end."""

__version__ = "0.1.0"

from .embedders import EmbedderConfig, Embedding, Query, embed, embed_batch, fuse_multi_query
from .encoder import EncoderConfig, FrozenEncoder
from .errors import UniRagError
from .pipeline import Pipeline
from .promptbank import BankConfig, PromptBank, init_bank, load_bank, save_bank
from .trainer import TrainConfig, Triplet, train
from .vecindex import CorpusItem, EvidenceSet, VectorIndex

__all__ = [
    "BankConfig",
    "CorpusItem",
    "EmbedderConfig",
    "Embedding",
    "EncoderConfig",
    "EvidenceSet",
    "FrozenEncoder",
    "Pipeline",
    "PromptBank",
    "Query",
    "TrainConfig",
    "Triplet",
    "UniRagError",
    "VectorIndex",
    "embed",
    "embed_batch",
    "fuse_multi_query",
    "init_bank",
    "load_bank",
    "save_bank",
    "train",
]
