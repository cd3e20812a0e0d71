"""Query -> prompt-conditioned feature, shared by training, retrieval and RAG.

The same path embeds queries and corpus items, so a corpus item indexed by
``Pipeline.features`` lives in the space that queries are scored in.
"""

from __future__ import annotations

import time
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .embedders import EmbedderConfig, Embedding, Query, embed, fuse_multi_query
from .encoder import FrozenEncoder, tokenize, tokenize_multi
from .promptbank import PromptBank, adapt_all, select_batch
from .vecindex import CorpusItem, QueryCache, VectorIndex, cached_embed


@dataclass
class StageTimer:
    totals: dict[str, float] = field(default_factory=lambda: defaultdict(float))

    def add(self, stage: str, seconds: float) -> None:
        self.totals[stage] += seconds


@dataclass
class Pipeline:
    embedder: EmbedderConfig
    bank: PromptBank
    encoder: FrozenEncoder
    cache: QueryCache | None = None
    timer: StageTimer | None = None

    @property
    def d(self) -> int:
        return self.encoder.d

    def _tick(self, stage: str, t0: float) -> float:
        t1 = time.perf_counter()
        if self.timer is not None:
            self.timer.add(stage, t1 - t0)
        return t1

    def embed(self, q: Query) -> Embedding:
        if self.cache is not None:
            return cached_embed(self.cache, q, self.embedder)
        return embed(q, self.embedder)

    def prepare(self, queries: list[Query]) -> tuple[np.ndarray, np.ndarray]:
        """Frozen per-query inputs: prototype embeddings and content tokens."""
        E = np.array([self.embed(q).vector for q in queries]).reshape(-1, self.d)
        content = np.array([tokenize(q, self.encoder.cfg, self.embedder) for q in queries])
        return E, content.reshape(len(queries), self.encoder.cfg.max_len, self.d)

    def prepare_fused(self, groups: list[list[Query]]) -> tuple[np.ndarray, np.ndarray]:
        E = np.array([fuse_multi_query([self.embed(q) for q in g]).vector for g in groups])
        content = np.array([tokenize_multi(g, self.encoder.cfg, self.embedder) for g in groups])
        return E.reshape(-1, self.d), content.reshape(len(groups), self.encoder.cfg.max_len, self.d)

    def assemble(self, E: np.ndarray, content: np.ndarray, params=None):
        """Select and adapt prompts, then lay out [CLS; prompts; content]."""
        bank = self.bank
        params = bank.params if params is None else params
        sel, scores = select_batch(params["keys"], E, bank.cfg.n)
        adapted, acache = adapt_all(params, bank.cfg.top_e)
        prefix = np.repeat(adapted[sel], self.encoder.cfg.token_num, axis=1)
        B = E.shape[0]
        cls = np.broadcast_to(self.encoder.cls, (B, 1, self.d))
        X = np.concatenate([cls, prefix, content], axis=1)
        return X, prefix, sel, scores, adapted, acache

    def features_from(self, E: np.ndarray, content: np.ndarray, insertion: str | None = None) -> np.ndarray:
        if E.shape[0] == 0:
            return np.zeros((0, self.d))
        t0 = time.perf_counter()
        X, prefix, *_ = self.assemble(E, content)
        t0 = self._tick("bank", t0)
        out = self.encoder.forward(X, prefix, insertion or self.encoder.cfg.insertion)
        self._tick("encode", t0)
        return out

    def features(self, queries: list[Query], insertion: str | None = None) -> np.ndarray:
        t0 = time.perf_counter()
        E, content = self.prepare(queries)
        self._tick("embed", t0)
        return self.features_from(E, content, insertion)

    def feature(self, q: Query, insertion: str | None = None) -> np.ndarray:
        return self.features([q], insertion)[0]

    def fused_features(self, groups: list[list[Query]], insertion: str | None = None) -> np.ndarray:
        t0 = time.perf_counter()
        E, content = self.prepare_fused(groups)
        self._tick("embed", t0)
        return self.features_from(E, content, insertion)

    def index_corpus(self, queries: list[Query], contents: list[str] | None = None, metadata=None) -> VectorIndex:
        feats = self.features(queries)
        index = VectorIndex(self.d)
        index.add_many(
            [
                CorpusItem(
                    q.id,
                    q.style,
                    contents[i] if contents else (q.payload if isinstance(q.payload, str) else ""),
                    feats[i],
                    dict(metadata[i]) if metadata else {},
                )
                for i, q in enumerate(queries)
            ]
        )
        return index
