"""Exact cosine top-k index over corpus embeddings, with on-disk persistence
and a fingerprint-keyed cache of query embeddings."""

from __future__ import annotations

import hashlib
import json
import threading
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .embedders import EmbedderConfig, Embedding, Query, embed, get_provider
from .manifest import dumps_sealed, loads_sealed
from .numkit import normalize, pairwise_dots
from .errors import (
    ChecksumMismatch,
    DimensionMismatch,
    DuplicateId,
    EmptyIndex,
    InvalidConfig,
    IoFailure,
    ValidationError,
    VersionMismatch,
)

INDEX_FORMAT_VERSION = 1
UNIT_TOL = 1e-9


@dataclass(frozen=True)
class CorpusItem:
    id: str
    style: str
    content: str
    embedding: np.ndarray
    metadata: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class EvidenceSet:
    items: tuple[tuple[CorpusItem, float], ...]
    k: int

    def __len__(self) -> int:
        return len(self.items)

    def ids(self) -> list[str]:
        return [it.id for it, _ in self.items]

    def scores(self) -> list[float]:
        return [s for _, s in self.items]


class VectorIndex:
    """Full-scan index. Writers replace the embedding matrix wholesale, so a
    reader holding ``snapshot()`` never observes a half-applied add."""

    def __init__(self, d: int = 0):
        # d == 0 means "not yet known": the first added item fixes it
        if d < 0:
            raise InvalidConfig("index dimension must be >= 0")
        self.d = d
        self._items: list[CorpusItem] = []
        self._pos: dict[str, int] = {}
        self._matrix = np.zeros((0, d))
        self._id_rank = np.zeros(0, dtype=np.int64)
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._items)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._pos

    @property
    def items(self) -> list[CorpusItem]:
        return list(self._items)

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    def get(self, item_id: str) -> CorpusItem:
        return self._items[self._pos[item_id]]

    def _check(self, item: CorpusItem) -> np.ndarray:
        v = np.asarray(item.embedding, dtype=np.float64)
        if self.d == 0 and v.ndim == 1 and v.size:
            self.d = v.shape[0]
            self._matrix = np.zeros((0, self.d))
        if v.shape != (self.d,):
            raise DimensionMismatch(f"item {item.id!r} has embedding shape {v.shape}, index d={self.d}")
        if not np.all(np.isfinite(v)) or abs(float(np.linalg.norm(v)) - 1.0) > UNIT_TOL:
            raise ValidationError(f"item {item.id!r} embedding is not unit-normalized")
        return v

    def add(self, item: CorpusItem) -> None:
        self.add_many([item])

    def add_many(self, items: list[CorpusItem]) -> None:
        with self._lock:
            seen = set(self._pos)
            rows = []
            d0, m0 = self.d, self._matrix
            try:
                for it in items:
                    if it.id in seen:
                        raise DuplicateId(f"duplicate id {it.id!r}")
                    seen.add(it.id)
                    rows.append(self._check(it))
            except Exception:
                # a rejected batch leaves no trace, including an adopted d
                self.d, self._matrix = d0, m0
                raise
            if not rows:
                return
            base = len(self._items)
            new_items = self._items + list(items)
            self._matrix = np.vstack([self._matrix, np.array(rows)])
            self._pos = {**self._pos, **{it.id: base + i for i, it in enumerate(items)}}
            self._items = new_items
            ranks = np.empty(len(new_items), dtype=np.int64)
            ranks[np.argsort(np.array([it.id for it in new_items], dtype=object), kind="stable")] = np.arange(len(new_items))
            self._id_rank = ranks

    def snapshot(self) -> "VectorIndex":
        snap = VectorIndex(self.d)
        with self._lock:
            snap._items, snap._pos = list(self._items), dict(self._pos)
            snap._matrix, snap._id_rank = self._matrix, self._id_rank
        return snap

    def scores(self, q) -> np.ndarray:
        v = np.asarray(getattr(q, "vector", q), dtype=np.float64)
        if v.shape != (self.d,):
            raise DimensionMismatch(f"query dimension {v.shape}, index d={self.d}")
        return pairwise_dots(normalize(v), self._matrix)[0]

    def top_k(self, q, k: int) -> EvidenceSet:
        if k < 1:
            raise InvalidConfig("k must be >= 1")
        if not self._items:
            raise EmptyIndex("index is empty")
        items, matrix, ranks = self._items, self._matrix, self._id_rank
        v = np.asarray(getattr(q, "vector", q), dtype=np.float64)
        if v.shape != (self.d,):
            raise DimensionMismatch(f"query dimension {v.shape}, index d={self.d}")
        s = pairwise_dots(normalize(v), matrix)[0]
        order = np.lexsort((ranks, -s))[:k]
        return EvidenceSet(tuple((items[i], float(s[i])) for i in order), k)

    def checksum(self) -> int:
        return zlib.crc32(np.ascontiguousarray(self._matrix, dtype="<f8").tobytes())


def build(items: list[CorpusItem], d: int = 0) -> VectorIndex:
    index = VectorIndex(d or 0)
    index.add_many(items)
    return index


def top_k(index: VectorIndex, q, k: int) -> EvidenceSet:
    return index.top_k(q, k)


# -- persistence -------------------------------------------------------------


def _meta_record(it: CorpusItem) -> dict:
    return {"id": it.id, "style": it.style, "content": it.content, "metadata": it.metadata}


def save(index: VectorIndex, path, provenance: dict | None = None) -> None:
    """Write ``manifest.json``, ``embeddings.bin`` and ``metadata.ndjson``.

    ``provenance`` is stored verbatim; the CLI records which bank and encoder
    produced the features there.
    """
    path = Path(path)
    snap = index.snapshot()
    blob = np.ascontiguousarray(snap.matrix, dtype="<f8").tobytes()
    meta = "".join(json.dumps(_meta_record(it), sort_keys=True) + "\n" for it in snap.items).encode("utf-8")
    manifest = {
        "format": "unirag-index",
        "version": INDEX_FORMAT_VERSION,
        "d": snap.d,
        "count": len(snap),
        "dtype": "<f8",
        "checksum": zlib.crc32(blob),
        "metadata_checksum": zlib.crc32(meta),
    }
    if provenance:
        manifest["provenance"] = provenance
    try:
        path.mkdir(parents=True, exist_ok=True)
        (path / "embeddings.bin").write_bytes(blob)
        (path / "metadata.ndjson").write_bytes(meta)
        (path / "manifest.json").write_text(dumps_sealed(manifest))
    except OSError as e:
        raise IoFailure(f"cannot write index to {path}: {e}") from e


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        raw = (path / "manifest.json").read_bytes()
    except OSError as e:
        raise IoFailure(f"cannot read index manifest in {path}: {e}") from e
    manifest = loads_sealed(raw, "index")
    try:
        _ = (manifest["version"], int(manifest["d"]), int(manifest["count"]), int(manifest["checksum"]))
    except (ValueError, KeyError, TypeError) as e:
        raise ChecksumMismatch(f"unreadable index manifest: {e}") from e
    if manifest.get("format") != "unirag-index" or manifest["version"] != INDEX_FORMAT_VERSION:
        raise VersionMismatch(f"unsupported index format {manifest.get('format')!r} v{manifest['version']}")
    return manifest


def load(path) -> VectorIndex:
    path = Path(path)
    manifest = read_manifest(path)
    try:
        blob = (path / "embeddings.bin").read_bytes()
        meta = (path / "metadata.ndjson").read_bytes()
    except OSError as e:
        raise IoFailure(f"cannot read index files in {path}: {e}") from e
    if zlib.crc32(blob) != int(manifest["checksum"]):
        raise ChecksumMismatch(f"embedding blob checksum mismatch in {path}")
    if zlib.crc32(meta) != int(manifest.get("metadata_checksum", -1)):
        raise ChecksumMismatch(f"metadata checksum mismatch in {path}")
    d, count = int(manifest["d"]), int(manifest["count"])
    if len(blob) != 8 * d * count or manifest.get("dtype") != "<f8":
        raise ChecksumMismatch(f"embedding blob has {len(blob)} bytes, expected {8 * d * count}")
    matrix = np.frombuffer(blob, dtype="<f8").astype(np.float64).reshape(count, d)
    records = [json.loads(line) for line in meta.decode("utf-8").splitlines() if line.strip()]
    if len(records) != count:
        raise ChecksumMismatch(f"{len(records)} metadata records for {count} embeddings")
    index = VectorIndex(d)
    index.add_many(
        [CorpusItem(r["id"], r["style"], r["content"], matrix[i], r.get("metadata", {})) for i, r in enumerate(records)]
    )
    return index


# -- query cache -------------------------------------------------------------


def fingerprint(q: Query, cfg: EmbedderConfig) -> str:
    payload = q.payload if isinstance(q.payload, bytes) else q.payload.encode("utf-8")
    h = hashlib.sha256()
    for part in (get_provider(cfg).name.encode(), cfg.fingerprint().encode(), q.style.encode(), payload):
        h.update(len(part).to_bytes(8, "little"))
        h.update(part)
    return h.hexdigest()


class QueryCache:
    """Precomputed query embeddings keyed by (provider, config, style, payload)."""

    def __init__(self):
        self._store: dict[str, Embedding] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self._store)

    def get(self, key: str) -> Embedding | None:
        with self._lock:
            return self._store.get(key)

    def put(self, key: str, value: Embedding) -> None:
        with self._lock:
            self._store[key] = value


def cached_embed(cache: QueryCache, q: Query, cfg: EmbedderConfig, embed_fn=embed) -> Embedding:
    key = fingerprint(q, cfg)
    hit = cache.get(key)
    if hit is not None:
        cache.hits += 1
        return hit
    value = embed_fn(q, cfg)
    cache.misses += 1
    cache.put(key, value)
    return value
