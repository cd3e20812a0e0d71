import json

import numpy as np
import pytest

from tests.conftest import load_fixture
from tests.oracles.reference import exhaustive_topk
from tests.tolerances import TOL
from unirag.embedders import EmbedderConfig, Query, embed, synthetic_payload
from unirag.errors import (
    ChecksumMismatch,
    DimensionMismatch,
    DuplicateId,
    EmptyIndex,
    InvalidConfig,
    IoFailure,
    ValidationError,
    VersionMismatch,
    ZeroVector,
)
from unirag.manifest import dumps_sealed
from unirag.vecindex import CorpusItem, QueryCache, VectorIndex, build, cached_embed, fingerprint, load, save, top_k


def random_items(count, d, seed, prefix="id"):
    rng = np.random.default_rng(seed)
    V = rng.standard_normal((count, d))
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    ids = [f"{prefix}-{j:05d}" for j in rng.permutation(count)]
    return [CorpusItem(i, "text", f"content {i}", v, {"n": int(k)}) for k, (i, v) in enumerate(zip(ids, V))]


def test_build_empty_and_add_get():
    index = build([])
    assert len(index) == 0
    item = random_items(1, 4, 0)[0]
    index.add(item)
    assert index.get(item.id) is item and index.d == 4


def test_build_thousand():
    items = random_items(1000, 8, 1)
    index = build(items)
    assert len(index) == 1000
    assert all(it.id in index for it in items)


def test_add_validation():
    index = build(random_items(3, 4, 2))
    with pytest.raises(DuplicateId, match="id-"):
        index.add(index.items[0])
    with pytest.raises(DimensionMismatch):
        index.add(CorpusItem("x", "text", "", np.ones(5) / np.sqrt(5)))
    with pytest.raises(ValidationError):
        index.add(CorpusItem("y", "text", "", np.ones(4)))
    assert len(index) == 3


def test_failed_batch_is_atomic():
    index = VectorIndex()
    good = random_items(2, 4, 3)
    with pytest.raises(DuplicateId):
        index.add_many([good[0], good[1], good[0]])
    assert len(index) == 0 and index.d == 0


def test_self_retrieval_and_whole_corpus():
    items = random_items(20, 6, 4)
    index = build(items)
    ev = top_k(index, items[7].embedding, 1)
    assert ev.ids() == [items[7].id]
    assert ev.scores()[0] == pytest.approx(1.0, abs=TOL["score_oracle"])
    ev = index.top_k(items[0].embedding, 100)
    assert len(ev) == 20
    assert ev.scores() == sorted(ev.scores(), reverse=True)


def test_top_k_errors():
    with pytest.raises(EmptyIndex):
        VectorIndex(4).top_k(np.ones(4), 1)
    index = build(random_items(3, 4, 0))
    with pytest.raises(InvalidConfig):
        index.top_k(np.ones(4), 0)
    with pytest.raises(ZeroVector):
        index.top_k(np.zeros(4), 1)
    with pytest.raises(DimensionMismatch):
        index.top_k(np.ones(3), 1)


def test_top_k_matches_exhaustive_oracle():
    items = random_items(1000, 8, 5)
    index = build(items)
    vecs, ids = [it.embedding for it in items], [it.id for it in items]
    rng = np.random.default_rng(6)
    for _ in range(100):
        q = rng.standard_normal(8)
        ev = index.top_k(q, 5)
        oracle = exhaustive_topk(vecs, ids, q, 5)
        assert ev.ids() == [i for i, _ in oracle]
        np.testing.assert_allclose(ev.scores(), [s for _, s in oracle], atol=TOL["score_oracle"])


def test_ties_break_on_lower_id():
    v = np.array([1.0, 0.0])
    index = build([CorpusItem(i, "text", "", v) for i in ("b", "c", "a")])
    assert index.top_k(v, 3).ids() == ["a", "b", "c"]


def test_topk_fixture():
    fx = load_fixture("topk")
    items = [CorpusItem(i, "text", "", np.array(v)) for i, v in zip(fx["ids"], fx["vectors"])]
    index = build(items)
    for q, expected in zip(fx["queries"], fx["expected"]):
        ev = index.top_k(np.array(q), fx["k"])
        assert ev.ids() == [e["id"] for e in expected]
        np.testing.assert_allclose(ev.scores(), [e["score"] for e in expected], atol=TOL["score_oracle"])


def test_round_trip_empty(tmp_path):
    save(VectorIndex(4), tmp_path / "idx")
    assert len(load(tmp_path / "idx")) == 0


def test_round_trip_thousand(tmp_path):
    index = build(random_items(1000, 8, 7))
    save(index, tmp_path / "idx", {"note": "x"})
    loaded = load(tmp_path / "idx")
    assert loaded.checksum() == index.checksum()
    assert loaded.matrix.tobytes() == index.matrix.tobytes()
    assert [it.metadata for it in loaded.items] == [it.metadata for it in index.items]
    rng = np.random.default_rng(8)
    for _ in range(20):
        q = rng.standard_normal(8)
        a, b = index.top_k(q, 10), loaded.top_k(q, 10)
        assert a.ids() == b.ids() and a.scores() == b.scores()
    manifest = json.loads((tmp_path / "idx" / "manifest.json").read_text())
    assert manifest["provenance"] == {"note": "x"} and manifest["count"] == 1000


def test_corruption_detected(tmp_path):
    save(build(random_items(10, 4, 9)), tmp_path / "idx")
    blob = bytearray((tmp_path / "idx" / "embeddings.bin").read_bytes())
    blob[17] ^= 0x01
    (tmp_path / "idx" / "embeddings.bin").write_bytes(bytes(blob))
    with pytest.raises(ChecksumMismatch):
        load(tmp_path / "idx")


def test_manifest_errors(tmp_path):
    with pytest.raises(IoFailure):
        load(tmp_path / "nothing")
    save(build(random_items(2, 4, 0)), tmp_path / "idx")
    m = json.loads((tmp_path / "idx" / "manifest.json").read_text())
    (tmp_path / "idx" / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(ChecksumMismatch):
        load(tmp_path / "idx")
    (tmp_path / "idx" / "manifest.json").write_text(dumps_sealed({**m, "version": 2}))
    with pytest.raises(VersionMismatch):
        load(tmp_path / "idx")


class CountingEmbed:
    def __init__(self):
        self.calls = 0

    def __call__(self, q, cfg):
        self.calls += 1
        return embed(q, cfg)


def test_cache_miss_then_hit():
    cfg, counter, cache = EmbedderConfig(), CountingEmbed(), QueryCache()
    q = Query("art", synthetic_payload("c4", 2))
    a = cached_embed(cache, q, cfg, counter)
    b = cached_embed(cache, q, cfg, counter)
    assert counter.calls == 1 and a.vector.tobytes() == b.vector.tobytes()
    assert (cache.hits, cache.misses) == (1, 1)


def test_cache_fingerprints():
    cfg = EmbedderConfig()
    p = synthetic_payload("c1", 1)
    assert fingerprint(Query("text", p), cfg) != fingerprint(Query("image", p), cfg)
    assert fingerprint(Query("text", p), cfg) != fingerprint(Query("text", p), EmbedderConfig(seed=1))
    assert fingerprint(Query("text", p), cfg) != fingerprint(Query("text", p), EmbedderConfig(provider="hashed_text"))


def test_cache_second_pass_is_provider_free():
    cfg, counter, cache = EmbedderConfig(), CountingEmbed(), QueryCache()
    rng = np.random.default_rng(0)
    qs = [Query(str(rng.choice(["text", "image", "sketch"])), synthetic_payload(f"c{rng.integers(50)}", int(rng.integers(1000)))) for _ in range(100)]
    first = [cached_embed(cache, q, cfg, counter).vector for q in qs]
    calls = counter.calls
    second = [cached_embed(cache, q, cfg, counter).vector for q in qs]
    assert counter.calls == calls
    assert all(np.array_equal(a, b) for a, b in zip(first, second))
