import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tests.conftest import load_fixture
from tests.oracles.reference import dense_lora, exhaustive_select
from tests.tolerances import TOL
from unirag.errors import ChecksumMismatch, InvalidConfig, IoFailure, ShapeMismatch, VersionMismatch
from unirag.manifest import dumps_sealed
from unirag.promptbank import (
    PARAM_ORDER,
    BankConfig,
    ExpertAdapter,
    PromptBank,
    PromptEntry,
    adapt_all,
    adapt_prompt,
    init_bank,
    load_bank,
    param_shapes,
    parameter_count,
    retrieve_adapted,
    route,
    save_bank,
    select_prompts,
)


def random_bank(cfg: BankConfig, seed: int, b_scale: float = 0.3) -> PromptBank:
    rng = np.random.default_rng(seed)
    params = {k: rng.standard_normal(s) for k, s in param_shapes(cfg).items()}
    params["B"] *= b_scale
    return PromptBank(cfg, params, seed)


def basis_bank(d: int = 4) -> PromptBank:
    cfg = BankConfig(N=d, n=1, K=2, r=1, top_e=1, d=d)
    bank = random_bank(cfg, 0)
    params = dict(bank.params)
    params["keys"] = np.eye(d)
    return PromptBank(cfg, params)


def test_init_is_deterministic_and_neutral():
    cfg = BankConfig()
    a, b = init_bank(cfg, 42), init_bank(cfg, 42)
    for k in PARAM_ORDER:
        assert a.params[k].tobytes() == b.params[k].tobytes()
    assert not a.params["B"].any()
    for i in range(cfg.N):
        e = a.entry(i)
        assert np.array_equal(adapt_prompt(e, cfg.top_e), e.base_prompt)


def test_fresh_key_cosines_are_small():
    means = []
    for seed in range(100):
        keys = init_bank(BankConfig(N=16, d=64), seed).keys
        u = keys / np.linalg.norm(keys, axis=1, keepdims=True)
        G = u @ u.T
        means.append(G[np.triu_indices(16, 1)].mean())
    assert abs(float(np.mean(means))) <= TOL["fresh_key_cosine"]
    assert max(abs(m) for m in means) <= TOL["fresh_key_cosine"]


def test_parameter_count_matches_enumeration():
    for cfg in (BankConfig(), BankConfig(N=4, n=2, K=2, r=2, d=8), BankConfig(N=3, n=1, K=1, r=1, top_e=1, d=5)):
        bank = init_bank(cfg)
        enumerated = sum(1 for name in PARAM_ORDER for _ in np.ndindex(bank.params[name].shape))
        assert enumerated == parameter_count(cfg) == bank.n_parameters()
    assert parameter_count(BankConfig()) == 16 * (2 * 64 + 64 * 4 + 4 * 2 * 64 * 4)


def test_select_exact_key_match():
    bank = basis_bank(4)
    sel = select_prompts(bank, np.eye(4)[2], 1)
    assert sel.indices == (2,)
    assert sel.scores[0] == pytest.approx(1.0)


def test_select_all_entries_sorted():
    bank = random_bank(BankConfig(N=16, n=4, d=8, K=2, r=2), 3)
    q = np.random.default_rng(1).standard_normal(8)
    sel = select_prompts(bank, q, 16)
    assert sorted(sel.indices) == list(range(16))
    assert list(sel.scores) == sorted(sel.scores, reverse=True)


def test_select_matches_exhaustive_oracle():
    bank = random_bank(BankConfig(N=16, n=4, d=8, K=2, r=2), 5)
    rng = np.random.default_rng(11)
    for _ in range(50):
        q = rng.standard_normal(8)
        sel = select_prompts(bank, q, 4)
        oracle = exhaustive_select(bank.keys, q, 4)
        assert list(sel.indices) == [j for j, _ in oracle]
        np.testing.assert_allclose(sel.scores, [s for _, s in oracle], atol=TOL["score_oracle"])


def test_select_ties_go_to_lower_index():
    cfg = BankConfig(N=4, n=2, K=1, r=1, top_e=1, d=3)
    bank = random_bank(cfg, 0)
    params = dict(bank.params)
    params["keys"] = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
    bank = PromptBank(cfg, params)
    assert select_prompts(bank, [1.0, 0.0, 0.0], 2).indices == (1, 3)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_selection_scale_invariant(seed, c):
    bank = random_bank(BankConfig(N=8, n=3, d=6, K=2, r=2), seed % 17)
    q = np.random.default_rng(seed).standard_normal(6)
    assert select_prompts(bank, c * q, 3).indices == select_prompts(bank, q, 3).indices


def test_select_rejects_bad_n():
    bank = random_bank(BankConfig(N=4, n=2, d=4, K=2, r=2), 0)
    with pytest.raises(InvalidConfig):
        select_prompts(bank, np.ones(4), 5)


def entry(P, router, As, Bs):
    return PromptEntry(np.ones_like(P), np.asarray(P, float), [ExpertAdapter(a, b) for a, b in zip(As, Bs)], np.asarray(router, float))


def test_route_singleton_and_uniform():
    d = 3
    e1 = entry(np.ones(d), np.ones((d, 1)), [np.ones((d, 1))], [np.ones((1, d))])
    np.testing.assert_array_equal(route(e1, e1.base_prompt, 2), [1.0])
    e4 = entry(np.ones(d), np.zeros((d, 4)), [np.ones((d, 1))] * 4, [np.ones((1, d))] * 4)
    np.testing.assert_allclose(route(e4, e4.base_prompt, 4), [0.25] * 4, atol=TOL["closed_form"])


def test_route_closed_form_top2():
    d = 4
    router = np.zeros((d, 4))
    router[0] = [2.0, 1.0, 0.0, -1.0]
    e = entry(np.eye(d)[0], router, [np.zeros((d, 1))] * 4, [np.zeros((1, d))] * 4)
    E = math.e
    np.testing.assert_allclose(route(e, e.base_prompt, 2), [E / (E + 1), 1 / (E + 1), 0.0, 0.0], atol=TOL["closed_form"])


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_route_sparsity_and_normalisation(K, top_e, seed):
    rng = np.random.default_rng(seed)
    d = 5
    e = entry(rng.standard_normal(d), rng.standard_normal((d, K)) * 3, [np.zeros((d, 1))] * K, [np.zeros((1, d))] * K)
    alpha = route(e, e.base_prompt, top_e)
    assert np.count_nonzero(alpha) == min(top_e, K)
    assert alpha.sum() == pytest.approx(1.0, abs=TOL["routing_sum"])


def test_adapt_identity_adapter_doubles_prompt():
    d = 4
    P = np.array([1.0, -2.0, 0.5, 3.0])
    e = entry(P, np.zeros((d, 1)), [np.eye(d)], [np.eye(d)])
    np.testing.assert_array_equal(adapt_prompt(e, 1), 2 * P)


def test_adapt_matches_dense_oracle():
    rng = np.random.default_rng(9)
    d, r, K = 6, 2, 3
    for _ in range(10):
        As = rng.standard_normal((K, d, r))
        Bs = rng.standard_normal((K, r, d))
        P, R = rng.standard_normal(d), rng.standard_normal((d, K))
        e = entry(P, R, As, Bs)
        for top_e in (1, 2, 3):
            np.testing.assert_allclose(adapt_prompt(e, top_e), dense_lora(P, R, As, Bs, top_e), atol=TOL["dense_oracle"] * 10)


def test_adapt_all_matches_per_entry():
    cfg = BankConfig(N=6, n=2, K=3, r=2, top_e=2, d=5)
    bank = random_bank(cfg, 4)
    adapted, _ = adapt_all(bank.params, cfg.top_e)
    for i in range(cfg.N):
        np.testing.assert_allclose(adapted[i], adapt_prompt(bank.entry(i), cfg.top_e), atol=1e-13)


def test_lora_fixture():
    fx = load_fixture("lora")
    for case in fx["entries"]:
        A, B = np.array(case["A"]), np.array(case["B"])
        e = entry(np.array(case["prompt"]), np.array(case["router"]), A, B)
        np.testing.assert_allclose(adapt_prompt(e, fx["top_e"]), case["expected"], atol=TOL["dense_oracle"] * 10)


def test_retrieve_adapted():
    bank = basis_bank(4)
    out = retrieve_adapted(bank, np.eye(4)[1], 1)
    assert len(out) == 1
    np.testing.assert_array_equal(out[0], adapt_prompt(bank.entry(1), bank.cfg.top_e))

    fresh = init_bank(BankConfig(N=8, n=3, d=6, K=2, r=2), 1)
    q = np.random.default_rng(0).standard_normal(6)
    sel = select_prompts(fresh, q, 3)
    for j, p in zip(sel.indices, retrieve_adapted(fresh, q, 3)):
        assert np.array_equal(p, fresh.prompts[j])

    bank = random_bank(BankConfig(N=8, n=3, d=6, K=3, r=2, top_e=2), 2)
    picked = [j for j, _ in exhaustive_select(bank.keys, q, 3)]
    oracle = [dense_lora(bank.prompts[j], bank.params["routers"][j], bank.params["A"][j], bank.params["B"][j], 2) for j in picked]
    np.testing.assert_allclose(retrieve_adapted(bank, q, 3), oracle, atol=1e-11)


def test_snapshot_is_isolated():
    bank = random_bank(BankConfig(N=4, n=2, d=4, K=2, r=2), 0)
    snap = bank.snapshot()
    before = snap.checksum()
    bank.update({k: v + 1.0 for k, v in bank.params.items()})
    assert snap.checksum() == before and bank.checksum() != before
    assert bank.version == snap.version + 1
    with pytest.raises(ShapeMismatch):
        bank.update({k: np.zeros(3) for k in PARAM_ORDER})


def test_save_load_round_trip(tmp_path):
    bank = random_bank(BankConfig(N=5, n=2, d=6, K=3, r=2), 8)
    save_bank(bank, tmp_path / "b")
    loaded = load_bank(tmp_path / "b")
    assert loaded.cfg == bank.cfg and loaded.checksum() == bank.checksum()
    for k in PARAM_ORDER:
        assert loaded.params[k].tobytes() == bank.params[k].tobytes()


def test_blob_layout_is_documented_order(tmp_path):
    cfg = BankConfig(N=2, n=1, K=2, r=1, top_e=1, d=2)
    bank = random_bank(cfg, 1)
    save_bank(bank, tmp_path)
    flat = np.frombuffer((tmp_path / "params.bin").read_bytes(), dtype="<f8")
    p = bank.params
    expected = [p["keys"].ravel(), p["prompts"].ravel(), p["routers"].ravel()]
    for i in range(2):
        for k in range(2):
            expected += [p["A"][i, k].ravel(), p["B"][i, k].ravel()]
    np.testing.assert_array_equal(flat, np.concatenate(expected))


def test_load_errors(tmp_path):
    with pytest.raises(IoFailure):
        load_bank(tmp_path / "missing")
    bank = init_bank(BankConfig(N=2, n=1, K=1, r=1, top_e=1, d=2))
    save_bank(bank, tmp_path / "b")
    blob = bytearray((tmp_path / "b" / "params.bin").read_bytes())
    blob[3] ^= 0x10
    (tmp_path / "b" / "params.bin").write_bytes(bytes(blob))
    with pytest.raises(ChecksumMismatch):
        load_bank(tmp_path / "b")
    save_bank(bank, tmp_path / "c")
    m = json.loads((tmp_path / "c" / "manifest.json").read_text())
    (tmp_path / "c" / "manifest.json").write_text(dumps_sealed({**m, "version": 9}))
    with pytest.raises(VersionMismatch):
        load_bank(tmp_path / "c")
    (tmp_path / "c" / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(ChecksumMismatch):
        load_bank(tmp_path / "c")
