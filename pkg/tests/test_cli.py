import json
import os

import pytest

from unirag.cli import QUERY_SCHEMA, main
from unirag.evalharness import SynthBenchConfig, gen_bench
from unirag.promptbank import BankConfig, init_bank, load_bank, parameter_count

NOISE0 = ["--set", "embedder.noise_scale=0"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def write_ndjson(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


@pytest.fixture
def corpus(tmp_path):
    bench = gen_bench(SynthBenchConfig(concepts=6))
    rows = [{"id": q.id, "style": q.style, "content": q.payload} for s in ("text", "image") for q in bench.corpus[s]]
    return write_ndjson(tmp_path / "corpus.ndjson", rows), rows


@pytest.fixture
def index(tmp_path, corpus, capsys):
    path = tmp_path / "idx"
    code, _, _ = run(capsys, "index", "build", "--corpus", str(corpus[0]), "--index", str(path), *NOISE0)
    assert code == 0
    return path


def tree(path):
    return sorted((p, os.path.getmtime(os.path.join(p, f))) for p, _, fs in os.walk(path) for f in fs)


def test_index_build_empty_and_stats(tmp_path, capsys):
    empty = tmp_path / "empty.ndjson"
    empty.write_text("")
    code, out, _ = run(capsys, "index", "build", "--corpus", str(empty), "--index", str(tmp_path / "i"))
    assert code == 0
    code, out, _ = run(capsys, "index", "stats", "--index", str(tmp_path / "i"), "--format", "json")
    assert code == 0 and json.loads(out)["count"] == 0


def test_stats_counts_items(index, corpus, capsys):
    code, out, _ = run(capsys, "index", "stats", "--index", str(index))
    assert code == 0 and f"count: {len(corpus[1])}" in out


def test_add_duplicate_names_id(index, tmp_path, capsys):
    dup = write_ndjson(tmp_path / "dup.ndjson", [{"id": "image/c002", "style": "image", "content": "concept:c002#0"}])
    code, _, err = run(capsys, "index", "add", "--index", str(index), "--corpus", str(dup), *NOISE0)
    assert code == 4 and "image/c002" in err


def test_add_precomputed_embedding(index, tmp_path, capsys):
    new = write_ndjson(tmp_path / "new.ndjson", [{"id": "extra", "style": "text", "content": "hand made", "embedding": [1.0] + [0.0] * 63}])
    assert run(capsys, "index", "add", "--index", str(index), "--corpus", str(new), *NOISE0)[0] == 0
    bad = write_ndjson(tmp_path / "bad.ndjson", [{"id": "x2", "style": "text", "content": "c", "embedding": [1.0, 0.0]}])
    assert run(capsys, "index", "add", "--index", str(index), "--corpus", str(bad), *NOISE0)[0] == 4


def test_query_large_k_and_json(index, corpus, capsys):
    code, out, _ = run(capsys, "query", "--index", str(index), "--text", "concept:c001#3", "--style", "image", "--k", "50", "--format", "json", *NOISE0)
    assert code == 0
    doc = json.loads(out)
    assert doc["schema"] == QUERY_SCHEMA
    res = doc["results"]
    assert len(res) == len(corpus[1])
    assert all(set(r) == {"rank", "id", "score", "style"} for r in res)
    assert [r["rank"] for r in res] == list(range(1, len(res) + 1))
    assert [r["score"] for r in res] == sorted((r["score"] for r in res), reverse=True)


def test_exact_item_query_on_noise_free_bench(index, capsys):
    bench = gen_bench(SynthBenchConfig(concepts=6, noise_scale=0.0))
    q = bench.queries["image"][13]
    code, out, _ = run(capsys, "query", "--index", str(index), "--text", q.payload, "--style", "image", "--format", "json", *NOISE0)
    assert code == 0
    assert json.loads(out)["results"][0]["id"] == bench.truth[(q.id, "image")]


def test_read_paths_do_not_write(index, capsys):
    before = tree(index)
    run(capsys, "query", "--index", str(index), "--text", "concept:c001#1", *NOISE0)
    run(capsys, "index", "stats", "--index", str(index))
    run(capsys, "rag", "--index", str(index), "--text", "concept:c001#1", *NOISE0)
    assert tree(index) == before


def test_rag_stub_and_evidence_consistency(index, capsys):
    args = ["--index", str(index), "--text", "concept:c004#2", "--style", "text", "--k", "4", *NOISE0]
    code, out, _ = run(capsys, "rag", *args, "--show-evidence", "--format", "json")
    assert code == 0
    doc = json.loads(out)
    for marker in ("PROMPT:", "EVIDENCE:", "QUERY:"):
        assert f"\n{marker}\n" in "\n" + doc["answer"]
    _, qout, _ = run(capsys, "query", *args, "--format", "json")
    assert [e["id"] for e in doc["evidence"]] == [r["id"] for r in json.loads(qout)["results"]]


def test_rag_live_without_endpoint(index, capsys, monkeypatch):
    monkeypatch.delenv("UNIRAG_LLM_ENDPOINT", raising=False)
    code, _, err = run(capsys, "rag", "--index", str(index), "--text", "hello", "--backend", "live")
    assert code == 2 and "UNIRAG_LLM_ENDPOINT" in err


def test_missing_index_is_io_error(tmp_path, capsys):
    assert run(capsys, "query", "--index", str(tmp_path / "nope"), "--text", "x")[0] == 3


def test_train_epochs_zero_and_determinism(tmp_path, capsys):
    trip = {"anchor": {"style": "text", "payload": "concept:c1#5"}, "positive": {"style": "image", "payload": "concept:c1#0"}, "negative": {"style": "image", "payload": "concept:c2#0"}}
    data = write_ndjson(tmp_path / "t.ndjson", [trip] * 3)
    assert run(capsys, "train", "--data", str(data), "--out", str(tmp_path / "b0"), "--set", "trainer.epochs=0")[0] == 0
    assert load_bank(tmp_path / "b0").checksum() == init_bank(BankConfig(), 42).checksum()
    for name in ("b1", "b2"):
        assert run(capsys, "train", "--data", str(data), "--out", str(tmp_path / name), "--set", "trainer.epochs=2", "--set", "trainer.lr=1e-3")[0] == 0
    assert load_bank(tmp_path / "b1").checksum() == load_bank(tmp_path / "b2").checksum() != load_bank(tmp_path / "b0").checksum()
    bad = write_ndjson(tmp_path / "bad.ndjson", [{"anchor": {"style": "text"}}])
    assert run(capsys, "train", "--data", str(bad), "--out", str(tmp_path / "b3"))[0] == 4


def test_train_synthetic_history_rows(tmp_path, capsys):
    sets = ["--set", "eval.concepts=4", "--set", "eval.train_draws=1", "--set", "trainer.epochs=3"]
    code, out, _ = run(capsys, "train", "--synthetic", "--out", str(tmp_path / "b"), *sets)
    assert code == 0
    rows = (tmp_path / "b" / "history.csv").read_text().splitlines()
    assert rows[0] == "epoch,mean_loss,lr" and [r.split(",")[0] for r in rows[1:]] == ["1", "2", "3"]


def test_eval_grid_and_ablation(tmp_path, capsys):
    sets = ["--set", "eval.concepts=4", "--set", "eval.queries_per_cell=1", "--set", "encoder.layers=1"]
    code, out, _ = run(capsys, "eval", "grid", "--out", str(tmp_path / "r"), "--untrained", *sets)
    assert code == 0 and "R@1" in out
    assert (tmp_path / "r" / "grid.csv").exists() and (tmp_path / "r" / "grid.md").exists()
    sets += ["--set", "trainer.epochs=1", "--set", "eval.train_draws=1"]
    code, out, _ = run(capsys, "eval", "ablation", "--axis", "token_num", "--values", "1,2", "--out", str(tmp_path / "r"), *sets)
    assert code == 0 and (tmp_path / "r" / "ablation_token_num.csv").read_text().count("\n") == 3
    assert run(capsys, "eval", "ablation", "--out", str(tmp_path / "r"))[0] == 2


def test_bank_inspect(tmp_path, capsys):
    assert run(capsys, "bank", "init", "--out", str(tmp_path / "b"))[0] == 0
    code, out, _ = run(capsys, "bank", "inspect", "--bank", str(tmp_path / "b"), "--format", "json")
    info = json.loads(out)
    assert code == 0 and info["N"] == 16 and info["B_all_zero"] is True
    assert info["parameters"] == parameter_count(BankConfig())
    blob = bytearray((tmp_path / "b" / "params.bin").read_bytes())
    blob[100] ^= 0xFF
    (tmp_path / "b" / "params.bin").write_bytes(bytes(blob))
    assert run(capsys, "bank", "inspect", "--bank", str(tmp_path / "b"))[0] == 3


def test_config_errors_exit_2(tmp_path, capsys):
    assert run(capsys, "bank", "init", "--out", str(tmp_path / "b"), "--set", "bank.width=3")[0] == 2
    assert run(capsys, "bank", "init", "--out", str(tmp_path / "b"), "--set", "bank.N=abc")[0] == 2
    assert run(capsys, "bank", "init", "--out", str(tmp_path / "b"), "--set", "bank.d=32")[0] == 2
    cfg = tmp_path / "c.toml"
    cfg.write_text("[bank]\nN = 8\n[mystery]\nx = 1\n")
    assert run(capsys, "bank", "init", "--out", str(tmp_path / "b"), "--config", str(cfg))[0] == 2
    assert run(capsys, "bank", "init", "--out", str(tmp_path / "b"), "--config", str(tmp_path / "none.toml"))[0] == 2
    with pytest.raises(SystemExit) as e:
        main(["index"])
    assert e.value.code == 2
