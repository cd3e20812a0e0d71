"""``unirag`` command line: index, train, query, rag, eval and bank commands.

Exit codes: 0 success, 2 configuration, 3 I/O or integrity, 4 validation,
5 backend failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import vecindex
from .config import RunConfig, resolve
from .embedders import Query
from .encoder import FrozenEncoder
from .errors import (
    DimensionMismatch,
    EmptyInput,
    InvalidConfig,
    IoFailure,
    UniRagError,
    ValidationError,
)
from .evalharness import (
    SystemConfig,
    ablation_csv,
    ablation_markdown,
    build_system,
    gen_bench,
    run_ablation,
    run_grid,
    training_triplets,
)
from .numkit import normalize
from .pipeline import Pipeline
from .promptbank import init_bank, load_bank, save_bank
from .rag import (
    DEFAULT_SYSTEM_PROMPT,
    AnswerConfig,
    ChatCompletionsBackend,
    EchoBackend,
    SystemPrompt,
    answer,
)
from .trainer import Triplet, train, write_history
from .vecindex import CorpusItem, QueryCache

log = logging.getLogger("unirag")

QUERY_SCHEMA = "unirag.query/1"
RAG_SCHEMA = "unirag.rag/1"


# -- shared helpers ------------------------------------------------------------


def read_ndjson(path) -> list[dict]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except ValueError as e:
            raise ValidationError(f"{path}:{lineno}: invalid JSON: {e}") from e
        if not isinstance(row, dict):
            raise ValidationError(f"{path}:{lineno}: expected a JSON object")
        rows.append(row)
    return rows


def load_system(cfg: RunConfig, bank_path=None) -> Pipeline:
    bank = load_bank(bank_path) if bank_path else init_bank(cfg.bank, cfg.trainer.seed)
    if bank.cfg.d != cfg.encoder.d:
        raise DimensionMismatch(f"bank has d={bank.cfg.d}, encoder has d={cfg.encoder.d}")
    return Pipeline(cfg.embedder, bank, FrozenEncoder.from_config(cfg.encoder), QueryCache())


def provenance(pipe: Pipeline) -> dict:
    return {
        "bank_crc32": pipe.bank.checksum(),
        "encoder_sha256": pipe.encoder.checksum(),
        "embedder": pipe.embedder.fingerprint(),
    }


def check_provenance(index_path, pipe: Pipeline) -> None:
    stored = vecindex.read_manifest(index_path).get("provenance")
    if stored and stored != provenance(pipe):
        log.warning("index %s was built with a different bank/encoder/embedder; scores may be meaningless", index_path)


def corpus_items(rows: list[dict], pipe: Pipeline, source: str) -> list[CorpusItem]:
    """Rows carrying an ``embedding`` are used as-is (after normalising); the
    rest go through the same embed -> bank -> encode path as queries."""
    items: list[CorpusItem | None] = [None] * len(rows)
    pending: list[tuple[int, Query]] = []
    for i, row in enumerate(rows):
        try:
            item_id, style, content = str(row["id"]), str(row["style"]), str(row.get("content", ""))
        except KeyError as e:
            raise ValidationError(f"{source} record {i + 1}: missing field {e}") from e
        meta = row.get("metadata", {})
        if "embedding" in row:
            vec = np.asarray(row["embedding"], dtype=np.float64)
            if vec.shape != (pipe.d,):
                raise DimensionMismatch(f"{source} record {item_id!r}: embedding shape {vec.shape}, expected ({pipe.d},)")
            items[i] = CorpusItem(item_id, style, content, normalize(vec), meta)
        else:
            if not content:
                raise EmptyInput(f"{source} record {item_id!r}: no content and no embedding")
            pending.append((i, Query(style, content, item_id)))
    if pending:
        feats = pipe.features([q for _, q in pending])
        for (i, q), f in zip(pending, feats):
            items[i] = CorpusItem(q.id, q.style, str(rows[i].get("content", "")), f, rows[i].get("metadata", {}))
    return items


def read_payload(args) -> str | bytes:
    if args.text is not None:
        return args.text
    try:
        return Path(args.file).read_bytes()
    except OSError as e:
        raise IoFailure(f"cannot read query file {args.file}: {e}") from e


def emit(obj, fmt: str, table: str) -> None:
    if fmt == "json":
        print(json.dumps(obj, indent=2, sort_keys=True))
    else:
        print(table, end="" if table.endswith("\n") else "\n")


def results_table(ev) -> str:
    lines = [f"{'rank':>4}  {'score':>8}  {'style':<16} id"]
    for rank, (item, score) in enumerate(ev.items, start=1):
        lines.append(f"{rank:>4}  {score:>8.4f}  {item.style:<16} {item.id}")
    return "\n".join(lines) + "\n"


def results_json(ev) -> list[dict]:
    return [
        {"rank": rank, "id": item.id, "score": float(score), "style": item.style}
        for rank, (item, score) in enumerate(ev.items, start=1)
    ]


# -- commands ------------------------------------------------------------------


def cmd_index(args, cfg: RunConfig) -> int:
    path = args.index or cfg.index.path
    if args.action == "stats":
        index = vecindex.load(path)
        manifest = vecindex.read_manifest(path)
        styles: dict[str, int] = {}
        for it in index.items:
            styles[it.style] = styles.get(it.style, 0) + 1
        stats = {"path": str(path), "count": len(index), "d": index.d, "checksum": manifest["checksum"], "styles": styles}
        table = "\n".join(f"{k}: {v}" for k, v in stats.items())
        emit(stats, args.format, table)
        return 0
    if not args.corpus:
        raise InvalidConfig(f"index {args.action} needs --corpus")
    pipe = load_system(cfg, args.bank)
    rows = read_ndjson(args.corpus)
    if args.action == "build":
        index = vecindex.build(corpus_items(rows, pipe, args.corpus), pipe.d)
    else:
        index = vecindex.load(path)
        check_provenance(path, pipe)
        index.add_many(corpus_items(rows, pipe, args.corpus))
    vecindex.save(index, path, provenance(pipe))
    print(f"{args.action}: {len(rows)} items -> {path} ({len(index)} total)")
    return 0


def parse_triplets(rows: list[dict], source: str) -> list[Triplet]:
    out = []
    for i, row in enumerate(rows):
        try:
            parts = [Query(row[k]["style"], row[k]["payload"]) for k in ("anchor", "positive", "negative")]
        except (KeyError, TypeError) as e:
            raise ValidationError(f"{source} record {i + 1}: need anchor/positive/negative with style and payload") from e
        out.append(Triplet(*parts))
    return out


def cmd_train(args, cfg: RunConfig) -> int:
    if args.synthetic:
        bench = gen_bench(cfg.eval)
        triplets = training_triplets(bench, cfg.trainer.seed)
        embedder = bench.embedder
    elif args.data:
        triplets = parse_triplets(read_ndjson(args.data), args.data)
        embedder = cfg.embedder
    else:
        raise InvalidConfig("train needs --data FILE or --synthetic")
    bank = load_bank(args.init) if args.init else init_bank(cfg.bank, cfg.trainer.seed)
    encoder = FrozenEncoder.from_config(cfg.encoder)
    bank, history = train(triplets, bank, encoder, embedder, cfg.trainer)
    out = Path(args.out)
    save_bank(bank, out)
    write_history(history, out / "history.csv")
    if history:
        print(f"trained {len(triplets)} triplets for {len(history)} epochs: loss {history[0].mean_loss:.6f} -> {history[-1].mean_loss:.6f}")
    print(f"bank -> {out} (crc32 {bank.checksum()})")
    return 0


def _extra_queries(specs: list[str]) -> list[Query]:
    out = []
    for spec in specs or []:
        style, sep, payload = spec.partition(":")
        if not sep:
            raise InvalidConfig(f"--with expects STYLE:PAYLOAD, got {spec!r}")
        out.append(Query(style, payload))
    return out


def cmd_query(args, cfg: RunConfig) -> int:
    path = args.index or cfg.index.path
    index = vecindex.load(path)
    pipe = load_system(cfg, args.bank)
    check_provenance(path, pipe)
    q = Query(args.style, read_payload(args), "cli")
    extra = _extra_queries(args.with_)
    feat = pipe.fused_features([[q, *extra]])[0] if extra else pipe.feature(q)
    ev = index.top_k(feat, args.k)
    emit({"schema": QUERY_SCHEMA, "results": results_json(ev)}, args.format, results_table(ev))
    return 0


def cmd_rag(args, cfg: RunConfig) -> int:
    path = args.index or cfg.index.path
    index = vecindex.load(path)
    pipe = load_system(cfg, args.bank)
    check_provenance(path, pipe)
    q = Query(args.style, read_payload(args), "cli")
    if args.backend == "live":
        backend = ChatCompletionsBackend.from_env(timeout=cfg.rag.timeout, temperature=cfg.rag.temperature)
    else:
        backend = EchoBackend()
    sp = SystemPrompt(cfg.rag.system_prompt) if cfg.rag.system_prompt else DEFAULT_SYSTEM_PROMPT
    k = args.k or cfg.rag.k
    acfg = AnswerConfig(k=k, budget=cfg.rag.budget, retries=cfg.rag.retries, backoff=cfg.rag.backoff)
    result, ev = answer(q, index, pipe.bank, pipe.encoder, pipe.embedder, sp, k, backend, pipe.cache, acfg)
    if args.format == "json":
        obj = {
            "schema": RAG_SCHEMA,
            "answer": result.text,
            "backend": result.backend,
            "attempts": result.attempts,
            "latency_ms": result.latency_ms,
        }
        if args.show_evidence:
            obj["evidence"] = results_json(ev)
        emit(obj, "json", "")
        return 0
    print(result.text, end="" if result.text.endswith("\n") else "\n")
    if args.show_evidence:
        print("--- evidence ---")
        print(results_table(ev), end="")
    return 0


def _ks(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(k) for k in text.split(","))
    except ValueError as e:
        raise InvalidConfig(f"bad --ks {text!r}") from e
    if not ks or min(ks) < 1:
        raise InvalidConfig("--ks values must be >= 1")
    return ks


def cmd_eval(args, cfg: RunConfig) -> int:
    bench = gen_bench(cfg.eval)
    sys_cfg = SystemConfig(cfg.bank, cfg.encoder, cfg.trainer, cfg.trainer.seed)
    ks = _ks(args.ks)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoFailure(f"cannot create {out}: {e}") from e
    if args.action == "grid":
        if args.bank:
            pipe = Pipeline(bench.embedder, load_bank(args.bank), FrozenEncoder.from_config(cfg.encoder))
        else:
            pipe, history = build_system(bench, sys_cfg, trained=not args.untrained)
            if history:
                write_history(history, out / "history.csv")
        report = run_grid(pipe, bench, ks)
        csv_text, md_text = report.to_csv(), report.to_markdown()
        name = "grid"
    else:
        if not args.axis or not args.values:
            raise InvalidConfig("eval ablation needs --axis and --values")
        values = [v.strip() for v in args.values.split(",") if v.strip()]
        rows = run_ablation(args.axis, values, bench, sys_cfg, ks)
        csv_text, md_text = ablation_csv(rows), ablation_markdown(rows)
        name = f"ablation_{args.axis}"
    try:
        (out / f"{name}.csv").write_text(csv_text)
        (out / f"{name}.md").write_text(md_text)
    except OSError as e:
        raise IoFailure(f"cannot write report to {out}: {e}") from e
    print(md_text, end="")
    return 0


def cmd_bank(args, cfg: RunConfig) -> int:
    if args.action == "init":
        if not args.out:
            raise InvalidConfig("bank init needs --out")
        bank = init_bank(cfg.bank, cfg.trainer.seed)
        save_bank(bank, args.out)
        print(f"bank -> {args.out} (crc32 {bank.checksum()})")
        return 0
    if not args.bank:
        raise InvalidConfig("bank inspect needs --bank")
    bank = load_bank(args.bank)
    B = bank.params["B"]
    info = {
        "N": bank.cfg.N,
        "n": bank.cfg.n,
        "K": bank.cfg.K,
        "r": bank.cfg.r,
        "top_e": bank.cfg.top_e,
        "d": bank.cfg.d,
        "parameters": bank.n_parameters(),
        "crc32": bank.checksum(),
        "max_abs_B": float(np.abs(B).max()),
        "B_all_zero": bool(not B.any()),
        "key_norms": [float(x) for x in np.linalg.norm(bank.keys, axis=1)],
    }
    table = "\n".join(f"{k}: {v}" for k, v in info.items() if k != "key_norms")
    emit(info, args.format, table)
    return 0


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("--format", choices=("table", "json"), default="table")

    parser = argparse.ArgumentParser(prog="unirag", description="Prompt-bank multi-style retrieval and RAG.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", parents=[common], help="build, extend or describe a vector index")
    p.add_argument("action", choices=("build", "add", "stats"))
    p.add_argument("--index", help="index directory (default: index.path)")
    p.add_argument("--corpus", help="NDJSON records: id, style, content, optional embedding")
    p.add_argument("--bank", help="trained bank directory used to encode the corpus")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("train", parents=[common], help="train the prompt bank")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--data", help="NDJSON triplets: anchor/positive/negative with style and payload")
    src.add_argument("--synthetic", action="store_true", help="train on the synthetic benchmark's triplets")
    p.add_argument("--init", help="start from this bank instead of a fresh one")
    p.add_argument("--out", required=True, help="output bank directory")
    p.set_defaults(func=cmd_train)

    for name, func, help_text in (("query", cmd_query, "retrieve top-k items"), ("rag", cmd_rag, "retrieve and generate")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        payload = p.add_mutually_exclusive_group(required=True)
        payload.add_argument("--text")
        payload.add_argument("--file")
        p.add_argument("--style", default="text")
        p.add_argument("--index")
        p.add_argument("--bank")
        p.set_defaults(func=func)
        if name == "query":
            p.add_argument("--k", type=int, default=5)
            p.add_argument("--with", dest="with_", action="append", metavar="STYLE:PAYLOAD", help="fuse an extra query")
        else:
            p.add_argument("--k", type=int, default=0)
            p.add_argument("--backend", choices=("stub", "live"), default="stub")
            p.add_argument("--show-evidence", action="store_true")

    p = sub.add_parser("eval", parents=[common], help="synthetic benchmark grid or ablation")
    p.add_argument("action", choices=("grid", "ablation"))
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--ks", default="1,5")
    p.add_argument("--bank", help="evaluate this bank instead of training one")
    p.add_argument("--untrained", action="store_true")
    p.add_argument("--axis", choices=("insertion_depth", "token_num", "bank_size"))
    p.add_argument("--values", help="comma-separated axis values")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bank", parents=[common], help="create or inspect a prompt bank")
    p.add_argument("action", choices=("init", "inspect"))
    p.add_argument("--bank")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bank)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve(args.config, overrides=args.overrides)
        return args.func(args, cfg)
    except UniRagError as e:
        print(f"unirag: error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"unirag: error: {e}", file=sys.stderr)
        return IoFailure.exit_code
