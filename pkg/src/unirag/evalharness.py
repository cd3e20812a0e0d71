"""Synthetic multi-style retrieval benchmark: generation, R@k grids, ablations."""

from __future__ import annotations

import csv
import io
import itertools
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .embedders import STYLES, EmbedderConfig, Query, stable_hash, synthetic_payload
from .encoder import EncoderConfig, FrozenEncoder
from .errors import InvalidConfig, UniRagError, UnknownTruthId
from .numkit import pairwise_dots
from .pipeline import Pipeline, StageTimer
from .promptbank import BankConfig, init_bank
from .trainer import TrainConfig, Triplet, train
from .vecindex import EvidenceSet

TRAIN_DRAW_OFFSET = 1_000_000


@dataclass(frozen=True)
class SynthBenchConfig:
    concepts: int = 32
    styles: tuple[str, ...] = ("text", "image", "sketch", "art")
    noise_scale: float = 0.05
    queries_per_cell: int = 8
    d: int = 64
    seed: int = 42
    style_gap: float = 0.5
    shared: float = 0.6
    train_draws: int = 8

    def validate(self) -> None:
        if self.concepts < 2:
            raise InvalidConfig("need at least 2 concepts")
        if len(self.styles) < 2 or len(set(self.styles)) != len(self.styles) or not set(self.styles) <= set(STYLES):
            raise InvalidConfig(f"need >= 2 distinct known styles, got {self.styles!r}")
        if self.queries_per_cell < 1:
            raise InvalidConfig("queries_per_cell must be >= 1")
        if self.noise_scale < 0:
            raise InvalidConfig("noise_scale must be >= 0")

    def embedder(self) -> EmbedderConfig:
        return EmbedderConfig(
            dimension=self.d,
            provider="synthetic",
            seed=self.seed,
            styles=self.styles,
            noise_scale=self.noise_scale,
            style_gap=self.style_gap,
            shared=self.shared,
        )

    def fingerprint(self) -> str:
        return f"{stable_hash(*sorted(asdict(self).items())):016x}"


def concept_name(j: int) -> str:
    return f"c{j:03d}"


@dataclass
class Bench:
    cfg: SynthBenchConfig
    corpus: dict[str, list[Query]]
    queries: dict[str, list[Query]]
    truth: dict[tuple[str, str], str]
    concept_of: dict[str, str] = field(default_factory=dict)

    @property
    def embedder(self) -> EmbedderConfig:
        return self.cfg.embedder()


def gen_bench(cfg: SynthBenchConfig = SynthBenchConfig()) -> Bench:
    """One corpus item per (concept, style); ``queries_per_cell`` fresh noise
    draws of every concept in every style. ``truth[(query_id, target_style)]``
    is the id of the same-concept item in the target style."""
    cfg.validate()
    corpus, queries, truth, concept_of = {}, {}, {}, {}
    for s in cfg.styles:
        corpus[s] = [Query(s, synthetic_payload(concept_name(j), 0), f"{s}/{concept_name(j)}") for j in range(cfg.concepts)]
        qs = []
        for j in range(cfg.concepts):
            for draw in range(1, cfg.queries_per_cell + 1):
                q = Query(s, synthetic_payload(concept_name(j), draw), f"q/{s}/{concept_name(j)}/{draw}")
                qs.append(q)
                concept_of[q.id] = concept_name(j)
        queries[s] = qs
    for s in cfg.styles:
        for q in queries[s]:
            for t in cfg.styles:
                truth[(q.id, t)] = f"{t}/{concept_of[q.id]}"
    return Bench(cfg, corpus, queries, truth, concept_of)


def training_triplets(bench: Bench, seed: int | None = None) -> list[Triplet]:
    """Anchors use noise draws disjoint from the evaluation queries; the
    negative is a uniformly drawn different concept in the target style."""
    cfg = bench.cfg
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    out = []
    for s in cfg.styles:
        for t in cfg.styles:
            for j in range(cfg.concepts):
                for k in range(cfg.train_draws):
                    neg = int(rng.integers(cfg.concepts - 1))
                    neg += neg >= j
                    out.append(
                        Triplet(
                            Query(s, synthetic_payload(concept_name(j), TRAIN_DRAW_OFFSET + k)),
                            bench.corpus[t][j],
                            bench.corpus[t][neg],
                        )
                    )
    return out


# -- metrics -----------------------------------------------------------------------


def recall_at_k(ranked: EvidenceSet | list[str], truth_id: str, k: int, known_ids=None) -> int:
    ids = ranked.ids() if isinstance(ranked, EvidenceSet) else list(ranked)
    if known_ids is not None and truth_id not in known_ids:
        raise UnknownTruthId(f"truth id {truth_id!r} is not in the corpus")
    return int(truth_id in ids[:k])


def aggregate_recall(rankings: list[list[str]], truths: list[str], k: int) -> float:
    if not rankings:
        return 0.0
    return float(np.mean([recall_at_k(r, t, k) for r, t in zip(rankings, truths)]))


def rank_lists(scores: np.ndarray, ids: list[str], k: int) -> list[list[str]]:
    """Top-k id lists for a (queries, items) score matrix, ties by lower id."""
    id_rank = np.empty(len(ids), dtype=np.int64)
    id_rank[np.argsort(np.array(ids, dtype=object), kind="stable")] = np.arange(len(ids))
    out = []
    for row in scores:
        order = np.lexsort((id_rank, -row))[:k]
        out.append([ids[i] for i in order])
    return out


# -- grid --------------------------------------------------------------------------


@dataclass
class RecallReport:
    grid: dict[tuple[str, str], dict[str, float]]
    latency_ms: dict[str, float]
    fingerprint: str
    ks: tuple[int, ...] = (1, 5)

    def cells(self, kind: str = "all"):
        for key, val in sorted(self.grid.items()):
            src, dst = key
            fused = "+" in src
            diag = src == dst
            if kind == "all" or (kind == "off" and not fused and not diag) or (kind == "diag" and diag) or (kind == "fused" and fused):
                yield key, val

    def mean(self, metric: str = "R@1", kind: str = "off") -> float:
        vals = [v[metric] for _, v in self.cells(kind)]
        return float(np.mean(vals)) if vals else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["# config", self.fingerprint])
        w.writerow(["query_style", "target_style"] + [f"R@{k}" for k in self.ks])
        for (src, dst), val in self.cells("all"):
            w.writerow([src, dst] + [repr(val[f"R@{k}"]) for k in self.ks])
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = [f"<!-- config {self.fingerprint} -->", ""]
        for k in self.ks:
            cells = list(self.cells("all"))
            header = [f"{s}→{t}" for (s, t), _ in cells]
            lines.append(f"**R@{k}**")
            lines.append("")
            lines.append("| " + " | ".join(header) + " |")
            lines.append("|" + "---|" * len(header))
            lines.append("| " + " | ".join(f"{100 * v[f'R@{k}']:.1f}" for _, v in cells) + " |")
            lines.append("")
        if self.latency_ms:
            lines.append("| stage | mean ms/query |")
            lines.append("|---|---|")
            for stage, ms in self.latency_ms.items():
                lines.append(f"| {stage} | {ms:.4f} |")
        return "\n".join(lines) + "\n"


def fused_cells(styles) -> list[tuple[tuple[str, str], str]]:
    out = []
    for s1, s2 in itertools.combinations(styles, 2):
        for t in styles:
            if t not in (s1, s2):
                out.append(((s1, s2), t))
    return out


def run_grid(pipe: Pipeline, bench: Bench, ks=(1, 5), fused: bool = True, insertion: str | None = None) -> RecallReport:
    """Recall for every (query style -> target style) pair, plus fused
    two-style query cells when ``fused`` is set."""
    styles = bench.cfg.styles
    kmax = max(ks)
    timer = StageTimer()
    pipe = Pipeline(pipe.embedder, pipe.bank, pipe.encoder, pipe.cache, timer)
    n_scored = 0
    targets = {}
    for t in styles:
        feats = pipe.features(bench.corpus[t], insertion)
        targets[t] = (feats, [q.id for q in bench.corpus[t]])
    timer.totals.clear()
    t_total = time.perf_counter()

    def score(src_name, qfeats, qids):
        for t in styles:
            if "+" in src_name and t in src_name.split("+"):
                continue
            tf, tids = targets[t]
            t0 = time.perf_counter()
            ranked = rank_lists(pairwise_dots(qfeats, tf), tids, kmax)
            timer.add("top_k", time.perf_counter() - t0)
            truths = [bench.truth[(qid, t)] for qid in qids]
            grid[(src_name, t)] = {f"R@{k}": aggregate_recall(ranked, truths, k) for k in ks}

    grid: dict[tuple[str, str], dict[str, float]] = {}
    for s in styles:
        qs = bench.queries[s]
        try:
            qfeats = pipe.features(qs, insertion)
        except UniRagError as e:
            raise type(e)(f"cell {s}->*: {e}") from e
        n_scored += len(qs)
        score(s, qfeats, [q.id for q in qs])
    if fused:
        for s1, s2 in itertools.combinations(styles, 2):
            groups = [[a, b] for a, b in zip(bench.queries[s1], bench.queries[s2])]
            qfeats = pipe.fused_features(groups, insertion)
            n_scored += len(groups)
            score(f"{s1}+{s2}", qfeats, [a.id for a, _ in groups])
    total = time.perf_counter() - t_total
    latency = {stage: 1000.0 * sec / max(n_scored, 1) for stage, sec in sorted(timer.totals.items())}
    latency["end_to_end"] = 1000.0 * total / max(n_scored, 1)
    fp = f"{bench.cfg.fingerprint()}:{pipe.bank.checksum():08x}:{pipe.encoder.checksum()[:16]}"
    return RecallReport(grid, latency, fp, tuple(ks))


# -- ablations ---------------------------------------------------------------------


@dataclass(frozen=True)
class SystemConfig:
    bank: BankConfig = BankConfig()
    encoder: EncoderConfig = EncoderConfig()
    train: TrainConfig = TrainConfig()
    bank_seed: int = 42


def build_system(bench: Bench, sys_cfg: SystemConfig, trained: bool = True):
    """Fresh bank + frozen encoder, optionally trained on the bench's triplets."""
    bank = init_bank(sys_cfg.bank, sys_cfg.bank_seed)
    encoder = FrozenEncoder.from_config(sys_cfg.encoder)
    history = []
    if trained:
        bank, history = train(training_triplets(bench), bank, encoder, bench.embedder, sys_cfg.train)
    return Pipeline(bench.embedder, bank, encoder), history


ABLATION_AXES = ("insertion_depth", "token_num", "bank_size")


def run_ablation(axis: str, values, bench: Bench, sys_cfg: SystemConfig = SystemConfig(), ks=(1, 5)):
    """One train + eval per value; rows of (value, mean off-diagonal R@k per k, report)."""
    if axis not in ABLATION_AXES:
        raise InvalidConfig(f"unknown ablation axis {axis!r}")
    values = list(values)
    if not values:
        raise InvalidConfig("ablation needs at least one value")
    rows = []
    for v in values:
        if axis == "insertion_depth":
            cfg = replace(sys_cfg, encoder=replace(sys_cfg.encoder, insertion=v))
        elif axis == "token_num":
            cfg = replace(sys_cfg, encoder=replace(sys_cfg.encoder, token_num=int(v)))
        else:
            n = min(sys_cfg.bank.n, int(v))
            cfg = replace(sys_cfg, bank=replace(sys_cfg.bank, N=int(v), n=n))
        pipe, _ = build_system(bench, cfg)
        report = run_grid(pipe, bench, ks, fused=False)
        rows.append({"axis": axis, "value": v, **{f"R@{k}": report.mean(f"R@{k}", "off") for k in ks}, "report": report})
    return rows


def ablation_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    ks = [c for c in rows[0] if c.startswith("R@")]
    w.writerow(["axis", "value"] + ks)
    for r in rows:
        w.writerow([r["axis"], r["value"]] + [repr(r[k]) for k in ks])
    return buf.getvalue()


def ablation_markdown(rows) -> str:
    ks = [c for c in rows[0] if c.startswith("R@")]
    lines = ["| " + rows[0]["axis"] + " | " + " | ".join(f"mean off-diagonal {k}" for k in ks) + " |"]
    lines.append("|---|" + "---|" * len(ks))
    for r in rows:
        lines.append(f"| {r['value']} | " + " | ".join(f"{100 * r[k]:.1f}" for k in ks) + " |")
    return "\n".join(lines) + "\n"
