"""Prompt Bank training: triplet + key-alignment objective, hand-written
reverse mode, AdamW with warmup and cosine decay.

Only bank tensors (keys, prompts, routers, A, B) receive gradients. Prompt
selection and expert gating are discrete choices made in the forward pass
and held constant in the backward pass.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from .embedders import EmbedderConfig, Query
from .encoder import FrozenEncoder
from .errors import InvalidConfig, IoFailure, ShapeMismatch, StaleTape
from .numkit import cosine_dist
from .pipeline import Pipeline
from .promptbank import PARAM_ORDER, AdaptCache, PromptBank, Selection, adapt_all_backward

log = logging.getLogger(__name__)

GradientSet = dict[str, np.ndarray]


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.2
    lam: float = 0.5
    lr: float = 1e-5
    epochs: int = 20
    batch: int = 24
    warmup_epochs: int = 1
    weight_decay: float = 0.01
    seed: int = 42
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if self.margin <= 0:
            raise InvalidConfig("margin must be > 0")
        if self.lam < 0:
            raise InvalidConfig("lam must be >= 0")
        if self.lr < 0:
            raise InvalidConfig("lr must be >= 0")
        if self.epochs < 0 or self.batch < 1 or self.warmup_epochs < 0:
            raise InvalidConfig("epochs >= 0, batch >= 1 and warmup_epochs >= 0 required")
        if self.weight_decay < 0:
            raise InvalidConfig("weight_decay must be >= 0")

    def to_toml(self, path) -> None:
        try:
            Path(path).write_text(tomli_w.dumps({"trainer": asdict(self)}))
        except OSError as e:
            raise IoFailure(str(e)) from e

    @classmethod
    def from_toml(cls, path) -> "TrainConfig":
        try:
            data = tomli.loads(Path(path).read_text())
        except OSError as e:
            raise IoFailure(str(e)) from e
        except tomli.TOMLDecodeError as e:
            raise InvalidConfig(f"{path}: {e}") from e
        section = data.get("trainer", data)
        known = {f.name for f in fields(cls)}
        unknown = set(section) - known
        if unknown:
            raise InvalidConfig(f"unknown trainer keys: {sorted(unknown)}")
        return cls(**section)


@dataclass(frozen=True)
class Triplet:
    anchor: Query
    positive: Query
    negative: Query


# -- losses ---------------------------------------------------------------------


def triplet_loss(x_f, x_r, x_h, margin: float) -> float:
    return max(0.0, margin + cosine_dist(x_f, x_r) - cosine_dist(x_f, x_h))


def key_alignment_loss(E_q, selection: Selection | np.ndarray, keys: np.ndarray | None = None) -> float:
    """Sum of cosine distances from the query embedding to its selected keys.

    ``selection`` is either a :class:`Selection` together with the bank's
    ``keys`` array, or the selected key vectors themselves.
    """
    if isinstance(selection, Selection):
        vecs = keys[list(selection.indices)]
    else:
        vecs = np.atleast_2d(selection)
    if len(vecs) == 0:
        raise InvalidConfig("selection is empty")
    return float(sum(cosine_dist(E_q, k) for k in vecs))


# -- forward / backward ----------------------------------------------------------


@dataclass
class Tape:
    bank: PromptBank
    bank_version: int
    pipeline: Pipeline
    cfg: TrainConfig
    enc_tape: tuple
    acache: AdaptCache
    sel: np.ndarray
    feats: np.ndarray
    active: np.ndarray
    E_anchor: np.ndarray
    key_cos: np.ndarray
    per_sample: np.ndarray
    batch: int = field(default=0)


@dataclass
class PreparedBatch:
    """Frozen inputs for a batch of triplets: embeddings and content tokens per role."""

    E: np.ndarray  # (3, B, d)
    content: np.ndarray  # (3, B, T, d)

    def __len__(self) -> int:
        return self.E.shape[1]


def prepare_triplets(triplets: list[Triplet], pipe: Pipeline) -> PreparedBatch:
    roles = [[t.anchor for t in triplets], [t.positive for t in triplets], [t.negative for t in triplets]]
    Es, Cs = zip(*(pipe.prepare(r) for r in roles))
    return PreparedBatch(np.stack(Es), np.stack(Cs))


def forward_prepared(batch: PreparedBatch, pipe: Pipeline, cfg: TrainConfig) -> tuple[float, Tape]:
    bank = pipe.bank
    B = len(batch)
    d = pipe.d
    E = batch.E.reshape(3 * B, d)
    content = batch.content.reshape(3 * B, *batch.content.shape[2:])
    X, prefix, sel, _, _, acache = pipe.assemble(E, content)
    feats, enc_tape = pipe.encoder.forward(X, prefix, pipe.encoder.cfg.insertion, keep=True)
    xa, xp, xn = feats[:B], feats[B : 2 * B], feats[2 * B :]
    hinge = cfg.margin + (1.0 - np.sum(xa * xp, axis=1)) - (1.0 - np.sum(xa * xn, axis=1))
    active = hinge > 0.0
    trip = np.where(active, hinge, 0.0)

    Ea = E[:B] / np.linalg.norm(E[:B], axis=1, keepdims=True)
    K = bank.keys[sel[:B]]
    key_cos = np.einsum("bnd,bd->bn", K, Ea) / np.linalg.norm(K, axis=2)
    per_sample = trip + cfg.lam * np.sum(1.0 - key_cos, axis=1)
    tape = Tape(bank, bank.version, pipe, cfg, enc_tape, acache, sel, feats, active, Ea, key_cos, per_sample, B)
    return float(per_sample.mean()), tape


def forward(triplets: list[Triplet], bank: PromptBank, encoder: FrozenEncoder, embedder: EmbedderConfig, cfg: TrainConfig):
    """Mean of triplet loss plus lam * key-alignment loss over the batch."""
    pipe = Pipeline(embedder, bank, encoder)
    return forward_prepared(prepare_triplets(triplets, pipe), pipe, cfg)


def backward(tape: Tape) -> GradientSet:
    bank = tape.bank
    if bank.version != tape.bank_version:
        raise StaleTape("bank was updated after this forward pass")
    B, cfg, pipe = tape.batch, tape.cfg, tape.pipeline
    params = bank.params
    xa, xp, xn = tape.feats[:B], tape.feats[B : 2 * B], tape.feats[2 * B :]
    w = (tape.active / B)[:, None]
    g_feats = np.concatenate([w * (xn - xp), -w * xa, w * xa])
    g_rows = pipe.encoder.backward(tape.enc_tape, g_feats)
    tn = pipe.encoder.cfg.token_num
    g_sel = g_rows.reshape(3 * B, -1, tn, pipe.d).sum(axis=2)
    g_adapted = np.zeros_like(params["prompts"])
    np.add.at(g_adapted, tape.sel, g_sel)
    grads = adapt_all_backward(params, tape.acache, g_adapted)

    sel_a = tape.sel[:B]
    K = params["keys"][sel_a]
    kn = np.linalg.norm(K, axis=2, keepdims=True)
    d_cos = tape.E_anchor[:, None, :] / kn - tape.key_cos[..., None] * K / kn**2
    g_keys = np.zeros_like(params["keys"])
    np.add.at(g_keys, sel_a, -(cfg.lam / B) * d_cos)
    grads["keys"] = g_keys
    return {k: grads[k] for k in PARAM_ORDER}


# -- optimizer -------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def lr_at(cfg: TrainConfig, step_index: int, steps_per_epoch: int) -> float:
    """Linear warmup over ``warmup_epochs``, then cosine decay reaching 0 at
    ``step_index == epochs * steps_per_epoch``."""
    total = cfg.epochs * steps_per_epoch
    warm = min(cfg.warmup_epochs * steps_per_epoch, total)
    if step_index < warm:
        return cfg.lr * (step_index + 1) / warm
    if step_index >= total:
        return 0.0
    progress = (step_index - warm) / (total - warm)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def optimizer_step(params, grads, state: AdamState, cfg: TrainConfig, lr: float):
    """One AdamW update with decoupled weight decay; returns new params and state."""
    t = state.t + 1
    new_params, m, v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m[name] = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v[name] = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        m_hat = m[name] / (1.0 - cfg.beta1**t)
        v_hat = v[name] / (1.0 - cfg.beta2**t)
        decayed = p - lr * cfg.weight_decay * p
        new_params[name] = decayed - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return new_params, AdamState(m, v, t)


# -- loop ------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    lr: float


def train(
    dataset: list[Triplet] | PreparedBatch,
    bank: PromptBank,
    encoder: FrozenEncoder,
    embedder: EmbedderConfig,
    cfg: TrainConfig,
) -> tuple[PromptBank, list[EpochRecord]]:
    """Train a copy of ``bank``; the input bank, encoder and embedder are untouched."""
    cfg.validate()
    bank = bank.snapshot()
    pipe = Pipeline(embedder, bank, encoder)
    data = dataset if isinstance(dataset, PreparedBatch) else prepare_triplets(list(dataset), pipe)
    count = len(data)
    history: list[EpochRecord] = []
    if count == 0 or cfg.epochs == 0:
        return bank, history
    steps_per_epoch = math.ceil(count / cfg.batch)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.zeros_like(bank.params)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(count)
        losses = np.zeros(count)
        lr = 0.0
        for start in range(0, count, cfg.batch):
            idx = order[start : start + cfg.batch]
            mini = PreparedBatch(data.E[:, idx], data.content[:, idx])
            _, tape = forward_prepared(mini, pipe, cfg)
            losses[idx] = tape.per_sample
            grads = backward(tape)
            lr = lr_at(cfg, step, steps_per_epoch)
            new_params, state = optimizer_step(bank.params, grads, state, cfg, lr)
            bank.update(new_params)
            step += 1
        history.append(EpochRecord(epoch + 1, float(losses.mean()), lr))
        log.info("epoch %d loss %.6f lr %.3g", epoch + 1, history[-1].mean_loss, lr)
    return bank, history


def write_history(history: list[EpochRecord], path) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "mean_loss", "lr"])
            for rec in history:
                w.writerow([rec.epoch, repr(rec.mean_loss), repr(rec.lr)])
    except OSError as e:
        raise IoFailure(f"cannot write loss history to {path}: {e}") from e
