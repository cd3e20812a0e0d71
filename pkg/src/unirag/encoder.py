"""Frozen feature extractor with soft-prefix prompt insertion.

Each layer mixes tokens with a single-head softmax attention and then applies
a tanh channel map, both with residual connections:

    S = softmax(X Wqk X^T * scale)
    Y = X + S X Wv
    Z = Y + act(Y Wo)

The CLS row of the last layer, unit-normalized, is the sequence feature.
Under deep insertion the prompt rows are overwritten with the same adapted
prompts before every layer after the first.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .embedders import (
    TEXT_STYLES,
    EmbedderConfig,
    Query,
    get_provider,
    parse_synthetic_payload,
    stable_hash,
    text_tokens,
)
from .errors import DimensionMismatch, InvalidConfig, ShapeMismatch, UnsupportedStyle

INSERTIONS = ("shallow", "deep")


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 4
    d: int = 64
    insertion: str = "deep"
    token_num: int = 4
    max_len: int = 40
    seed: int = 42
    attn_gain: float = 4.0
    weight_gain: float = 1.0

    def validate(self) -> None:
        if self.layers < 1 or self.token_num < 1 or self.max_len < 1:
            raise InvalidConfig("layers, token_num and max_len must all be >= 1")
        if self.insertion not in INSERTIONS:
            raise InvalidConfig(f"insertion must be one of {INSERTIONS}")
        if self.d < 2:
            raise InvalidConfig("d must be >= 2")


@dataclass
class TokenSequence:
    tokens: np.ndarray  # (T, d)
    layout: tuple[int, int, int]  # (cls, prompt tokens, content tokens)

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def prompt_slice(self) -> slice:
        return slice(1, 1 + self.layout[1])


@dataclass
class Layer:
    Wqk: np.ndarray
    Wv: np.ndarray
    Wo: np.ndarray


def _lin(X: np.ndarray, W: np.ndarray) -> np.ndarray:
    """(..., d) @ (d, e) as a single GEMM."""
    return (X.reshape(-1, X.shape[-1]) @ W).reshape(*X.shape[:-1], W.shape[1])


def _tanh_grad(h, t):
    return 1.0 - t * t


class FrozenEncoder:
    """Seeded, immutable token-mixing network. Nothing here is trainable."""

    def __init__(
        self,
        layers: list[Layer],
        cls: np.ndarray,
        attn_scale: float,
        act: Callable = np.tanh,
        act_grad: Callable = _tanh_grad,
        cfg: EncoderConfig | None = None,
    ):
        self.layers = layers
        self.cls = np.asarray(cls, dtype=np.float64)
        self.attn_scale = float(attn_scale)
        self.act = act
        self.act_grad = act_grad
        self.d = self.cls.shape[0]
        self.cfg = cfg or EncoderConfig(layers=len(layers), d=self.d)
        for arr in self.arrays():
            arr.setflags(write=False)

    @classmethod
    def from_config(cls, cfg: EncoderConfig) -> "FrozenEncoder":
        cfg.validate()
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 5]))
        d = cfg.d
        s = cfg.weight_gain / np.sqrt(d)
        layers = [
            Layer(
                rng.standard_normal((d, d)) * s,
                rng.standard_normal((d, d)) * s,
                rng.standard_normal((d, d)) * s,
            )
            for _ in range(cfg.layers)
        ]
        cls_vec = rng.standard_normal(d) / np.sqrt(d)
        return cls(layers, cls_vec, cfg.attn_gain / np.sqrt(d), cfg=cfg)

    def arrays(self) -> list[np.ndarray]:
        out = [self.cls]
        for layer in self.layers:
            out += [layer.Wqk, layer.Wv, layer.Wo]
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for a in self.arrays():
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()

    # -- batched forward/backward --------------------------------------------

    def forward(self, X: np.ndarray, prompts: np.ndarray | None, insertion: str, keep: bool = False):
        """Run a batch of token sequences.

        X is (B, T, d) with prompt rows at 1..1+p; ``prompts`` is (B, p, d)
        and is re-injected before layers >= 2 when ``insertion == "deep"``.
        All-zero content rows are padding: they are masked out as attention
        keys, and trailing padding shared by the whole batch is dropped since
        it cannot reach the CLS row. Returns unit CLS features (B, d) and, if
        ``keep``, the cache for :meth:`backward`.
        """
        X = np.asarray(X, dtype=np.float64)
        p = 0 if prompts is None else prompts.shape[1]
        valid = np.any(X != 0.0, axis=2)
        valid[:, : 1 + p] = True
        width = int(np.flatnonzero(valid.any(axis=0))[-1]) + 1
        X = np.array(X[:, :width], copy=True)
        key_bias = np.where(valid[:, None, :width], 0.0, -np.inf)
        cache = []
        for li, layer in enumerate(self.layers):
            if li > 0 and insertion == "deep" and p:
                X[:, 1 : 1 + p, :] = prompts
            scores = _lin(X, layer.Wqk) @ X.transpose(0, 2, 1) * self.attn_scale + key_bias
            scores -= scores.max(axis=-1, keepdims=True)
            S = np.exp(scores)
            S /= S.sum(axis=-1, keepdims=True)
            V = _lin(X, layer.Wv)
            Y = X + S @ V
            H = _lin(Y, layer.Wo)
            A = self.act(H)
            Z = Y + A
            if keep:
                cache.append((X, S, V, Y, H, A))
            X = Z
        out = X[:, 0, :]
        norm = np.linalg.norm(out, axis=1, keepdims=True)
        feats = out / norm
        if keep:
            return feats, (cache, feats, norm, p, insertion)
        return feats

    def backward(self, tape, g_feats: np.ndarray) -> np.ndarray:
        """Gradient of a loss w.r.t. the prompt token rows, (B, p, d).

        Contributions from every layer the prompts are injected into are
        summed. CLS and content rows are frozen inputs, so their gradients
        are dropped.
        """
        cache, feats, norm, p, insertion = tape
        Bsz, T, d = cache[0][0].shape
        g_out = (g_feats - feats * np.sum(feats * g_feats, axis=1, keepdims=True)) / norm
        dZ = np.zeros((Bsz, T, d))
        dZ[:, 0, :] = g_out
        g_prompts = np.zeros((Bsz, p, d))
        for li in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[li]
            X, S, V, Y, H, A = cache[li]
            dH = dZ * self.act_grad(H, A)
            dY = dZ + _lin(dH, layer.Wo.T)
            dS = dY @ V.transpose(0, 2, 1)
            dV = S.transpose(0, 2, 1) @ dY
            dX = dY + _lin(dV, layer.Wv.T)
            dSc = S * (dS - np.sum(dS * S, axis=-1, keepdims=True)) * self.attn_scale
            dX += _lin(dSc @ X, layer.Wqk.T) + dSc.transpose(0, 2, 1) @ _lin(X, layer.Wqk)
            if p and (li == 0 or insertion == "deep"):
                g_prompts += dX[:, 1 : 1 + p, :]
                if li > 0:
                    dX[:, 1 : 1 + p, :] = 0.0
            dZ = dX
        return g_prompts


# -- tokenization and composition ---------------------------------------------


def text_token_vector(token: str, d: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4, stable_hash(token)]))
    return rng.standard_normal(d) / np.sqrt(d)


def tokenize(q: Query, cfg: EncoderConfig, embedder: EmbedderConfig | None = None) -> np.ndarray:
    """Content tokens for one query, zero-padded or truncated to ``max_len``."""
    d = cfg.d
    if embedder is not None and embedder.provider == "synthetic" and parse_synthetic_payload(q.payload):
        rows = get_provider(embedder).patches(q)
    elif q.style in TEXT_STYLES:
        rows = [text_token_vector(t, d, cfg.seed) for t in text_tokens(q.text())]
        rows = np.array(rows).reshape(-1, d)
    else:
        raise UnsupportedStyle(f"cannot tokenize a {q.style!r} query without the synthetic provider")
    if rows.shape[1] != d:
        raise DimensionMismatch(f"content tokens have dimension {rows.shape[1]}, encoder expects {d}")
    out = np.zeros((cfg.max_len, d))
    k = min(cfg.max_len, rows.shape[0])
    out[:k] = rows[:k]
    return out


def tokenize_multi(qs: list[Query], cfg: EncoderConfig, embedder: EmbedderConfig | None = None) -> np.ndarray:
    """Concatenated content of several queries, then truncated/padded."""
    real = []
    for q in qs:
        t = tokenize(q, cfg, embedder)
        real.append(t[np.any(t != 0.0, axis=1)])
    rows = np.concatenate(real) if real else np.zeros((0, cfg.d))
    out = np.zeros((cfg.max_len, cfg.d))
    k = min(cfg.max_len, rows.shape[0])
    out[:k] = rows[:k]
    return out


def compose(cls, prompts, content, token_num: int) -> TokenSequence:
    cls = np.asarray(cls, dtype=np.float64)
    d = cls.shape[0]
    prompts = [np.asarray(p, dtype=np.float64) for p in prompts]
    content = np.asarray(content, dtype=np.float64).reshape(-1, d) if len(content) else np.zeros((0, d))
    for p in prompts:
        if p.shape != (d,):
            raise DimensionMismatch(f"prompt shape {p.shape}, expected ({d},)")
    if content.shape[1] != d:
        raise DimensionMismatch(f"content dimension {content.shape[1]}, expected {d}")
    prefix = np.repeat(np.array(prompts).reshape(-1, d), token_num, axis=0)
    tokens = np.concatenate([cls[None, :], prefix, content])
    return TokenSequence(tokens, (1, prefix.shape[0], content.shape[0]))


def encode(enc: FrozenEncoder, seq: TokenSequence, prompts=None, insertion: str | None = None) -> np.ndarray:
    """CLS feature of one composed sequence.

    ``prompts`` (the n adapted prompts, or their expanded rows) are what deep
    insertion re-injects; by default they are read back from the sequence.
    """
    insertion = insertion or enc.cfg.insertion
    p = seq.layout[1]
    if prompts is None or not p:
        prefix = seq.tokens[seq.prompt_slice] if p else None
    else:
        rows = np.asarray(prompts, dtype=np.float64).reshape(-1, enc.d)
        if rows.shape[0] and p % rows.shape[0] == 0:
            rows = np.repeat(rows, p // rows.shape[0], axis=0)
        if rows.shape[0] != p:
            raise ShapeMismatch(f"{rows.shape[0]} prompt rows for a sequence with {p} prompt tokens")
        prefix = rows
    return enc.forward(seq.tokens[None], None if prefix is None else prefix[None], insertion)[0]

