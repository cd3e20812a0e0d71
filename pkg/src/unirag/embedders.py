"""Query embedders: map style-tagged queries into the shared latent space.

Three providers sit behind one ``embed`` entry point:

* ``synthetic``: concept prototypes pushed through per-style random rotations
  plus seeded noise. Used by the benchmark and the tests.
* ``hashed_text``: signed feature hashing of lowercase alphanumeric tokens.
* ``external``: a JSON-over-HTTP embedding service.
"""

from __future__ import annotations

import functools
import hashlib
import re
import threading
from dataclasses import dataclass

import numpy as np
import requests

from .errors import (
    DimensionMismatch,
    EmptyInput,
    InvalidConfig,
    ProviderUnavailable,
    UnsupportedStyle,
    ZeroVector,
)
from .numkit import NORM_FLOOR

STYLES = ("text", "image", "sketch", "art", "lowres", "audio_transcript")
TEXT_STYLES = ("text", "audio_transcript")
FUSED_STYLE = "fused"

_SYNTH_RE = re.compile(r"^concept:([^#\s]+)(?:#(\d+))?$")
_TOKEN_RE = re.compile(r"[^0-9a-z]+")


def stable_hash(*parts) -> int:
    """64-bit hash that is stable across processes (unlike ``hash``)."""
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(str(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


def _rng(*words: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(w) & 0xFFFFFFFFFFFFFFFF for w in words]))


@dataclass(frozen=True)
class Query:
    style: str
    payload: str | bytes
    id: str = ""

    def __post_init__(self):
        if self.style not in STYLES:
            raise UnsupportedStyle(f"unknown style {self.style!r}")
        if not self.payload:
            raise EmptyInput("query payload is empty")

    def text(self) -> str:
        if isinstance(self.payload, bytes):
            try:
                return self.payload.decode("utf-8")
            except UnicodeDecodeError as e:
                raise UnsupportedStyle("payload is not utf-8 text") from e
        return self.payload


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray
    style: str
    source: str

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])


@dataclass(frozen=True)
class EmbedderConfig:
    dimension: int = 64
    provider: str = "synthetic"
    seed: int = 42
    # synthetic provider
    styles: tuple[str, ...] = STYLES
    noise_scale: float = 0.05
    style_gap: float = 0.5
    shared: float = 0.6
    patches: int = 4
    # external provider
    endpoint: str = ""
    timeout: float = 10.0
    retries: int = 2
    max_in_flight: int = 4

    def validate(self) -> None:
        if self.dimension < 2:
            raise InvalidConfig("embedder dimension must be >= 2")
        if self.provider not in ("synthetic", "hashed_text", "external"):
            raise InvalidConfig(f"unknown provider {self.provider!r}")
        if len(set(self.styles)) != len(self.styles) or not set(self.styles) <= set(STYLES):
            raise InvalidConfig(f"bad style list {self.styles!r}")
        if self.noise_scale < 0 or not 0.0 <= self.style_gap <= 1.0 or not 0.0 <= self.shared < 1.0:
            raise InvalidConfig("need noise_scale >= 0, style_gap in [0, 1], shared in [0, 1)")
        if self.patches < 1:
            raise InvalidConfig("patches must be >= 1")

    def fingerprint(self) -> str:
        return f"{stable_hash(*sorted(vars(self).items())):016x}"


def synthetic_payload(concept, draw: int = 0) -> str:
    return f"concept:{concept}#{draw}"


def parse_synthetic_payload(payload) -> tuple[str, int] | None:
    if isinstance(payload, bytes):
        try:
            payload = payload.decode("utf-8")
        except UnicodeDecodeError:
            return None
    m = _SYNTH_RE.match(payload.strip())
    if m is None:
        return None
    return m.group(1), int(m.group(2) or 0)


def text_tokens(text: str) -> list[str]:
    return [t for t in _TOKEN_RE.split(text.lower()) if t]


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n < NORM_FLOOR:
        raise ZeroVector("provider produced a zero vector")
    return v / n


def haar_rotation(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def polar_orthogonalize(m: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(m)
    return u @ vt


class SyntheticProvider:
    """Concept prototypes seen through seeded style rotations.

    A payload ``concept:<name>#<draw>`` in style ``s`` embeds to
    ``normalize(T_s @ base(name) + eps(name, s, draw))``. ``style_gap`` blends
    each rotation with the identity before re-orthogonalizing, so 1.0 gives a
    Haar-random rotation and 0.0 makes all styles coincide. ``shared`` mixes a
    common direction into every prototype, which gives each style a
    recognisable signature ``T_s @ common``.
    """

    name = "synthetic"

    def __init__(self, cfg: EmbedderConfig):
        cfg.validate()
        self.cfg = cfg
        d = cfg.dimension
        self.transforms: dict[str, np.ndarray] = {}
        for style in cfg.styles:
            rot = haar_rotation(_rng(cfg.seed, 1, STYLES.index(style)), d)
            blend = (1.0 - cfg.style_gap) * np.eye(d) + cfg.style_gap * rot
            self.transforms[style] = polar_orthogonalize(blend)
            self.transforms[style].setflags(write=False)

    def base(self, concept: str) -> np.ndarray:
        d, rho = self.cfg.dimension, self.cfg.shared
        own = _unit(_rng(self.cfg.seed, 0, stable_hash(concept)).standard_normal(d))
        if rho == 0.0:
            return own
        common = _unit(_rng(self.cfg.seed, 6).standard_normal(d))
        return _unit(rho * common + np.sqrt(1.0 - rho * rho) * own)

    def noise(self, concept: str, style: str, draw: int, patch: int = -1) -> np.ndarray:
        d = self.cfg.dimension
        words = [self.cfg.seed, 2, stable_hash(concept), STYLES.index(style), draw]
        if patch >= 0:
            words += [3, patch]
        return self.cfg.noise_scale / np.sqrt(d) * _rng(*words).standard_normal(d)

    def _parse(self, q: Query) -> tuple[str, int]:
        if q.style not in self.transforms:
            raise UnsupportedStyle(f"synthetic provider has no transform for {q.style!r}")
        parsed = parse_synthetic_payload(q.payload)
        if parsed is None:
            raise UnsupportedStyle(f"not a synthetic payload: {q.payload!r}")
        return parsed

    def raw(self, q: Query) -> np.ndarray:
        concept, draw = self._parse(q)
        return self.transforms[q.style] @ self.base(concept) + self.noise(concept, q.style, draw)

    def embed(self, q: Query) -> np.ndarray:
        return _unit(self.raw(q))

    def patches(self, q: Query) -> np.ndarray:
        """Fixed-count patch vectors for the encoder's content tokens."""
        concept, draw = self._parse(q)
        centre = self.raw(q)
        return np.stack([centre + self.noise(concept, q.style, draw, j) for j in range(self.cfg.patches)])

    def params(self) -> list[np.ndarray]:
        return [self.transforms[s] for s in self.cfg.styles]


class HashedTextProvider:
    name = "hashed_text"

    def __init__(self, cfg: EmbedderConfig):
        cfg.validate()
        self.cfg = cfg

    def embed(self, q: Query) -> np.ndarray:
        if q.style not in TEXT_STYLES:
            raise UnsupportedStyle(f"hashed_text provider cannot embed style {q.style!r}")
        tokens = text_tokens(q.text())
        if not tokens:
            raise UnsupportedStyle("payload has no alphanumeric tokens")
        d = self.cfg.dimension
        v = np.zeros(d)
        for tok in tokens:
            h = stable_hash(self.cfg.seed, tok)
            v[h % d] += 1.0 if (h >> 32) & 1 else -1.0
        n = float(np.linalg.norm(v))
        if n < NORM_FLOOR:
            # every token cancelled out; fall back to unsigned counts
            v = np.zeros(d)
            for tok in tokens:
                v[stable_hash(self.cfg.seed, tok) % d] += 1.0
        return _unit(v)

    def params(self) -> list[np.ndarray]:
        return []


class ExternalProvider:
    """Client for ``POST {"input": [...], "dimension": d}`` embedding services."""

    name = "external"

    def __init__(self, cfg: EmbedderConfig, session: requests.Session | None = None):
        cfg.validate()
        if not cfg.endpoint:
            raise InvalidConfig("external provider needs an endpoint")
        self.cfg = cfg
        self.session = session or requests.Session()
        self._slots = threading.BoundedSemaphore(cfg.max_in_flight)

    def embed_texts(self, texts: list[str]) -> list[np.ndarray]:
        body = {"input": texts, "dimension": self.cfg.dimension}
        last: Exception | None = None
        for _ in range(self.cfg.retries + 1):
            try:
                with self._slots:
                    resp = self.session.post(self.cfg.endpoint, json=body, timeout=self.cfg.timeout)
                resp.raise_for_status()
                rows = resp.json()["embeddings"]
                break
            except (requests.RequestException, KeyError, ValueError) as e:
                last = e
        else:
            raise ProviderUnavailable(f"embedding endpoint failed: {last}") from last
        if len(rows) != len(texts):
            raise ProviderUnavailable(f"expected {len(texts)} embeddings, got {len(rows)}")
        out = []
        for row in rows:
            v = np.asarray(row, dtype=np.float64)
            if v.shape != (self.cfg.dimension,):
                raise DimensionMismatch(f"endpoint returned shape {v.shape}")
            out.append(_unit(v))
        return out

    def embed(self, q: Query) -> np.ndarray:
        return self.embed_texts([q.text()])[0]

    def params(self) -> list[np.ndarray]:
        return []


_PROVIDERS = {
    "synthetic": SyntheticProvider,
    "hashed_text": HashedTextProvider,
    "external": ExternalProvider,
}


@functools.lru_cache(maxsize=32)
def get_provider(cfg: EmbedderConfig):
    cfg.validate()
    return _PROVIDERS[cfg.provider](cfg)


def embed(q: Query, cfg: EmbedderConfig) -> Embedding:
    provider = get_provider(cfg)
    return Embedding(provider.embed(q), q.style, provider.name)


def embed_batch(qs: list[Query], cfg: EmbedderConfig) -> list[Embedding]:
    out = []
    for i, q in enumerate(qs):
        try:
            out.append(embed(q, cfg))
        except Exception as e:
            raise type(e)(f"query {i}: {e}") from e
    return out


def fuse_multi_query(es: list[Embedding]) -> Embedding:
    """Mean of several query embeddings, renormalized."""
    if not es:
        raise EmptyInput("nothing to fuse")
    if len(es) == 1:
        return es[0]
    dims = {e.dim for e in es}
    if len(dims) != 1:
        raise DimensionMismatch(f"mixed dimensions {sorted(dims)}")
    mean = np.mean([e.vector for e in es], axis=0)
    return Embedding(_unit(mean), FUSED_STYLE, es[0].source)


def embedder_checksum(cfg: EmbedderConfig) -> str:
    h = hashlib.sha256(cfg.fingerprint().encode())
    for p in get_provider(cfg).params():
        h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return h.hexdigest()
