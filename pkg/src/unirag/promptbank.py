"""Prompt Bank: keyed prompt storage with per-entry mixture-of-LoRA adapters.

All parameters live in stacked arrays so that a whole bank can be adapted,
differentiated and serialized in one shot:

    keys     (N, d)
    prompts  (N, d)
    routers  (N, d, K)
    A        (N, K, d, r)
    B        (N, K, r, d)
"""

from __future__ import annotations

import copy
import threading
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ChecksumMismatch,
    EmptyBank,
    InvalidConfig,
    IoFailure,
    ShapeMismatch,
    VersionMismatch,
)
from .manifest import dumps_sealed, loads_sealed
from .numkit import NORM_FLOOR, pairwise_dots, rowvec_matmul, softmax

BANK_FORMAT_VERSION = 1
PARAM_ORDER = ("keys", "prompts", "routers", "A", "B")


@dataclass(frozen=True)
class BankConfig:
    N: int = 16
    n: int = 4
    K: int = 4
    r: int = 4
    top_e: int = 2
    d: int = 64

    def validate(self) -> None:
        if not 1 <= self.n <= self.N:
            raise InvalidConfig(f"need 1 <= n <= N, got n={self.n}, N={self.N}")
        if not 1 <= self.top_e <= self.K:
            raise InvalidConfig(f"need 1 <= top_e <= K, got top_e={self.top_e}, K={self.K}")
        if self.r < 1 or self.r > self.d:
            raise InvalidConfig(f"need 1 <= r <= d, got r={self.r}")
        if self.d < 2:
            raise InvalidConfig("d must be >= 2")


@dataclass
class ExpertAdapter:
    A: np.ndarray  # (d, r)
    B: np.ndarray  # (r, d)


@dataclass
class PromptEntry:
    key: np.ndarray
    base_prompt: np.ndarray
    experts: list[ExpertAdapter]
    router: np.ndarray  # (d, K)


@dataclass(frozen=True)
class Selection:
    indices: tuple[int, ...]
    scores: tuple[float, ...]


def param_shapes(cfg: BankConfig) -> dict[str, tuple[int, ...]]:
    N, K, r, d = cfg.N, cfg.K, cfg.r, cfg.d
    return {
        "keys": (N, d),
        "prompts": (N, d),
        "routers": (N, d, K),
        "A": (N, K, d, r),
        "B": (N, K, r, d),
    }


def parameter_count(cfg: BankConfig) -> int:
    """Closed form N * (2d + dK + 2Kdr)."""
    return cfg.N * (2 * cfg.d + cfg.d * cfg.K + cfg.K * 2 * cfg.d * cfg.r)


class PromptBank:
    def __init__(self, cfg: BankConfig, params: dict[str, np.ndarray], seed: int | None = None):
        cfg.validate()
        shapes = param_shapes(cfg)
        for name in PARAM_ORDER:
            if name not in params or params[name].shape != shapes[name]:
                got = None if name not in params else params[name].shape
                raise ShapeMismatch(f"bank parameter {name}: expected {shapes[name]}, got {got}")
        self.cfg = cfg
        self.seed = seed
        self.params = {k: np.array(params[k], dtype=np.float64) for k in PARAM_ORDER}
        self.version = 0
        self._lock = threading.RLock()

    # -- access -----------------------------------------------------------------

    def __len__(self) -> int:
        return self.cfg.N

    @property
    def keys(self) -> np.ndarray:
        return self.params["keys"]

    @property
    def prompts(self) -> np.ndarray:
        return self.params["prompts"]

    def entry(self, i: int) -> PromptEntry:
        p = self.params
        experts = [ExpertAdapter(p["A"][i, k], p["B"][i, k]) for k in range(self.cfg.K)]
        return PromptEntry(p["keys"][i], p["prompts"][i], experts, p["routers"][i])

    def snapshot(self) -> "PromptBank":
        """Independent copy for readers; later updates to self do not leak into it."""
        with self._lock:
            snap = PromptBank(self.cfg, copy.deepcopy(self.params), self.seed)
            snap.version = self.version
            return snap

    def update(self, new_params: dict[str, np.ndarray]) -> None:
        with self._lock:
            for name in PARAM_ORDER:
                if new_params[name].shape != self.params[name].shape:
                    raise ShapeMismatch(f"update for {name} has shape {new_params[name].shape}")
            self.params = {k: np.array(new_params[k], dtype=np.float64) for k in PARAM_ORDER}
            self.version += 1

    def checksum(self) -> int:
        return zlib.crc32(_blob(self.params))

    def n_parameters(self) -> int:
        return sum(int(a.size) for a in self.params.values())


def init_bank(cfg: BankConfig, seed: int = 42) -> PromptBank:
    """Seeded initialization with zero B factors, so fresh adapters are no-ops."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    N, K, r, d = cfg.N, cfg.K, cfg.r, cfg.d
    s = 1.0 / np.sqrt(d)
    params = {
        "keys": rng.standard_normal((N, d)) * s,
        "prompts": rng.standard_normal((N, d)) * s,
        "routers": rng.standard_normal((N, d, K)) * 0.01,
        "A": rng.standard_normal((N, K, d, r)) * s,
        "B": np.zeros((N, K, r, d)),
    }
    return PromptBank(cfg, params, seed)


# -- selection ---------------------------------------------------------------


def similarity_matrix(keys: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Cosine similarity of each query row against each key row, (B, N)."""
    kn = np.linalg.norm(keys, axis=1)
    qn = np.linalg.norm(queries, axis=-1)
    kn = np.where(kn < NORM_FLOOR, np.inf, kn)
    qn = np.where(qn < NORM_FLOOR, np.inf, qn)
    return pairwise_dots(queries, keys) / np.outer(qn, kn)


def select_batch(keys: np.ndarray, queries: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    sims = similarity_matrix(keys, np.atleast_2d(queries))
    order = np.argsort(-sims, axis=1, kind="stable")[:, :n]
    return order, np.take_along_axis(sims, order, axis=1)


def select_prompts(bank: PromptBank, E, n: int | None = None) -> Selection:
    if len(bank) == 0:
        raise EmptyBank("prompt bank has no entries")
    n = bank.cfg.n if n is None else n
    if not 1 <= n <= len(bank):
        raise InvalidConfig(f"cannot select {n} of {len(bank)} entries")
    vec = getattr(E, "vector", E)
    idx, scores = select_batch(bank.keys, np.asarray(vec, dtype=np.float64), n)
    return Selection(tuple(int(i) for i in idx[0]), tuple(float(s) for s in scores[0]))


# -- routing and adaptation -------------------------------------------------


def top_e_mask(logits: np.ndarray, top_e: int) -> np.ndarray:
    order = np.argsort(-logits, axis=-1, kind="stable")[..., :top_e]
    mask = np.zeros(logits.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def route(entry: PromptEntry, probe, top_e: int | None = None) -> np.ndarray:
    """Softmax router weights kept on the ``top_e`` largest experts, renormalized."""
    probe = np.asarray(probe, dtype=np.float64)
    if probe.shape != (entry.router.shape[0],):
        raise ShapeMismatch(f"probe shape {probe.shape} vs router {entry.router.shape}")
    K = entry.router.shape[1]
    top_e = K if top_e is None else min(top_e, K)
    alpha = softmax(probe @ entry.router)
    alpha = np.where(top_e_mask(alpha, top_e), alpha, 0.0)
    return alpha / alpha.sum()


def adapt_prompt(entry: PromptEntry, top_e: int | None = None) -> np.ndarray:
    """sum_k alpha_k (P + P A_k B_k), written as P + sum_k alpha_k P A_k B_k
    (the weights sum to one) so that zero B factors return P exactly."""
    P = entry.base_prompt
    alpha = route(entry, P, top_e)
    delta = np.zeros_like(P)
    for a, ex in zip(alpha, entry.experts):
        if a != 0.0:
            delta += a * rowvec_matmul(P, ex.A, ex.B)
    return P + delta


def retrieve_adapted(bank: PromptBank, E, n: int | None = None) -> list[np.ndarray]:
    sel = select_prompts(bank, E, n)
    return [adapt_prompt(bank.entry(i), bank.cfg.top_e) for i in sel.indices]


@dataclass
class AdaptCache:
    alpha: np.ndarray  # (N, K)
    u: np.ndarray  # (N, K, r)  P @ A_k
    w: np.ndarray  # (N, K, d)  P @ A_k @ B_k


def adapt_all(params: dict[str, np.ndarray], top_e: int) -> tuple[np.ndarray, AdaptCache]:
    """Adapted prompts for every entry at once, plus what backward needs."""
    P, R, A, B = params["prompts"], params["routers"], params["A"], params["B"]
    logits = np.einsum("nd,ndk->nk", P, R)
    mask = top_e_mask(logits, top_e)
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    alpha = e / e.sum(axis=1, keepdims=True)
    u = np.einsum("nd,nkdr->nkr", P, A)
    w = np.einsum("nkr,nkrd->nkd", u, B)
    adapted = P + np.einsum("nk,nkd->nd", alpha, w)
    return adapted, AdaptCache(alpha, u, w)


def adapt_all_backward(params: dict[str, np.ndarray], cache: AdaptCache, grad: np.ndarray) -> dict[str, np.ndarray]:
    """Pull dL/dP' (N, d) back to prompts, routers, A and B.

    The top-e mask is held fixed; inside it the renormalized weights are a
    plain softmax over the kept logits.
    """
    P, R, A, B = params["prompts"], params["routers"], params["A"], params["B"]
    alpha, u, w = cache.alpha, cache.u, cache.w
    g_alpha = np.einsum("nkd,nd->nk", w, grad)
    dz = alpha * (g_alpha - (alpha * g_alpha).sum(axis=1, keepdims=True))
    dR = np.einsum("nd,nk->ndk", P, dz)
    dP = grad + np.einsum("ndk,nk->nd", R, dz)
    g_w = alpha[:, :, None] * grad[:, None, :]
    dB = np.einsum("nkr,nkd->nkrd", u, g_w)
    du = np.einsum("nkrd,nkd->nkr", B, g_w)
    dA = np.einsum("nd,nkr->nkdr", P, du)
    dP += np.einsum("nkdr,nkr->nd", A, du)
    return {"prompts": dP, "routers": dR, "A": dA, "B": dB}


# -- persistence ---------------------------------------------------------------


def _blob(params: dict[str, np.ndarray]) -> bytes:
    """Little-endian float64 parameters: keys, prompts, routers, then A and B
    interleaved per entry and per expert."""
    N, K = params["A"].shape[:2]
    parts = [np.ascontiguousarray(params[k], dtype="<f8").tobytes() for k in ("keys", "prompts", "routers")]
    for i in range(N):
        for k in range(K):
            parts.append(np.ascontiguousarray(params["A"][i, k], dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(params["B"][i, k], dtype="<f8").tobytes())
    return b"".join(parts)


def _unblob(cfg: BankConfig, data: bytes) -> dict[str, np.ndarray]:
    shapes = param_shapes(cfg)
    flat = np.frombuffer(data, dtype="<f8").astype(np.float64)
    expected = sum(int(np.prod(s)) for s in shapes.values())
    if flat.size != expected:
        raise ChecksumMismatch(f"bank blob holds {flat.size} floats, expected {expected}")
    out, pos = {}, 0
    for name in ("keys", "prompts", "routers"):
        size = int(np.prod(shapes[name]))
        out[name] = flat[pos : pos + size].reshape(shapes[name])
        pos += size
    A = np.empty(shapes["A"])
    B = np.empty(shapes["B"])
    a_size, b_size = cfg.d * cfg.r, cfg.r * cfg.d
    for i in range(cfg.N):
        for k in range(cfg.K):
            A[i, k] = flat[pos : pos + a_size].reshape(cfg.d, cfg.r)
            pos += a_size
            B[i, k] = flat[pos : pos + b_size].reshape(cfg.r, cfg.d)
            pos += b_size
    out["A"], out["B"] = A, B
    return out


def save_bank(bank: PromptBank, path) -> None:
    path = Path(path)
    blob = _blob(bank.params)
    manifest = {
        "format": "unirag-bank",
        "version": BANK_FORMAT_VERSION,
        "config": asdict(bank.cfg),
        "seed": bank.seed,
        "param_order": list(PARAM_ORDER),
        "dtype": "<f8",
        "crc32": zlib.crc32(blob),
        "nbytes": len(blob),
    }
    try:
        path.mkdir(parents=True, exist_ok=True)
        (path / "params.bin").write_bytes(blob)
        (path / "manifest.json").write_text(dumps_sealed(manifest))
    except OSError as e:
        raise IoFailure(f"cannot write bank to {path}: {e}") from e


def load_bank(path) -> PromptBank:
    path = Path(path)
    try:
        raw_manifest = (path / "manifest.json").read_bytes()
        blob = (path / "params.bin").read_bytes()
    except OSError as e:
        raise IoFailure(f"cannot read bank from {path}: {e}") from e
    manifest = loads_sealed(raw_manifest, "bank")
    try:
        version = manifest["version"]
        cfg = BankConfig(**manifest["config"])
        crc = int(manifest["crc32"])
    except (ValueError, KeyError, TypeError) as e:
        raise ChecksumMismatch(f"unreadable bank manifest: {e}") from e
    if manifest.get("format") != "unirag-bank" or version != BANK_FORMAT_VERSION:
        raise VersionMismatch(f"unsupported bank format {manifest.get('format')!r} v{version}")
    if zlib.crc32(blob) != crc or len(blob) != manifest.get("nbytes") or manifest.get("dtype") != "<f8":
        raise ChecksumMismatch(f"bank blob checksum mismatch in {path}")
    try:
        cfg.validate()
    except InvalidConfig as e:
        raise ChecksumMismatch(f"manifest config is inconsistent: {e}") from e
    return PromptBank(cfg, _unblob(cfg, blob), manifest.get("seed"))
