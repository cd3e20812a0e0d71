"""Dense float64 kernels used throughout the package."""

from __future__ import annotations

import numpy as np

from .errors import EmptyInput, ShapeMismatch, ValidationError, ZeroVector

NORM_FLOOR = 1e-12


def as_vec(a) -> np.ndarray:
    v = np.asarray(a, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeMismatch(f"expected a vector, got shape {v.shape}")
    return v


def normalize(a) -> np.ndarray:
    v = as_vec(a)
    n = float(np.linalg.norm(v))
    if n < NORM_FLOOR:
        raise ZeroVector("cannot normalize a zero vector")
    return v / n


def cosine_sim(a, b) -> float:
    a = as_vec(a)
    b = as_vec(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < NORM_FLOOR or nb < NORM_FLOOR:
        raise ZeroVector("cosine similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_dist(a, b) -> float:
    """Standard cosine distance ``1 - cos(a, b)``, in [0, 2]."""
    return 1.0 - cosine_sim(a, b)


def softmax(v) -> np.ndarray:
    z = np.asarray(v, dtype=np.float64)
    if z.size == 0:
        raise EmptyInput("softmax of an empty vector")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def rowvec_matmul(p, m1, m2) -> np.ndarray:
    """Return ``(p @ m1) @ m2`` without forming the d x d product."""
    p = as_vec(p)
    m1 = np.asarray(m1, dtype=np.float64)
    m2 = np.asarray(m2, dtype=np.float64)
    if m1.ndim != 2 or m2.ndim != 2 or m1.shape[0] != p.shape[0] or m1.shape[1] != m2.shape[0]:
        raise ShapeMismatch(f"cannot chain {p.shape} @ {m1.shape} @ {m2.shape}")
    return (p @ m1) @ m2


def pairwise_dots(Q, M, max_elems: int = 1 << 22) -> np.ndarray:
    """``Q @ M.T`` with one fixed reduction per (row, row) pair.

    A BLAS product may round two identical rows of ``M`` differently depending
    on where they sit, which turns exact ties into 1-ulp orderings. Here every
    entry is the same elementwise product and sum, so equal rows score equally
    and tie-breaking rules stay in charge.
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    if Q.shape[1] != M.shape[1]:
        raise ShapeMismatch(f"cannot score {Q.shape} against {M.shape}")
    out = np.empty((Q.shape[0], M.shape[0]))
    step = max(1, max_elems // max(1, M.size))
    for s in range(0, Q.shape[0], step):
        out[s : s + step] = (Q[s : s + step, None, :] * M[None, :, :]).sum(axis=-1)
    return out


def check_finite(name: str, a) -> None:
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} contains non-finite entries")
