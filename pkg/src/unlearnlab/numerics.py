"""Small dense-vector helpers and seeded randomness.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Random streams
come from numpy's PCG64 bit generator, whose output sequence for a given seed
is fixed across platforms and numpy releases (NEP 19 stream-compatibility
policy for ``Generator`` methods used here: ``random``, ``uniform``,
``standard_normal``, ``integers``, ``permutation``).
"""

from __future__ import annotations

import hashlib
from typing import Iterable, Sequence

import numpy as np

EPS = 1e-12


class DegenerateVectorError(ValueError):
    """A vector whose norm is too small to define a direction."""


def as_tensor(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite entries")
    return arr


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


def sub_seed(seed: int, stage: str) -> int:
    """Derive a documented per-stage seed: first 8 bytes of sha256("<seed>:<stage>")."""
    digest = hashlib.sha256(f"{int(seed)}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def norm(v: np.ndarray) -> float:
    return float(np.sqrt(np.dot(v.ravel(), v.ravel())))


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.shape[0]} vs {v.shape[0]}")
    uu, vv = float(np.dot(u, u)), float(np.dot(v, v))
    if uu <= EPS * EPS or vv <= EPS * EPS:
        raise DegenerateVectorError("cosine of a zero-norm vector is undefined")
    # one square root of the product keeps cosine(u, u) exactly 1 in the common cases
    denom = np.sqrt(uu * vv)
    if not np.isfinite(denom):
        denom = np.sqrt(uu) * np.sqrt(vv)
    return float(np.clip(np.dot(u, v) / denom, -1.0, 1.0))


def l2_normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = norm(v)
    if n <= EPS:
        raise DegenerateVectorError("cannot normalize a zero-norm vector")
    return v / n


def flatten(tensors: Iterable[np.ndarray]) -> np.ndarray:
    parts = [np.asarray(t, dtype=np.float64).ravel() for t in tensors]
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts)


def flat_norm(tensors: Sequence[np.ndarray]) -> float:
    """l2 norm of all entries of all tensors taken together."""
    return norm(flatten(tensors))
