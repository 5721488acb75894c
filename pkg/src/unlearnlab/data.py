"""Synthetic concept-structured image/text pairs and forget/retain/validation splits."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import container
from .numerics import make_rng
from .objectives import PairBatch

DATASET_KIND = "dataset"
DATASET_SUFFIX = ".data"


class ConfigurationError(ValueError):
    pass


class EmptySplitError(ValueError):
    pass


@dataclass(frozen=True)
class ConceptSpec:
    n_concepts: int = 8
    n_train: int = 50
    n_test: int = 50
    vision_dim: int = 32
    text_dim: int = 24
    sigma: float = 0.1
    seed: int = 0
    input_scale: float = 6.0

    def __post_init__(self):
        if self.n_concepts < 2:
            raise ConfigurationError("need at least two concepts")
        if self.n_train < 2 or self.n_test < 1:
            raise ConfigurationError("need at least two training samples per concept")
        if self.sigma < 0:
            raise ConfigurationError("noise level must be non-negative")
        if self.n_concepts > min(self.vision_dim, self.text_dim):
            raise ConfigurationError(
                f"{self.n_concepts} orthogonal prototypes do not fit in dims "
                f"({self.vision_dim}, {self.text_dim})"
            )

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class Pools:
    spec: ConceptSpec
    train: PairBatch
    test: PairBatch
    vision_prototypes: np.ndarray
    text_prototypes: np.ndarray

    def equals(self, other: "Pools") -> bool:
        pairs = [
            (self.train.vision, other.train.vision),
            (self.train.text, other.train.text),
            (self.train.labels, other.train.labels),
            (self.test.vision, other.test.vision),
            (self.test.text, other.test.text),
            (self.test.labels, other.test.labels),
            (self.vision_prototypes, other.vision_prototypes),
            (self.text_prototypes, other.text_prototypes),
        ]
        return self.spec == other.spec and all(np.array_equal(a, b) for a, b in pairs)


def _orthonormal_rows(rng: np.random.Generator, k: int, dim: int) -> np.ndarray:
    """Seeded Gram-Schmidt over Gaussian draws; redraws a row if it collapses."""
    rows = []
    while len(rows) < k:
        v = rng.standard_normal(dim)
        for r in rows:
            v = v - np.dot(v, r) * r
        for r in rows:  # second pass for numerical orthogonality
            v = v - np.dot(v, r) * r
        n = np.linalg.norm(v)
        if n > 1e-6:
            rows.append(v / n)
    return np.array(rows)


def generate(spec: ConceptSpec = ConceptSpec()) -> Pools:
    """Draw prototypes then noisy samples. Rows are grouped by concept, concept 0 first.

    Draw order from one PCG64 stream: vision prototypes, text prototypes,
    train vision noise, train text noise, test vision noise, test text noise.
    """
    rng = make_rng(spec.seed)
    k = spec.n_concepts
    pv = _orthonormal_rows(rng, k, spec.vision_dim)
    pt = _orthonormal_rows(rng, k, spec.text_dim)
    gram = np.abs(pv @ pv.T - np.eye(k)).max(), np.abs(pt @ pt.T - np.eye(k)).max()
    assert max(gram) <= 0.1, "prototype separation violated"

    def draw(n_per):
        labels = np.repeat(np.arange(k), n_per)
        v = pv[labels] + spec.sigma * rng.standard_normal((labels.size, spec.vision_dim))
        t = pt[labels] + spec.sigma * rng.standard_normal((labels.size, spec.text_dim))
        v, t = spec.input_scale * v, spec.input_scale * t
        return PairBatch(v, t, labels)

    train = draw(spec.n_train)
    test = draw(spec.n_test)
    return Pools(spec, train, test, spec.input_scale * pv, spec.input_scale * pt)


@dataclass(frozen=True)
class DatasetSplit:
    forget: PairBatch
    retain: PairBatch
    validation: PairBatch
    test: PairBatch
    prototypes: np.ndarray
    targets: tuple[int, ...]
    validation_fraction: float

    @property
    def n_concepts(self) -> int:
        return self.prototypes.shape[0]


def stratified_indices(labels: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Per concept, floor(fraction * count + 1/2) rows (at least one), chosen by a seeded permutation."""
    if not 0 < fraction <= 1:
        raise ConfigurationError("validation fraction must lie in (0, 1]")
    rng = make_rng(seed)
    picked = []
    for c in np.unique(labels):
        rows = np.flatnonzero(labels == c)
        take = min(rows.size, max(1, int(math.floor(fraction * rows.size + 0.5))))
        picked.append(np.sort(rows[rng.permutation(rows.size)[:take]]))
    return np.concatenate(picked)


def make_split(pools: Pools, targets, validation_fraction: float = 0.05, seed: int = 0) -> DatasetSplit:
    targets = tuple(sorted({int(c) for c in targets}))
    k = pools.spec.n_concepts
    if not targets:
        raise EmptySplitError("no target concepts given")
    if any(c < 0 or c >= k for c in targets):
        raise ConfigurationError(f"target concepts must lie in [0, {k})")
    is_forget = np.isin(pools.train.labels, targets)
    if is_forget.all():
        raise EmptySplitError("retain set would be empty")
    val_idx = stratified_indices(pools.test.labels, validation_fraction, seed)
    return DatasetSplit(
        forget=pools.train.where(is_forget),
        retain=pools.train.where(~is_forget),
        validation=pools.test.subset(val_idx),
        test=pools.test,
        prototypes=pools.text_prototypes,
        targets=targets,
        validation_fraction=float(validation_fraction),
    )


def save_dataset(pools: Pools, path, extra_meta: dict | None = None) -> None:
    meta = {"spec": pools.spec.to_dict(), **(extra_meta or {})}
    arrays = [
        ("train/vision", pools.train.vision),
        ("train/text", pools.train.text),
        ("train/labels", pools.train.labels),
        ("test/vision", pools.test.vision),
        ("test/text", pools.test.text),
        ("test/labels", pools.test.labels),
        ("prototypes/vision", pools.vision_prototypes),
        ("prototypes/text", pools.text_prototypes),
    ]
    container.write(path, DATASET_KIND, meta, arrays)


def load_dataset(path) -> Pools:
    meta, a = container.read(Path(path), DATASET_KIND)
    try:
        spec = ConceptSpec(**meta["spec"])
        return Pools(
            spec,
            PairBatch(a["train/vision"], a["train/text"], a["train/labels"]),
            PairBatch(a["test/vision"], a["test/text"], a["test/labels"]),
            a["prototypes/vision"],
            a["prototypes/text"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise container.CorruptFileError(f"inconsistent dataset file: {exc}") from exc
