"""Zero-shot classification by cosine similarity to embedded text prototypes."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ..data import DatasetSplit
from ..model import DualEncoder
from ..objectives import PairBatch


class MissingPrototypeError(ValueError):
    pass


def true_label_rank(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """0-based rank of each row's true label; ties go to the lower concept index."""
    rows = np.arange(scores.shape[0])
    true = scores[rows, labels][:, None]
    higher = (scores > true).sum(axis=1)
    cols = np.arange(scores.shape[1])[None, :]
    tied_before = ((scores == true) & (cols < labels[:, None])).sum(axis=1)
    return higher + tied_before


def predict(model: DualEncoder, vision_inputs: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    scores = model.encode_images(vision_inputs) @ model.encode_texts(prototypes).T
    return np.argsort(-scores, axis=1, kind="stable")[:, 0]


@dataclass
class EvalReport:
    fa1: float
    fa5: float
    ta1: float
    ta5: float
    n_forget: int
    n_retain: int
    per_concept: dict = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def size(self) -> int:
        return self.n_forget + self.n_retain

    def to_dict(self, timing: bool = False) -> dict:
        d = asdict(self)
        d["size"] = self.size
        d["per_concept"] = {str(k): v for k, v in self.per_concept.items()}
        if not timing:
            d.pop("seconds")
        return d


def _frac(mask: np.ndarray) -> float:
    return float(mask.mean()) if mask.size else float("nan")


def zero_shot_eval(model: DualEncoder, batch: PairBatch, prototypes: np.ndarray, forget_concepts) -> EvalReport:
    start = time.perf_counter()
    prototypes = np.atleast_2d(prototypes)
    if batch.labels.max() >= prototypes.shape[0]:
        raise MissingPrototypeError(f"label {int(batch.labels.max())} has no text prototype")
    scores = model.encode_images(batch.vision) @ model.encode_texts(prototypes).T
    rank = true_label_rank(scores, batch.labels)
    is_forget = np.isin(batch.labels, list(forget_concepts))
    per_concept = {int(c): _frac(rank[batch.labels == c] < 1) for c in np.unique(batch.labels)}
    report = EvalReport(
        fa1=_frac(rank[is_forget] < 1),
        fa5=_frac(rank[is_forget] < 5),
        ta1=_frac(rank[~is_forget] < 1),
        ta5=_frac(rank[~is_forget] < 5),
        n_forget=int(is_forget.sum()),
        n_retain=int((~is_forget).sum()),
        per_concept=per_concept,
    )
    report.seconds = time.perf_counter() - start
    return report


class ZeroShotEvaluator:
    """``eval()`` for the step-size search: model -> (FA@k on forget concepts, TA@1 on the rest)."""

    def __init__(self, batch: PairBatch, prototypes: np.ndarray, forget_concepts, topk: int = 1):
        if topk not in (1, 5):
            raise ValueError("topk must be 1 or 5")
        self.batch = batch
        self.prototypes = np.atleast_2d(prototypes)
        self.forget_concepts = tuple(int(c) for c in forget_concepts)
        self.topk = topk
        self.calls = 0
        if not np.isin(batch.labels, self.forget_concepts).any():
            raise ValueError("evaluation batch holds no forget-concept samples")

    def report(self, model: DualEncoder) -> EvalReport:
        return zero_shot_eval(model, self.batch, self.prototypes, self.forget_concepts)

    def __call__(self, model: DualEncoder) -> tuple[float, float]:
        self.calls += 1
        r = self.report(model)
        return (r.fa1 if self.topk == 1 else r.fa5), r.ta1


def search_batch(split: DatasetSplit, concepts=None, exclude=None) -> PairBatch:
    """Rows scored during the step-size search.

    Forget side: every available image of ``concepts`` (their training pairs
    and their held-out test rows). Retain side: the validation rows of
    concepts outside ``exclude`` (default: all split targets).
    """
    concepts = list(split.targets if concepts is None else concepts)
    exclude = list(split.targets if exclude is None else exclude)
    forget = split.forget.where(np.isin(split.forget.labels, concepts))
    forget = forget.concat(split.test.where(np.isin(split.test.labels, concepts)))
    keep = ~np.isin(split.validation.labels, exclude)
    if not keep.any():
        raise ValueError("no validation rows left for retain accuracy")
    return forget.concat(split.validation.where(keep))


def search_evaluator(split: DatasetSplit, concepts=None, topk: int = 1) -> ZeroShotEvaluator:
    concepts = list(split.targets if concepts is None else concepts)
    return ZeroShotEvaluator(search_batch(split, concepts), split.prototypes, concepts, topk)
