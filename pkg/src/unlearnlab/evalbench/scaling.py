"""Evaluator wall-clock against validation size, with a least-squares line through it."""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass

import numpy as np

from ..data import stratified_indices
from ..model import DualEncoder
from ..objectives import PairBatch
from .zeroshot import zero_shot_eval

REPEATS = 3


@dataclass(frozen=True)
class ScalingRow:
    fraction: float
    size: int
    seconds: float
    fa1: float
    ta1: float


@dataclass(frozen=True)
class ScalingResult:
    rows: list[ScalingRow]
    slope: float
    intercept: float
    r2: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fraction", "size", "seconds", "FA@1", "TA@1"])
        for r in self.rows:
            w.writerow([repr(r.fraction), r.size, repr(r.seconds), repr(r.fa1), repr(r.ta1)])
        return buf.getvalue()


def linear_fit(x, y) -> tuple[float, float, float]:
    """Slope, intercept and R^2 of the least-squares line."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def eval_scaling(model: DualEncoder, validation: PairBatch, prototypes, forget_concepts, fractions,
                 seed: int = 0, repeats: int = REPEATS) -> ScalingResult:
    """Median-of-``repeats`` wall-clock of zero-shot evaluation on stratified subsets of ``validation``."""
    fractions = [float(f) for f in fractions]
    if not fractions or any(not 0 < f <= 1 for f in fractions):
        raise ValueError("fractions must lie in (0, 1]")
    zero_shot_eval(model, validation.subset([0]), prototypes, forget_concepts)  # warm-up
    rows = []
    for f in fractions:
        sub = validation if f == 1.0 else validation.subset(stratified_indices(validation.labels, f, seed))
        times, report = [], None
        for _ in range(repeats):
            start = time.perf_counter()
            report = zero_shot_eval(model, sub, prototypes, forget_concepts)
            times.append(time.perf_counter() - start)
        rows.append(ScalingRow(f, len(sub), statistics.median(times), report.fa1, report.ta1))
    if len(rows) < 2:
        return ScalingResult(rows, float("nan"), float("nan"), float("nan"))
    slope, intercept, r2 = linear_fit([r.size for r in rows], [r.seconds for r in rows])
    return ScalingResult(rows, slope, intercept, r2)
