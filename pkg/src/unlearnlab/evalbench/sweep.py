"""Forget/retain accuracy along a fixed edit direction for a grid of step sizes."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from ..model import DualEncoder
from ..objectives import Grads
from ..unlearn import apply_direction
from .zeroshot import EvalReport


@dataclass(frozen=True)
class SweepResult:
    layer: str | None
    rows: list  # (lam, EvalReport)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lambda", "FA@1", "FA@5", "TA@1"])
        for lam, r in self.rows:
            w.writerow([repr(float(lam)), repr(r.fa1), repr(r.fa5), repr(r.ta1)])
        return buf.getvalue()

    def report_at(self, lam) -> EvalReport:
        for l, r in self.rows:
            if l == lam:
                return r
        raise KeyError(lam)


def lambda_sweep(model: DualEncoder, direction: Grads, grid, evaluator, layer: str | None = None) -> SweepResult:
    """Every grid point is an edit of the same starting model; ``evaluator.report(model)`` scores it.

    ``layer`` restricts a multi-layer direction to one layer.
    """
    grid = [float(g) for g in grid]
    if not grid:
        raise ValueError("lambda grid is empty")
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValueError("lambda grid must be sorted ascending")
    if layer is not None:
        if layer not in direction:
            raise KeyError(f"direction has no layer {layer!r}")
        direction = {layer: direction[layer]}
    rows = [(lam, evaluator.report(apply_direction(model, direction, lam))) for lam in grid]
    return SweepResult(layer, rows)
