"""Layer importance / gradient alignment, the Pareto front over layers, and ablation strategies."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import DualEncoder, LayerId
from .numerics import EPS, cosine, flat_norm, make_rng
from .objectives import Grads, GradientSnapshot

STRATEGIES = (
    "pareto",
    "importance_only",
    "alignment_only",
    "random_layer",
    "all_pareto",
    "all_layers",
    "distributed_weights",
)
CSV_COLUMNS = ("tower", "layer", "importance", "alignment", "forget_grad_norm")


@dataclass(frozen=True)
class LayerMetrics:
    layer: LayerId
    importance: float
    alignment: float
    forget_grad_norm: float


@dataclass(frozen=True)
class MetricsTable:
    """Candidate layers plus the layers dropped for a vanishing forget gradient."""

    metrics: list[LayerMetrics]
    degenerate: list[LayerId] = field(default_factory=list)

    def __iter__(self):
        return iter(self.metrics)

    def __len__(self):
        return len(self.metrics)

    def by_name(self, name: str) -> LayerMetrics:
        for m in self.metrics:
            if m.layer.name == name:
                return m
        raise KeyError(name)


@dataclass(frozen=True)
class ParetoFront:
    entries: list[LayerMetrics]

    @property
    def names(self) -> list[str]:
        return [e.layer.name for e in self.entries]

    def __len__(self):
        return len(self.entries)


def layer_metrics(snapshot: GradientSnapshot, model: DualEncoder) -> MetricsTable:
    snapshot.check(model)
    metrics, degenerate = [], []
    for lid in model.layer_ids:
        g_f = snapshot.forget[lid.name]
        g_r = snapshot.retain[lid.name]
        g_norm = flat_norm(g_f)
        if g_norm < EPS:
            degenerate.append(lid)
            continue
        p_norm = flat_norm(model.get_layer(lid.name))
        importance = g_norm / p_norm if p_norm > 0 else math.inf
        alignment = cosine(np.concatenate([g.ravel() for g in g_f]), np.concatenate([g.ravel() for g in g_r])) \
            if flat_norm(g_r) >= EPS else 0.0
        metrics.append(LayerMetrics(lid, importance, alignment, g_norm))
    return MetricsTable(metrics, degenerate)


def _front_order(m: LayerMetrics):
    return (-m.importance, m.alignment, m.layer.index)


def pareto_front(metrics: Sequence[LayerMetrics]) -> ParetoFront:
    """Keep l unless some l' has strictly higher importance and strictly lower alignment.

    Sorting by descending importance lets one sweep replace the pairwise test:
    a layer is dominated iff the minimum alignment over strictly more important
    layers is below its own.
    """
    metrics = list(metrics)
    order = sorted(metrics, key=_front_order)
    keep = []
    best_above = math.inf  # min alignment among strictly more important layers
    i = 0
    while i < len(order):
        j = i
        while j < len(order) and order[j].importance == order[i].importance:
            j += 1
        group = order[i:j]
        keep += [m for m in group if not best_above < m.alignment]
        best_above = min(best_above, min(m.alignment for m in group))
        i = j
    return ParetoFront(sorted(keep, key=_front_order))


def pareto_front_by_tower(metrics: Sequence[LayerMetrics]) -> dict[str, ParetoFront]:
    towers = sorted({m.layer.tower for m in metrics})
    return {t: pareto_front([m for m in metrics if m.layer.tower == t]) for t in towers}


@dataclass(frozen=True)
class SelectionStrategy:
    kind: str = "pareto"
    top_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}; choose from {STRATEGIES}")
        if not 0 < self.top_fraction <= 1:
            raise ValueError("top_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class Selection:
    """``layers`` are searched one at a time when ``joint`` is false, else edited together.

    ``mask`` (distributed_weights only) marks the chosen entries of every layer.
    """

    kind: str
    layers: tuple[str, ...]
    joint: bool
    mask: dict | None = None


def top_fraction_mask(grads: Grads, fraction: float) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Boolean mask over all parameters keeping the largest |g| entries model-wide.

    Keeps floor(fraction * N + 1/2) entries (at least one); ties resolve to the
    earlier entry in canonical flattened order.
    """
    names = list(grads)
    flat = np.concatenate([np.concatenate([grads[n][0].ravel(), grads[n][1]]) for n in names])
    keep = max(1, int(math.floor(fraction * flat.size + 0.5)))
    order = np.argsort(-np.abs(flat), kind="stable")
    chosen = np.zeros(flat.size, dtype=bool)
    chosen[order[:keep]] = True
    out, pos = {}, 0
    for n in names:
        w, b = grads[n]
        mw = chosen[pos : pos + w.size].reshape(w.shape)
        pos += w.size
        mb = chosen[pos : pos + b.size]
        pos += b.size
        out[n] = (mw, mb)
    return out


def select(strategy: SelectionStrategy, metrics, snapshot: GradientSnapshot | None = None) -> Selection:
    metrics = list(metrics)
    if not metrics:
        raise ValueError("no candidate layers")
    kind = strategy.kind
    if kind == "pareto":
        return Selection(kind, tuple(pareto_front(metrics).names), joint=False)
    if kind == "importance_only":
        best = min(metrics, key=lambda m: (-m.importance, m.layer.index))
        return Selection(kind, (best.layer.name,), joint=False)
    if kind == "alignment_only":
        best = min(metrics, key=lambda m: (m.alignment, m.layer.index))
        return Selection(kind, (best.layer.name,), joint=False)
    if kind == "random_layer":
        ordered = sorted(metrics, key=lambda m: m.layer.index)
        pick = ordered[int(make_rng(strategy.seed).integers(len(ordered)))]
        return Selection(kind, (pick.layer.name,), joint=False)
    if kind == "all_pareto":
        return Selection(kind, tuple(pareto_front(metrics).names), joint=True)
    if kind == "all_layers":
        return Selection(kind, tuple(m.layer.name for m in sorted(metrics, key=lambda m: m.layer.index)), joint=True)
    # distributed_weights
    if snapshot is None:
        raise ValueError("distributed_weights needs the gradient snapshot")
    mask = top_fraction_mask(snapshot.forget, strategy.top_fraction)
    layers = tuple(n for n in snapshot.layer_names if mask[n][0].any() or mask[n][1].any())
    return Selection(kind, layers, joint=True, mask=mask)


def metrics_csv(metrics: Sequence[LayerMetrics]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for m in metrics:
        writer.writerow([m.layer.tower, m.layer.name, repr(m.importance), repr(m.alignment), repr(m.forget_grad_norm)])
    return buf.getvalue()
