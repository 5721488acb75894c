"""Single-layer gradient edits, step-size search, the layer-selection driver, and iterative baselines.

Sign convention. The unlearning objective is ``L_retain - alpha * L_forget``,
so the forget term's gradient is ``-grad L_forget``. An edit stores that
*unlearning direction* ``d`` and is applied as ``theta_l <- theta_l - lam * d``,
i.e. it moves up the cosine-embedding forget loss and pushes matched
image/text pairs apart. Layer importance and alignment are always computed from
the raw forget gradient held in the snapshot.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import container
from .model import DualEncoder, ShapeMismatchError, UnknownLayerError
from .numerics import flat_norm
from .objectives import FingerprintMismatchError, Grads, GradientSnapshot, PairBatch, apply_step, grad, snapshot
from .selection import LayerMetrics, MetricsTable, ParetoFront, Selection, SelectionStrategy, layer_metrics, \
    pareto_front, select

log = logging.getLogger(__name__)

DELTA_KIND = "delta"
DELTA_SUFFIX = ".delta"

Evaluator = Callable[[DualEncoder], tuple]


class NoCandidateError(RuntimeError):
    """Every layer had a vanishing forget gradient, so there is nothing to edit."""


class SearchAborted(RuntimeError):
    def __init__(self, message: str, trace: "SearchTrace"):
        super().__init__(message)
        self.trace = trace


# -- the edit --------------------------------------------------------------------


@dataclass(frozen=True)
class UnlearnDelta:
    """A plug-in edit: ``theta_l <- theta_l - lam * direction_l`` for each layer in ``direction``."""

    direction: Grads
    lam: float
    concepts: tuple[int, ...] = ()
    fingerprint: str = ""

    @property
    def layers(self) -> tuple[str, ...]:
        return tuple(self.direction)

    @property
    def layer(self) -> str:
        if len(self.direction) != 1:
            raise ValueError("delta spans several layers")
        return next(iter(self.direction))

    def scaled(self, lam: float) -> "UnlearnDelta":
        return UnlearnDelta(self.direction, lam, self.concepts, self.fingerprint)

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {
            "lambda": float(self.lam),
            "layers": list(self.layers),
            "concepts": list(self.concepts),
            "fingerprint": self.fingerprint,
            **(extra_meta or {}),
        }
        arrays = []
        for name, (d_w, d_b) in self.direction.items():
            arrays += [(f"{name}.weight", d_w), (f"{name}.bias", d_b)]
        container.write(path, DELTA_KIND, meta, arrays)

    @classmethod
    def load(cls, path) -> "UnlearnDelta":
        meta, arrays = container.read(Path(path), DELTA_KIND)
        try:
            direction = {n: (arrays[f"{n}.weight"], arrays[f"{n}.bias"]) for n in meta["layers"]}
        except KeyError as exc:
            raise container.CorruptFileError(f"delta is missing {exc}") from exc
        return cls(direction, float(meta["lambda"]), tuple(meta["concepts"]), meta["fingerprint"])


def unlearning_direction(snap: GradientSnapshot, layers: Sequence[str], mask: dict | None = None) -> Grads:
    """Negated forget gradient restricted to ``layers`` (and to ``mask`` when given)."""
    out = {}
    for name in layers:
        g_w, g_b = snap.forget[name]
        if mask is not None:
            m_w, m_b = mask[name]
            g_w, g_b = np.where(m_w, g_w, 0.0), np.where(m_b, g_b, 0.0)
        out[name] = (-g_w, -g_b)
    return out


def apply_direction(model: DualEncoder, direction: Grads, lam) -> DualEncoder:
    lam = float(lam)
    for name, (d_w, d_b) in direction.items():
        w, b = model.get_layer(name)
        if d_w.shape != w.shape or d_b.shape != b.shape:
            raise ShapeMismatchError(f"direction for {name} does not match the layer")
        if lam == 0.0:
            continue
        model = model.set_layer(name, w - lam * d_w, b - lam * d_b)
    return model


def apply_delta(model: DualEncoder, delta: UnlearnDelta, lambda_override=None, strict: bool = False) -> DualEncoder:
    """Apply a delta at its own step size (or ``lambda_override``).

    A fingerprint mismatch against the parameters the direction was computed
    at is a warning, or an error when ``strict``.
    """
    for name in delta.layers:
        model.layer(name)  # raises UnknownLayerError
    if delta.fingerprint and model.fingerprint() != delta.fingerprint:
        msg = "delta was computed at different parameters than the model it is applied to"
        if strict:
            raise FingerprintMismatchError(msg)
        warnings.warn(msg, stacklevel=2)
    lam = delta.lam if lambda_override is None else lambda_override
    return apply_direction(model, delta.direction, lam)


def compose(deltas: Sequence[UnlearnDelta]) -> Grads:
    """Sum of lam_i * direction_i per layer (the combined step applied with lam = 1)."""
    total: Grads = {}
    for d in deltas:
        for name, (d_w, d_b) in d.direction.items():
            s_w, s_b = d.lam * d_w, d.lam * d_b
            if name in total:
                total[name] = (total[name][0] + s_w, total[name][1] + s_b)
            else:
                total[name] = (s_w, s_b)
    return total


def apply_deltas(model: DualEncoder, deltas: Sequence[UnlearnDelta]) -> DualEncoder:
    return apply_direction(model, compose(deltas), 1.0)


# -- step-size search --------------------------------------------------------------


@dataclass
class SearchTrace:
    points: list = field(default_factory=list)  # (lam, FA, TA) in probe order
    brackets: list = field(default_factory=list)  # (lam_low, lam_high) after each probe
    chosen: tuple | None = None

    @property
    def lambdas(self) -> list:
        return [p[0] for p in self.points]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "lambda", "FA", "TA", "lambda_low", "lambda_high"])
        for step, ((lam, fa, ta), (lo, hi)) in enumerate(zip(self.points, self.brackets)):
            writer.writerow([step, repr(float(lam)), repr(float(fa)), repr(float(ta)), repr(float(lo)),
                             "inf" if hi is None else repr(float(hi))])
        return buf.getvalue()


def choose_point(points):
    """Minimum FA, then maximum TA, then smallest lambda."""
    fa_min = min(p[1] for p in points)
    tied = [p for p in points if p[1] == fa_min]
    return min(tied, key=lambda p: (-p[2], p[0]))


def bracket_search(probe: Callable, lambda0, steps: int) -> SearchTrace:
    """Double lambda until a probe forgets everything, then bisect the bracket.

    ``probe(lam) -> (FA, TA)``. Works with ``Fraction`` inputs, in which case
    every probed step size is exact. An infinite upper bound is kept as None.
    """
    if not lambda0 > 0:
        raise ValueError("initial step size must be positive")
    if steps < 1:
        raise ValueError("need at least one search step")
    low, high, lam = lambda0 * 0, None, lambda0
    trace = SearchTrace()
    for _ in range(steps):
        try:
            fa, ta = probe(lam)
        except Exception as exc:
            raise SearchAborted(f"evaluation failed at lambda={lam}: {exc}", trace) from exc
        trace.points.append((lam, fa, ta))
        if fa > 0:
            low = lam
        else:
            high = lam
        trace.brackets.append((low, high))
        lam = 2 * lam if high is None else (low + high) / 2
    trace.chosen = choose_point(trace.points)
    return trace


def binary_search(model: DualEncoder, direction: Grads, evaluator: Evaluator, lambda0, steps: int = 10) -> SearchTrace:
    return bracket_search(lambda lam: evaluator(apply_direction(model, direction, lam)), lambda0, steps)


# -- the driver ----------------------------------------------------------------------


@dataclass
class Candidate:
    layers: tuple[str, ...]
    lambda0: float
    trace: SearchTrace

    @property
    def result(self) -> tuple:
        lam, fa, ta = self.trace.chosen
        return self.layers, lam, fa, ta


@dataclass
class SlugDiagnostics:
    table: MetricsTable
    front: ParetoFront
    selection: Selection
    candidates: list[Candidate]
    chosen: Candidate
    gradient_computations: int = 1


@dataclass
class SlugResult:
    model: DualEncoder
    delta: UnlearnDelta
    diagnostics: SlugDiagnostics


def _pick_candidate(candidates: list[Candidate]) -> Candidate:
    fa_min = min(c.trace.chosen[1] for c in candidates)
    tied = [c for c in candidates if c.trace.chosen[1] == fa_min]
    # ties on TA keep the earlier candidate, i.e. the more important front layer
    best = tied[0]
    for c in tied[1:]:
        if c.trace.chosen[2] > best.trace.chosen[2]:
            best = c
    return best


def _region_importance(model: DualEncoder, snap: GradientSnapshot, layers, mask=None) -> float:
    grads, params = [], []
    for name in layers:
        g_w, g_b = snap.forget[name]
        w, b = model.get_layer(name)
        if mask is not None:
            m_w, m_b = mask[name]
            g_w, g_b, w, b = g_w[m_w], g_b[m_b], w[m_w], b[m_b]
        grads += [g_w, g_b]
        params += [w, b]
    p = flat_norm(params)
    return flat_norm(grads) / p if p > 0 else math.inf


def slug_from_snapshot(
    model: DualEncoder,
    snap: GradientSnapshot,
    evaluator: Evaluator,
    steps: int = 10,
    strategy: SelectionStrategy = SelectionStrategy(),
    concepts: Sequence[int] = (),
) -> SlugResult:
    table = layer_metrics(snap, model)
    if not table.metrics:
        raise NoCandidateError("every layer has a vanishing forget gradient")
    front = pareto_front(table.metrics)
    selection = select(strategy, table.metrics, snap)
    if selection.joint:
        groups = [selection.layers]
    else:
        groups = [(name,) for name in selection.layers]
    candidates = []
    for layers in groups:
        if len(layers) == 1 and selection.mask is None:
            importance = table.by_name(layers[0]).importance
        else:
            importance = _region_importance(model, snap, layers, selection.mask)
        direction = unlearning_direction(snap, layers, selection.mask)
        lambda0 = importance / 10
        trace = binary_search(model, direction, evaluator, lambda0, steps)
        log.debug("layers %s: lambda0=%.4g -> chosen %s", layers, lambda0, trace.chosen)
        candidates.append(Candidate(layers, lambda0, trace))
    best = _pick_candidate(candidates)
    direction = unlearning_direction(snap, best.layers, selection.mask)
    delta = UnlearnDelta(direction, float(best.trace.chosen[0]), tuple(int(c) for c in concepts), snap.fingerprint)
    unlearned = apply_direction(model, direction, delta.lam)
    return SlugResult(unlearned, delta, SlugDiagnostics(table, front, selection, candidates, best))


def slug_run(
    model: DualEncoder,
    forget_set: PairBatch,
    retain_set: PairBatch,
    evaluator: Evaluator,
    steps: int = 10,
    strategy: SelectionStrategy = SelectionStrategy(),
    concepts: Sequence[int] = (),
    chunk_size: int | None = None,
) -> SlugResult:
    """One gradient snapshot, layer selection, per-candidate step-size search, single edit."""
    snap = snapshot(model, forget_set, retain_set, chunk_size)
    return slug_from_snapshot(model, snap, evaluator, steps, strategy, concepts)


@dataclass
class JointResult:
    model: DualEncoder
    deltas: list[UnlearnDelta]
    per_concept: list[SlugResult]
    refinements: dict = field(default_factory=dict)  # concept position -> SearchTraces over its multiplier


def joint_unlearn(
    model: DualEncoder,
    concept_sets: Sequence[PairBatch],
    retain_set: PairBatch,
    evaluators: Sequence[Evaluator],
    steps: int = 10,
    concepts: Sequence[int] | None = None,
    chunk_size: int | None = None,
    refine: bool = True,
) -> JointResult:
    """Select one layer and step size per concept at the original weights, then apply all edits at once.

    Edits that land on the same layer add up, so one concept's edit can blunt
    another's. With ``refine``, each concept (in order) whose forget accuracy is
    still above zero on the combined model gets its own step size re-searched
    as a multiplier starting at 1, the other edits held fixed. Passes repeat,
    at most once per concept, until a pass changes nothing.
    """
    if not concept_sets:
        raise ValueError("need at least one concept")
    if len(evaluators) != len(concept_sets):
        raise ValueError("one evaluator per concept is required")
    concepts = list(concepts) if concepts is not None else [None] * len(concept_sets)
    results = []
    for forget_set, evaluator, concept in zip(concept_sets, evaluators, concepts):
        tag = () if concept is None else (int(concept),)
        results.append(slug_run(model, forget_set, retain_set, evaluator, steps, concepts=tag, chunk_size=chunk_size))
    deltas = [r.delta for r in results]
    if len(deltas) == 1:
        return JointResult(results[0].model, deltas, results)
    refinements = {}
    rounds = len(deltas) if refine else 0
    for _ in range(rounds):
        touched = False
        for i, evaluator in enumerate(evaluators):
            if evaluator(apply_deltas(model, deltas))[0] == 0:
                continue
            base = deltas[i]

            def probe(scale, i=i, base=base, evaluator=evaluator):
                trial = list(deltas)
                trial[i] = base.scaled(base.lam * float(scale))
                return evaluator(apply_deltas(model, trial))

            trace = bracket_search(probe, 1.0, steps)
            deltas[i] = base.scaled(base.lam * float(trace.chosen[0]))
            refinements.setdefault(i, []).append(trace)
            touched = True
        if not touched:
            break
    return JointResult(apply_deltas(model, deltas), deltas, results, refinements)


# -- iterative baselines --------------------------------------------------------------


@dataclass(frozen=True)
class BaselineConfig:
    method: str = "GA"
    lr: float = 0.1
    iterations: int = 10
    alpha: float = 1.0  # recorded only; GAFT runs its two phases sequentially

    def __post_init__(self):
        if self.method not in ("GA", "FT", "GAFT"):
            raise ValueError("method must be GA, FT or GAFT")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")


def ga_step(model: DualEncoder, forget_set: PairBatch, lr: float) -> DualEncoder:
    return apply_step(model, grad(model, forget_set, "forget"), -lr)


def ft_step(model: DualEncoder, retain_set: PairBatch, lr: float) -> DualEncoder:
    return apply_step(model, grad(model, retain_set, "retain"), lr)


def baseline_run(model: DualEncoder, config: BaselineConfig, forget_set: PairBatch, retain_set: PairBatch) -> DualEncoder:
    """Full-batch plain gradient steps: GA ascends the forget loss, FT descends the retain loss."""
    if config.lr == 0:
        return model
    if config.method in ("GA", "GAFT"):
        for _ in range(config.iterations):
            model = ga_step(model, forget_set, config.lr)
    if config.method in ("FT", "GAFT"):
        for _ in range(config.iterations):
            model = ft_step(model, retain_set, config.lr)
    return model


def ga_until_forgotten(
    model: DualEncoder, forget_set: PairBatch, evaluator: Evaluator, lr: float, max_iterations: int = 200
) -> tuple[DualEncoder, int, tuple]:
    """Gradient ascent with early stopping at the first iterate whose forget accuracy is 0."""
    fa, ta = evaluator(model)
    k = 0
    while fa > 0 and k < max_iterations:
        model = ga_step(model, forget_set, lr)
        k += 1
        fa, ta = evaluator(model)
    return model, k, (fa, ta)
