"""Gap Ratio aggregation: how far each method sits from a hypothetical best, metric by metric.

GR(s, m) = |s_m - s_best| / s_best. Selected metrics can be summed into one
entry before the ratio (memory + storage in the shipped benchmark table).
Summaries divide by the entry count: mean = l1 / n, and the "l2" summary is
the Euclidean norm / n.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

HIGHER, LOWER = "higher", "lower"
BEST_ROW_NAME = "Best"

# grouping that matches the shipped table: 6 accuracies + FID, then time and memory+storage
BENCHMARK_COMBINE = {"memory+storage": ("memory", "storage")}
BENCHMARK_GROUPS = {
    "effectiveness": ("UA_style", "IRA_style", "CRA_style", "UA_object", "IRA_object", "CRA_object", "FID"),
    "efficiency": ("time", "memory+storage"),
}


class UndefinedGapRatioError(ValueError):
    """The best value of some metric is zero, so the ratio has no denominator."""


class TableFormatError(ValueError):
    pass


@dataclass(frozen=True)
class BenchmarkTable:
    methods: tuple[str, ...]
    metrics: tuple[str, ...]
    values: np.ndarray  # methods x metrics
    orientation: dict
    best: dict | None = None  # explicit hypothetical-best row, metric -> value
    combine: dict = field(default_factory=dict)  # entry name -> metrics summed into it
    groups: dict = field(default_factory=dict)  # group name -> entry names

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        if values.shape != (len(self.methods), len(self.metrics)):
            raise TableFormatError("value grid does not match methods x metrics")
        for m in self.metrics:
            if self.orientation.get(m) not in (HIGHER, LOWER):
                raise TableFormatError(f"metric {m!r} needs orientation 'higher' or 'lower'")
        for name, parts in self.combine.items():
            missing = [p for p in parts if p not in self.metrics]
            if missing:
                raise TableFormatError(f"combined entry {name!r} refers to unknown metrics {missing}")
            if len({self.orientation[p] for p in parts}) != 1:
                raise TableFormatError(f"combined entry {name!r} mixes orientations")
        entries = set(self.entries)
        for g, names in self.groups.items():
            if not set(names) <= entries:
                raise TableFormatError(f"group {g!r} names unknown entries")
        if np.isnan(values).any():
            raise TableFormatError("missing cells")

    @property
    def entries(self) -> list[str]:
        """GR vector entries: metrics in column order, each combined set at its first member's slot."""
        consumed = {p: name for name, parts in self.combine.items() for p in parts}
        out = []
        for m in self.metrics:
            name = consumed.get(m, m)
            if name not in out:
                out.append(name)
        return out

    def entry_orientation(self, entry: str) -> str:
        parts = self.combine.get(entry, (entry,))
        return self.orientation[parts[0]]

    def entry_values(self) -> np.ndarray:
        """methods x entries, combined metrics summed."""
        col = {m: j for j, m in enumerate(self.metrics)}
        cols = []
        for e in self.entries:
            parts = self.combine.get(e, (e,))
            cols.append(sum(self.values[:, col[p]] for p in parts))
        return np.column_stack(cols)

    def best_values(self, use_explicit: bool = True) -> np.ndarray:
        """Per entry best. A combined entry always takes the best summed value over methods:
        the explicit row's parts can come from different methods, so their sum is not attained."""
        vals = self.entry_values()
        out = []
        for j, e in enumerate(self.entries):
            if use_explicit and self.best is not None and e not in self.combine:
                out.append(self.best[e])
            else:
                out.append(vals[:, j].max() if self.entry_orientation(e) == HIGHER else vals[:, j].min())
        return np.array(out, dtype=np.float64)

    def with_grouping(self, combine: dict, groups: dict) -> "BenchmarkTable":
        return BenchmarkTable(self.methods, self.metrics, self.values, self.orientation, self.best, combine, groups)


def _summary(v: np.ndarray) -> dict:
    n = v.size
    return {"l1": float(np.abs(v).sum() / n), "l2": float(np.linalg.norm(v) / n)}


@dataclass(frozen=True)
class GapRatioReport:
    entries: tuple[str, ...]
    best: np.ndarray
    vectors: dict  # method -> GR vector over entries
    groups: dict  # group name -> entry names

    def mean(self, method: str) -> float:
        return _summary(self.vectors[method])["l1"]

    def l2(self, method: str) -> float:
        return _summary(self.vectors[method])["l2"]

    def group(self, method: str, name: str) -> dict:
        idx = [self.entries.index(e) for e in self.groups[name]]
        return _summary(self.vectors[method][idx])

    def summary(self, method: str) -> dict:
        s = _summary(self.vectors[method])
        out = {"mean": s["l1"], "l2": s["l2"]}
        for g in self.groups:
            out[g] = self.group(method, g)
        return out

    def to_dict(self) -> dict:
        return {
            "entries": list(self.entries),
            "best": [float(b) for b in self.best],
            "methods": {
                m: {"gr": [float(x) for x in v], **self.summary(m)} for m, v in self.vectors.items()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = ["method", *[f"GR_{e}" for e in self.entries], "mean", "l2"]
        for g in self.groups:
            head += [f"{g}_l1", f"{g}_l2"]
        w.writerow(head)
        for m, v in self.vectors.items():
            s = self.summary(m)
            row = [m, *[repr(float(x)) for x in v], repr(s["mean"]), repr(s["l2"])]
            for g in self.groups:
                row += [repr(s[g]["l1"]), repr(s[g]["l2"])]
            w.writerow(row)
        return buf.getvalue()


def gap_ratio(table: BenchmarkTable, use_explicit_best: bool = True) -> GapRatioReport:
    """Per-method GR vectors. The explicit best row, when the table has one, is used unless told otherwise."""
    best = table.best_values(use_explicit_best)
    zero = [e for e, b in zip(table.entries, best) if b == 0]
    if zero:
        raise UndefinedGapRatioError(f"best value is zero for {zero}")
    vals = table.entry_values()
    gr = np.abs(vals - best) / np.abs(best)
    vectors = {m: gr[i] for i, m in enumerate(table.methods)}
    return GapRatioReport(tuple(table.entries), best, vectors, dict(table.groups))


# -- CSV ingestion ---------------------------------------------------------------


def parse_table(text: str, best_row: str | None = BEST_ROW_NAME, combine: dict | None = None,
                groups: dict | None = None) -> BenchmarkTable:
    """First line ``orientation,<higher|lower>...``; second line ``method,<metric>...``; one row per method.

    A row named ``best_row`` is lifted out as the explicit hypothetical best.
    """
    rows = [r for r in csv.reader(io.StringIO(text)) if r and any(c.strip() for c in r)]
    if len(rows) < 3:
        raise TableFormatError("need an orientation line, a header and at least one method row")
    orient, header, body = rows[0], rows[1], rows[2:]
    if orient[0].strip().lower() != "orientation":
        raise TableFormatError("first line must start with 'orientation'")
    if len(orient) != len(header):
        raise TableFormatError("orientation line and header differ in length")
    metrics = tuple(h.strip() for h in header[1:])
    orientation = {m: o.strip().lower() for m, o in zip(metrics, orient[1:])}
    methods, values, best = [], [], None
    for r in body:
        if len(r) != len(header):
            raise TableFormatError(f"row {r[0]!r} has {len(r)} cells, expected {len(header)}")
        try:
            nums = [float(c) for c in r[1:]]
        except ValueError as exc:
            raise TableFormatError(f"non-numeric cell in row {r[0]!r}") from exc
        name = r[0].strip()
        if best_row is not None and name == best_row:
            best = dict(zip(metrics, nums))
        else:
            methods.append(name)
            values.append(nums)
    if not methods:
        raise TableFormatError("no method rows")
    return BenchmarkTable(tuple(methods), metrics, np.array(values), orientation, best, combine or {}, groups or {})


def load_table(path, **kw) -> BenchmarkTable:
    return parse_table(Path(path).read_text(), **kw)


def benchmark_table() -> BenchmarkTable:
    """The shipped benchmark fixture with its memory+storage combination and effectiveness/efficiency groups."""
    text = resources.files("unlearnlab.evalbench").joinpath("fixtures/benchmark.csv").read_text()
    return parse_table(text, combine=BENCHMARK_COMBINE, groups=BENCHMARK_GROUPS)


def method_names(report: GapRatioReport) -> Sequence[str]:
    return list(report.vectors)
