"""Image-text cosine similarity grids, per sample or averaged per concept."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from ..model import DualEncoder
from ..objectives import PairBatch


@dataclass(frozen=True)
class SimilarityMatrix:
    row_ids: tuple
    col_ids: tuple
    values: np.ndarray  # rows x cols, cosines

    def diagonal(self) -> np.ndarray:
        """Entries where the row id equals the column id, in row order."""
        col = {c: j for j, c in enumerate(self.col_ids)}
        return np.array([self.values[i, col[r]] for i, r in enumerate(self.row_ids) if r in col])

    def off_diagonal_mean(self) -> float:
        mask = np.array([[r != c for c in self.col_ids] for r in self.row_ids])
        return float(self.values[mask].mean())

    def entry(self, row, col) -> float:
        return float(self.values[self.row_ids.index(row), self.col_ids.index(col)])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", *self.col_ids])
        for r, vals in zip(self.row_ids, self.values):
            w.writerow([r, *[repr(float(v)) for v in vals]])
        return buf.getvalue()


def similarity_matrix(model: DualEncoder, samples, prototypes, row_ids=None, col_ids=None) -> SimilarityMatrix:
    """Cosine between every image sample's embedding and every text prototype's embedding."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    prototypes = np.atleast_2d(np.asarray(prototypes, dtype=np.float64))
    if samples.shape[0] == 0 or prototypes.shape[0] == 0:
        raise ValueError("similarity needs at least one sample and one prototype")
    vals = model.encode_images(samples) @ model.encode_texts(prototypes).T
    vals = np.clip(vals, -1.0, 1.0)
    rows = tuple(range(samples.shape[0])) if row_ids is None else tuple(row_ids)
    cols = tuple(range(prototypes.shape[0])) if col_ids is None else tuple(col_ids)
    return SimilarityMatrix(rows, cols, vals)


def concept_similarity(model: DualEncoder, batch: PairBatch, prototypes) -> SimilarityMatrix:
    """Rows are concepts present in ``batch``: the mean cosine of that concept's images to each prototype."""
    full = similarity_matrix(model, batch.vision, prototypes)
    concepts = [int(c) for c in np.unique(batch.labels)]
    vals = np.array([full.values[batch.labels == c].mean(axis=0) for c in concepts])
    return SimilarityMatrix(tuple(concepts), full.col_ids, vals)
