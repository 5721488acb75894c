"""Retain (contrastive) and forget (cosine embedding) losses with analytic gradients.

Gradients are computed by hand-written backpropagation through
affine -> tanh -> ... -> affine -> l2-normalise for each tower. The coupled
softmax of the contrastive loss is evaluated over the whole batch in memory;
backpropagation through the towers is then run over row chunks in ascending
sample order and the per-chunk parameter gradients are summed in that order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from . import container
from .model import DegenerateEmbeddingError, DualEncoder
from .numerics import EPS

Grads = Dict[str, Tuple[np.ndarray, np.ndarray]]

LOSS_KINDS = ("forget", "retain", "contrastive")
SNAPSHOT_KIND = "snapshot"
FD_STEP = 1e-5

log = logging.getLogger(__name__)


class FingerprintMismatchError(ValueError):
    """Artifacts computed from a different parameter point than the one supplied."""


@dataclass(frozen=True)
class PairBatch:
    vision: np.ndarray
    text: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.vision, dtype=np.float64))
        t = np.atleast_2d(np.asarray(self.text, dtype=np.float64))
        y = np.asarray(self.labels, dtype=np.int64).ravel()
        if v.shape[0] < 1:
            raise ValueError("a batch needs at least one pair")
        if not (v.shape[0] == t.shape[0] == y.shape[0]):
            raise ValueError("row counts of vision, text and labels disagree")
        if np.any(y < 0):
            raise ValueError("labels must be non-negative concept ids")
        object.__setattr__(self, "vision", v)
        object.__setattr__(self, "text", t)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.vision.shape[0]

    def subset(self, idx) -> "PairBatch":
        idx = np.asarray(idx, dtype=np.int64)
        return PairBatch(self.vision[idx], self.text[idx], self.labels[idx])

    def where(self, mask) -> "PairBatch":
        return self.subset(np.flatnonzero(mask))

    def concat(self, other: "PairBatch") -> "PairBatch":
        return PairBatch(
            np.vstack([self.vision, other.vision]),
            np.vstack([self.text, other.text]),
            np.concatenate([self.labels, other.labels]),
        )

    def repeat(self, times: int) -> "PairBatch":
        return PairBatch(
            np.repeat(self.vision, times, axis=0),
            np.repeat(self.text, times, axis=0),
            np.repeat(self.labels, times),
        )


# -- loss heads: (V, T, tau) -> (loss, dL/dV, dL/dT) -------------------------


def _forget_head(v, t, tau):
    n = v.shape[0]
    cos = np.einsum("ij,ij->i", v, t)
    return float(np.mean(1.0 - cos)), -t / n, -v / n


def _log_softmax(s, axis):
    m = s.max(axis=axis, keepdims=True)
    shifted = s - m
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _contrastive_head(v, t, tau):
    n = v.shape[0]
    s = (v @ t.T) / tau
    log_i2t = _log_softmax(s, axis=1)
    log_t2i = _log_softmax(s, axis=0)
    loss = -(np.trace(log_i2t) + np.trace(log_t2i)) / (2 * n)
    eye = np.eye(n)
    ds = (np.exp(log_i2t) - eye + np.exp(log_t2i) - eye) / (2 * n)
    return float(loss), ds @ t / tau, ds.T @ v / tau


_HEADS = {"forget": _forget_head, "retain": _contrastive_head, "contrastive": _contrastive_head}


def _head(kind: str):
    try:
        return _HEADS[kind]
    except KeyError:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}") from None


def _embed(z):
    n = np.sqrt(np.einsum("ij,ij->i", z, z))
    if np.any(n <= EPS):
        raise DegenerateEmbeddingError("embedding has zero norm")
    return z / n[:, None], n


def loss(model: DualEncoder, batch: PairBatch, kind: str) -> float:
    head = _head(kind)
    v = model.encode_images(batch.vision)
    t = model.encode_texts(batch.text)
    return head(v, t, model.tau)[0]


def retain_loss(model: DualEncoder, batch: PairBatch) -> float:
    return loss(model, batch, "retain")


def forget_loss(model: DualEncoder, batch: PairBatch) -> float:
    return loss(model, batch, "forget")


def _backprop_tower(model: DualEncoder, tower: str, acts: list[np.ndarray], d_out: np.ndarray, out: Grads):
    chain = model.tower(tower)
    delta = d_out
    for k in range(len(chain) - 1, -1, -1):
        layer = chain[k]
        g_w = delta.T @ acts[k]
        g_b = delta.sum(axis=0)
        name = layer.id.name
        if name in out:
            out[name] = (out[name][0] + g_w, out[name][1] + g_b)
        else:
            out[name] = (g_w, g_b)
        if k > 0:
            delta = (delta @ layer.weight) * (1.0 - acts[k] ** 2)


def loss_and_grad(model: DualEncoder, batch: PairBatch, kind: str, chunk_size: int | None = None):
    """Loss value and gradient w.r.t. every layer's (weight, bias), in canonical layer order."""
    head = _head(kind)
    acts_v = model.tower_activations("vision", batch.vision)
    acts_t = model.tower_activations("text", batch.text)
    v, nv = _embed(acts_v[-1])
    t, nt = _embed(acts_t[-1])
    value, dv, dt = head(v, t, model.tau)
    # through the normalisation: dz = (de - e <e, de>) / |z|
    dzv = (dv - v * np.einsum("ij,ij->i", v, dv)[:, None]) / nv[:, None]
    dzt = (dt - t * np.einsum("ij,ij->i", t, dt)[:, None]) / nt[:, None]

    n = len(batch)
    size = n if not chunk_size else int(chunk_size)
    if size < 1:
        raise ValueError("chunk_size must be positive")
    acc: Grads = {}
    for start in range(0, n, size):
        rows = slice(start, min(start + size, n))
        _backprop_tower(model, "vision", [a[rows] for a in acts_v], dzv[rows], acc)
        _backprop_tower(model, "text", [a[rows] for a in acts_t], dzt[rows], acc)
    return value, {name: acc[name] for name in model.layer_names}


def grad(model: DualEncoder, batch: PairBatch, kind: str, chunk_size: int | None = None) -> Grads:
    return loss_and_grad(model, batch, kind, chunk_size)[1]


def grads_flat(grads: Grads, names=None) -> np.ndarray:
    names = list(grads) if names is None else names
    return np.concatenate([np.concatenate([grads[n][0].ravel(), grads[n][1]]) for n in names])


# -- one-time gradient snapshot ----------------------------------------------


@dataclass(frozen=True)
class GradientSnapshot:
    forget: Grads
    retain: Grads
    n_forget: int
    n_retain: int
    fingerprint: str
    forget_kind: str = "forget"

    @property
    def layer_names(self) -> list[str]:
        return list(self.forget)

    def check(self, model: DualEncoder) -> None:
        if model.fingerprint() != self.fingerprint:
            raise FingerprintMismatchError("snapshot was computed at different parameters")

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {
            "n_forget": self.n_forget,
            "n_retain": self.n_retain,
            "fingerprint": self.fingerprint,
            "forget_kind": self.forget_kind,
            "layers": self.layer_names,
            **(extra_meta or {}),
        }
        arrays = []
        for section, grads in (("forget", self.forget), ("retain", self.retain)):
            for name, (g_w, g_b) in grads.items():
                arrays += [(f"{section}/{name}.weight", g_w), (f"{section}/{name}.bias", g_b)]
        container.write(path, SNAPSHOT_KIND, meta, arrays)

    @classmethod
    def load(cls, path) -> "GradientSnapshot":
        meta, arrays = container.read(path, SNAPSHOT_KIND)
        try:
            sections = {
                s: {n: (arrays[f"{s}/{n}.weight"], arrays[f"{s}/{n}.bias"]) for n in meta["layers"]}
                for s in ("forget", "retain")
            }
        except KeyError as exc:
            raise container.CorruptFileError(f"snapshot is missing {exc}") from exc
        return cls(
            sections["forget"],
            sections["retain"],
            int(meta["n_forget"]),
            int(meta["n_retain"]),
            meta["fingerprint"],
            meta.get("forget_kind", "forget"),
        )


def snapshot(
    model: DualEncoder,
    forget_set: PairBatch,
    retain_set: PairBatch,
    chunk_size: int | None = None,
    forget_kind: str = "forget",
) -> GradientSnapshot:
    """Forget and retain gradients at the current parameters, computed once."""
    if forget_kind not in ("forget", "contrastive"):
        raise ValueError("forget_kind must be 'forget' or 'contrastive'")
    return GradientSnapshot(
        forget=grad(model, forget_set, forget_kind, chunk_size),
        retain=grad(model, retain_set, "retain", chunk_size),
        n_forget=len(forget_set),
        n_retain=len(retain_set),
        fingerprint=model.fingerprint(),
        forget_kind=forget_kind,
    )


# -- finite-difference verifier ------------------------------------------------


def fd_check(model: DualEncoder, batch: PairBatch, kind: str, h: float = FD_STEP) -> float:
    """Max over all parameters of |analytic - central FD| / max(|FD|, 1e-8)."""
    analytic = grad(model, batch, kind)
    worst = 0.0
    for name in model.layer_names:
        w, b = model.get_layer(name)
        for which, arr in ((0, w), (1, b)):
            for idx in np.ndindex(arr.shape):
                plus, minus = arr.copy(), arr.copy()
                plus[idx] += h
                minus[idx] -= h
                if which == 0:
                    m_plus, m_minus = model.set_layer(name, plus, b), model.set_layer(name, minus, b)
                else:
                    m_plus, m_minus = model.set_layer(name, w, plus), model.set_layer(name, w, minus)
                numeric = (loss(m_plus, batch, kind) - loss(m_minus, batch, kind)) / (2 * h)
                err = abs(analytic[name][which][idx] - numeric) / max(abs(numeric), 1e-8)
                worst = max(worst, err)
    return worst


# -- plain gradient steps ------------------------------------------------------


def apply_step(model: DualEncoder, grads: Grads, lr: float) -> DualEncoder:
    """theta <- theta - lr * grads for every layer present in ``grads``."""
    for name, (g_w, g_b) in grads.items():
        w, b = model.get_layer(name)
        model = model.set_layer(name, w - lr * g_w, b - lr * g_b)
    return model


def train_contrastive(model: DualEncoder, batch: PairBatch, lr: float, epochs: int, log_every: int = 0) -> DualEncoder:
    """Full-batch gradient descent on the contrastive loss, fixed step, fixed epoch count."""
    for epoch in range(epochs):
        value, g = loss_and_grad(model, batch, "retain")
        model = apply_step(model, g, lr)
        if log_every and epoch % log_every == 0:
            log.info("epoch %d contrastive loss %.5f", epoch, value)
    return model
