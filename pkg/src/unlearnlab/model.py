"""Two-tower contrastive encoder with individually addressable affine layers."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .numerics import EPS, DegenerateVectorError, make_rng

CHECKPOINT_KIND = "checkpoint"
CHECKPOINT_SUFFIX = ".ckpt"
TOWERS = ("vision", "text")


class DegenerateEmbeddingError(DegenerateVectorError):
    pass


class UnknownLayerError(KeyError):
    pass


class ShapeMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class LayerId:
    tower: str
    name: str
    index: int


@dataclass(frozen=True)
class Layer:
    id: LayerId
    weight: np.ndarray
    bias: np.ndarray

    @property
    def params(self) -> tuple[np.ndarray, np.ndarray]:
        return self.weight, self.bias


@dataclass(frozen=True)
class Architecture:
    vision_dims: tuple[int, ...] = (32, 64, 64, 16)
    text_dims: tuple[int, ...] = (24, 64, 64, 16)
    tau: float = 0.07

    def __post_init__(self):
        if len(self.vision_dims) < 2 or len(self.text_dims) < 2:
            raise ValueError("each tower needs at least one affine layer")
        if self.vision_dims[-1] != self.text_dims[-1]:
            raise ValueError("towers must end in the same embedding dimension")
        if min(self.vision_dims + self.text_dims) < 1:
            raise ValueError("layer widths must be positive")
        if not self.tau > 0:
            raise ValueError("temperature must be positive")

    @property
    def embed_dim(self) -> int:
        return self.vision_dims[-1]

    def to_dict(self) -> dict:
        return {"vision_dims": list(self.vision_dims), "text_dims": list(self.text_dims), "tau": self.tau}

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(tuple(d["vision_dims"]), tuple(d["text_dims"]), float(d["tau"]))


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class DualEncoder:
    """Vision and text MLP towers: affine, tanh, ..., affine, then l2 normalisation.

    Layers are kept in canonical order (vision tower first, then text) and
    their arrays are read-only, so edits always go through :meth:`set_layer`
    which returns a new model sharing every untouched array.
    """

    layers: tuple[Layer, ...]
    tau: float
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("temperature must be positive")
        index = {}
        for pos, layer in enumerate(self.layers):
            if layer.id.name in index:
                raise ValueError(f"duplicate layer name {layer.id.name}")
            if layer.id.index != pos:
                raise ValueError("layer ordinal does not match its position")
            index[layer.id.name] = pos
        for tower in TOWERS:
            chain = [l for l in self.layers if l.id.tower == tower]
            if not chain:
                raise ValueError(f"{tower} tower is empty")
            for a, b in zip(chain, chain[1:]):
                if a.weight.shape[0] != b.weight.shape[1]:
                    raise ValueError(f"{a.id.name} -> {b.id.name} shapes do not chain")
            for l in chain:
                if l.bias.shape != (l.weight.shape[0],):
                    raise ValueError(f"bias of {l.id.name} does not match its weight")
        if self.tower("vision")[-1].weight.shape[0] != self.tower("text")[-1].weight.shape[0]:
            raise ValueError("towers must end in the same embedding dimension")
        object.__setattr__(self, "_index", index)

    @classmethod
    def init(cls, arch: Architecture = Architecture(), seed: int = 0) -> "DualEncoder":
        """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero; vision drawn before text."""
        rng = make_rng(seed)
        layers = []
        for tower, dims in (("vision", arch.vision_dims), ("text", arch.text_dims)):
            for k, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:]), start=1):
                bound = 1.0 / np.sqrt(fan_in)
                w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
                layers.append(
                    Layer(LayerId(tower, f"{tower}.fc{k}", len(layers)), _frozen(w), _frozen(np.zeros(fan_out)))
                )
        return cls(tuple(layers), float(arch.tau))

    # -- structure -------------------------------------------------------

    def tower(self, tower: str) -> list[Layer]:
        return [l for l in self.layers if l.id.tower == tower]

    @property
    def layer_ids(self) -> list[LayerId]:
        return [l.id for l in self.layers]

    @property
    def layer_names(self) -> list[str]:
        return [l.id.name for l in self.layers]

    @property
    def architecture(self) -> Architecture:
        dims = {}
        for tower in TOWERS:
            chain = self.tower(tower)
            dims[tower] = (chain[0].weight.shape[1],) + tuple(l.weight.shape[0] for l in chain)
        return Architecture(dims["vision"], dims["text"], self.tau)

    @property
    def n_params(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def layer(self, name: str) -> Layer:
        try:
            return self.layers[self._index[name]]
        except KeyError:
            raise UnknownLayerError(name) from None

    def get_layer(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        layer = self.layer(name)
        return layer.weight, layer.bias

    def set_layer(self, name: str, weight, bias) -> "DualEncoder":
        old = self.layer(name)
        weight = np.asarray(weight, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weight.shape != old.weight.shape or bias.shape != old.bias.shape:
            raise ShapeMismatchError(
                f"{name}: expected {old.weight.shape}/{old.bias.shape}, got {weight.shape}/{bias.shape}"
            )
        if not (np.all(np.isfinite(weight)) and np.all(np.isfinite(bias))):
            raise ValueError(f"{name}: non-finite parameters")
        layers = list(self.layers)
        layers[old.id.index] = Layer(old.id, _frozen(weight), _frozen(bias))
        return DualEncoder(tuple(layers), self.tau)

    def fingerprint(self) -> str:
        arrays = [np.array([self.tau])]
        for l in self.layers:
            arrays.extend(l.params)
        return container.digest(*arrays)

    def equals(self, other: "DualEncoder") -> bool:
        if self.layer_names != other.layer_names or self.tau != other.tau:
            return False
        return all(
            np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias)
            for a, b in zip(self.layers, other.layers)
        )

    # -- forward ---------------------------------------------------------

    def tower_activations(self, tower: str, x: np.ndarray) -> list[np.ndarray]:
        """Row-batched forward; returns [input, a1, ..., a_{L-1}, z_L] (last is pre-normalisation)."""
        acts = [np.asarray(x, dtype=np.float64)]
        chain = self.tower(tower)
        if acts[0].shape[-1] != chain[0].weight.shape[1]:
            raise ShapeMismatchError(
                f"{tower} input has width {acts[0].shape[-1]}, expected {chain[0].weight.shape[1]}"
            )
        for k, layer in enumerate(chain):
            z = acts[-1] @ layer.weight.T + layer.bias
            acts.append(z if k == len(chain) - 1 else np.tanh(z))
        return acts

    def encode(self, tower: str, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        z = self.tower_activations(tower, np.atleast_2d(x))[-1]
        n = np.sqrt(np.einsum("ij,ij->i", z, z))
        if np.any(n <= EPS):
            raise DegenerateEmbeddingError(f"{tower} embedding has zero norm")
        e = z / n[:, None]
        return e[0] if single else e

    def encode_images(self, x) -> np.ndarray:
        return self.encode("vision", x)

    def encode_texts(self, x) -> np.ndarray:
        return self.encode("text", x)

    def forward_vision(self, x) -> np.ndarray:
        return self.encode("vision", x)

    def forward_text(self, x) -> np.ndarray:
        return self.encode("text", x)

    # -- persistence -----------------------------------------------------

    def to_container(self) -> tuple[dict, list[tuple[str, np.ndarray]]]:
        meta = {
            "architecture": self.architecture.to_dict(),
            "tau": self.tau,
            "layers": [{"name": l.id.name, "tower": l.id.tower} for l in self.layers],
            "fingerprint": self.fingerprint(),
        }
        arrays = []
        for l in self.layers:
            arrays += [(f"{l.id.name}.weight", l.weight), (f"{l.id.name}.bias", l.bias)]
        return meta, arrays

    @classmethod
    def from_container(cls, meta: dict, arrays: dict[str, np.ndarray]) -> "DualEncoder":
        layers = []
        try:
            for pos, entry in enumerate(meta["layers"]):
                name = entry["name"]
                layers.append(
                    Layer(
                        LayerId(entry["tower"], name, pos),
                        _frozen(arrays[f"{name}.weight"]),
                        _frozen(arrays[f"{name}.bias"]),
                    )
                )
            model = cls(tuple(layers), float(meta["tau"]))
        except (KeyError, ValueError) as exc:
            raise container.CorruptFileError(f"inconsistent checkpoint: {exc}") from exc
        if model.architecture != Architecture.from_dict(meta["architecture"]):
            raise container.CorruptFileError("architecture descriptor does not match layer table")
        return model


def save_checkpoint(model: DualEncoder, path, extra_meta: dict | None = None) -> None:
    meta, arrays = model.to_container()
    if extra_meta:
        meta = {**meta, **extra_meta}
    container.write(path, CHECKPOINT_KIND, meta, arrays)


def load_checkpoint(path) -> DualEncoder:
    meta, arrays = container.read(Path(path), CHECKPOINT_KIND)
    return DualEncoder.from_container(meta, arrays)


def read_checkpoint_meta(path) -> dict:
    return container.read(Path(path), CHECKPOINT_KIND)[0]
