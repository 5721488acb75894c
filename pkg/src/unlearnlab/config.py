"""Run configuration: one JSON file per run, validated, hashed for provenance.

Every stage of the pipeline draws its randomness from the top-level seed via
``sub_seed(seed, stage)`` with the stage names in ``SEED_STAGES``.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .data import ConceptSpec, ConfigurationError
from .model import Architecture
from .numerics import sub_seed
from .selection import STRATEGIES
from .unlearn import BaselineConfig

SEED_STAGES = ("data", "init", "split", "strategy")

DEFAULTS = {
    "seed": 0,
    "out": "run",
    "data": {
        "n_concepts": 8,
        "n_train": 50,
        "n_test": 50,
        "vision_dim": 32,
        "text_dim": 24,
        "sigma": 0.1,
        "input_scale": 6.0,
    },
    "architecture": {"vision_dims": [32, 64, 64, 16], "text_dims": [24, 64, 64, 16], "tau": 0.07},
    "pretrain": {"lr": 0.05, "epochs": 100},
    "unlearn": {
        "steps": 10,
        "val_fraction": 0.05,
        "strategy": "pareto",
        "concepts": [0],
        "topk": 1,
        "top_fraction": 0.5,
    },
    "baselines": [
        {"method": "GA", "lr": 0.1, "iterations": 10, "alpha": 1.0},
        {"method": "FT", "lr": 0.05, "iterations": 10, "alpha": 1.0},
        {"method": "GAFT", "lr": 0.1, "iterations": 10, "alpha": 1.0},
    ],
    "sweep": {"lambda_grid": [0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0]},
}

# config sections each artifact depends on; its stage hash covers exactly these
STAGE_SECTIONS = {
    "dataset": ("seed", "data"),
    "checkpoint": ("seed", "data", "architecture", "pretrain"),
    "snapshot": ("seed", "data", "architecture", "pretrain", "unlearn.concepts", "unlearn.val_fraction"),
    "delta": ("seed", "data", "architecture", "pretrain", "unlearn"),
}


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigurationError(f"unknown config key {where + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f"config key {where + key!r} must be an object")
            out[key] = _merge(base[key], value, where + key + ".")
        else:
            out[key] = value
    return out


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class RunConfig:
    raw: dict

    @classmethod
    def from_dict(cls, d: dict | None = None) -> "RunConfig":
        if d is not None and not isinstance(d, dict):
            raise ConfigurationError("config must be a JSON object")
        cfg = cls(_merge(DEFAULTS, d or {}))
        cfg.validate()
        return cfg

    def with_overrides(self, **kw) -> "RunConfig":
        """Flag overrides; keys are dotted paths such as ``unlearn.steps``. None means 'not given'."""
        raw = copy.deepcopy(self.raw)
        for path, value in kw.items():
            if value is None:
                continue
            node = raw
            *parents, leaf = path.split(".")
            for p in parents:
                node = node[p]
            node[leaf] = value
        return RunConfig.from_dict(raw)

    # -- validation -------------------------------------------------------

    def validate(self) -> None:
        r = self.raw
        try:
            if not isinstance(r["seed"], int) or r["seed"] < 0:
                raise ConfigurationError("seed must be a non-negative integer")
            spec = self.concept_spec()
            arch = self.architecture()
            if arch.vision_dims[0] != spec.vision_dim or arch.text_dims[0] != spec.text_dim:
                raise ConfigurationError("architecture input widths must match the data dimensions")
            p = r["pretrain"]
            if not p["lr"] > 0 or not isinstance(p["epochs"], int) or p["epochs"] < 0:
                raise ConfigurationError("pretrain needs lr > 0 and a non-negative integer epoch count")
            u = r["unlearn"]
            if not isinstance(u["steps"], int) or u["steps"] < 1:
                raise ConfigurationError("unlearn.steps must be an integer >= 1")
            if not 0 < u["val_fraction"] <= 1:
                raise ConfigurationError("unlearn.val_fraction must lie in (0, 1]")
            if not 0 < u["top_fraction"] <= 1:
                raise ConfigurationError("unlearn.top_fraction must lie in (0, 1]")
            if u["strategy"] not in STRATEGIES:
                raise ConfigurationError(f"unlearn.strategy must be one of {STRATEGIES}")
            if u["topk"] not in (1, 5):
                raise ConfigurationError("unlearn.topk must be 1 or 5")
            concepts = u["concepts"]
            if not isinstance(concepts, list) or not concepts:
                raise ConfigurationError("unlearn.concepts must be a non-empty list")
            if any(not isinstance(c, int) or not 0 <= c < spec.n_concepts for c in concepts):
                raise ConfigurationError(f"unlearn.concepts must be integers in [0, {spec.n_concepts})")
            if len(set(concepts)) == spec.n_concepts:
                raise ConfigurationError("cannot forget every concept")
            self.baselines()
            grid = r["sweep"]["lambda_grid"]
            if not isinstance(grid, list) or not grid or any(b < a for a, b in zip(grid, grid[1:])):
                raise ConfigurationError("sweep.lambda_grid must be a non-empty ascending list")
        except ConfigurationError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigurationError(f"invalid config: {exc}") from exc

    # -- typed views ------------------------------------------------------

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    def stage_seed(self, stage: str) -> int:
        if stage not in SEED_STAGES:
            raise KeyError(stage)
        return sub_seed(self.seed, stage)

    def concept_spec(self) -> ConceptSpec:
        return ConceptSpec(**self.raw["data"], seed=sub_seed(self.raw["seed"], "data"))

    def architecture(self) -> Architecture:
        return Architecture.from_dict(self.raw["architecture"])

    def baselines(self) -> list[BaselineConfig]:
        out = []
        for b in self.raw["baselines"]:
            unknown = set(b) - {"method", "lr", "iterations", "alpha"}
            if unknown:
                raise ConfigurationError(f"unknown baseline keys {sorted(unknown)}")
            out.append(BaselineConfig(**b))
        return out

    @property
    def unlearn(self) -> dict:
        return self.raw["unlearn"]

    @property
    def out(self) -> Path:
        return Path(self.raw["out"])

    # -- provenance -------------------------------------------------------

    def hash(self) -> str:
        """sha256 of the canonical JSON of everything except the output directory."""
        body = {k: v for k, v in self.raw.items() if k != "out"}
        return hashlib.sha256(_canonical(body).encode()).hexdigest()

    def stage_hash(self, stage: str) -> str:
        parts = {}
        for path in STAGE_SECTIONS[stage]:
            node = self.raw
            for key in path.split("."):
                node = node[key]
            parts[path] = node
        return hashlib.sha256(_canonical(parts).encode()).hexdigest()

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True) + "\n"


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(data)
