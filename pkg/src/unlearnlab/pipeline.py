"""Pipeline stages over an output directory. Each stage reads and writes fixed artifact names.

Artifacts carry the producing config hash and a stage hash covering just the
config sections they depend on; loading checks the stage hash against the
current config and the parameter fingerprints against each other.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from . import container
from .config import RunConfig
from .data import DatasetSplit, Pools, generate, load_dataset, make_split, save_dataset
from .evalbench import gapratio
from .evalbench.similarity import concept_similarity
from .evalbench.sweep import lambda_sweep
from .evalbench.zeroshot import search_evaluator, zero_shot_eval
from .model import DualEncoder, load_checkpoint, read_checkpoint_meta, save_checkpoint
from .objectives import GradientSnapshot, snapshot, train_contrastive
from .selection import SelectionStrategy, layer_metrics, metrics_csv, pareto_front, select
from .unlearn import UnlearnDelta, apply_delta, baseline_run, joint_unlearn, slug_from_snapshot

log = logging.getLogger(__name__)

FILES = {
    "dataset": "dataset.data",
    "checkpoint": "model.ckpt",
    "snapshot": "snapshot.snap",
    "metrics": "metrics.csv",
    "selection": "selection.json",
    "delta": "delta.delta",
    "search": "search.csv",
    "unlearned": "unlearned.ckpt",
    "joint": "joint.json",
    "baselines": "baselines.json",
    "report": "report.json",
    "timing": "timing.json",
    "similarity": "similarity.csv",
    "sweep": "sweep.csv",
    "gapratio_json": "gapratio.json",
    "gapratio_csv": "gapratio.csv",
    "summary": "summary.json",
    "config": "config.json",
}


class ProvenanceError(RuntimeError):
    """An input artifact was produced under a different config or from different parameters."""


def _path(cfg: RunConfig, key: str) -> Path:
    return cfg.out / FILES[key]


def _stamp(cfg: RunConfig, stage: str) -> dict:
    return {"config_hash": cfg.hash(), "stage": stage, "stage_hash": cfg.stage_hash(stage)}


def _check_stamp(cfg: RunConfig, meta: dict, stage: str, path: Path) -> None:
    if meta.get("stage_hash") != cfg.stage_hash(stage):
        raise ProvenanceError(f"{path} was produced under a different configuration ({stage} settings differ)")


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_text(path: Path, text: str) -> None:
    path.write_text(text)


def prepare_out(cfg: RunConfig) -> None:
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_text(_path(cfg, "config"), cfg.to_json())


# -- loaders with provenance checks ---------------------------------------------


def load_pools(cfg: RunConfig) -> Pools:
    path = _path(cfg, "dataset")
    meta, _ = container.read(path, "dataset")
    _check_stamp(cfg, meta, "dataset", path)
    return load_dataset(path)


def load_model(cfg: RunConfig) -> DualEncoder:
    path = _path(cfg, "checkpoint")
    _check_stamp(cfg, read_checkpoint_meta(path), "checkpoint", path)
    return load_checkpoint(path)


def load_snapshot(cfg: RunConfig, model: DualEncoder) -> GradientSnapshot:
    path = _path(cfg, "snapshot")
    meta, _ = container.read(path, "snapshot")
    _check_stamp(cfg, meta, "snapshot", path)
    snap = GradientSnapshot.load(path)
    if snap.fingerprint != model.fingerprint():
        raise ProvenanceError(f"{path} was computed from different parameters than {_path(cfg, 'checkpoint')}")
    return snap


def load_delta(cfg: RunConfig, model: DualEncoder) -> UnlearnDelta:
    path = _path(cfg, "delta")
    meta, _ = container.read(path, "delta")
    _check_stamp(cfg, meta, "delta", path)
    delta = UnlearnDelta.load(path)
    if delta.fingerprint != model.fingerprint():
        raise ProvenanceError(f"{path} was computed from different parameters than {_path(cfg, 'checkpoint')}")
    return delta


def split_for(cfg: RunConfig, pools: Pools, concepts=None) -> DatasetSplit:
    concepts = cfg.unlearn["concepts"] if concepts is None else concepts
    return make_split(pools, concepts, cfg.unlearn["val_fraction"], cfg.stage_seed("split"))


def strategy_for(cfg: RunConfig) -> SelectionStrategy:
    u = cfg.unlearn
    return SelectionStrategy(u["strategy"], u["top_fraction"], cfg.stage_seed("strategy"))


# -- stages ------------------------------------------------------------------------


def stage_gen_data(cfg: RunConfig) -> Pools:
    pools = generate(cfg.concept_spec())
    save_dataset(pools, _path(cfg, "dataset"), _stamp(cfg, "dataset"))
    return pools


def stage_train(cfg: RunConfig) -> DualEncoder:
    pools = load_pools(cfg)
    p = cfg.raw["pretrain"]
    model = DualEncoder.init(cfg.architecture(), cfg.stage_seed("init"))
    model = train_contrastive(model, pools.train, p["lr"], p["epochs"])
    train_acc = zero_shot_eval(model, pools.train, pools.text_prototypes, []).ta1
    save_checkpoint(model, _path(cfg, "checkpoint"), {**_stamp(cfg, "checkpoint"), "train_accuracy": train_acc})
    log.info("pretrained: zero-shot train accuracy %.4f", train_acc)
    return model


def stage_grad(cfg: RunConfig) -> GradientSnapshot:
    pools, model = load_pools(cfg), load_model(cfg)
    split = split_for(cfg, pools)
    snap = snapshot(model, split.forget, split.retain)
    snap.save(_path(cfg, "snapshot"), _stamp(cfg, "snapshot"))
    return snap


def stage_select(cfg: RunConfig) -> dict:
    model = load_model(cfg)
    snap = load_snapshot(cfg, model)
    table = layer_metrics(snap, model)
    front = pareto_front(table.metrics)
    selection = select(strategy_for(cfg), table.metrics, snap)
    write_text(_path(cfg, "metrics"), metrics_csv(table.metrics))
    out = {
        "config_hash": cfg.hash(),
        "pareto_front": front.names,
        "degenerate": [l.name for l in table.degenerate],
        "strategy": selection.kind,
        "selected": list(selection.layers),
        "joint": selection.joint,
    }
    write_json(_path(cfg, "selection"), out)
    return out


def _search_csv(result) -> str:
    lines = []
    for k, cand in enumerate(result.diagnostics.candidates):
        body = cand.trace.to_csv().splitlines()
        if k == 0:
            lines.append("layers," + body[0])
        lines += ["+".join(cand.layers) + "," + row for row in body[1:]]
    return "\n".join(lines) + "\n"


def stage_unlearn(cfg: RunConfig):
    pools, model = load_pools(cfg), load_model(cfg)
    snap = load_snapshot(cfg, model)
    split = split_for(cfg, pools)
    evaluator = search_evaluator(split, topk=cfg.unlearn["topk"])
    result = slug_from_snapshot(model, snap, evaluator, cfg.unlearn["steps"], strategy_for(cfg), split.targets)
    result.delta.save(_path(cfg, "delta"), _stamp(cfg, "delta"))
    write_text(_path(cfg, "search"), _search_csv(result))
    save_checkpoint(result.model, _path(cfg, "unlearned"), _stamp(cfg, "delta"))
    return result


def stage_joint(cfg: RunConfig):
    pools, model = load_pools(cfg), load_model(cfg)
    split = split_for(cfg, pools)
    concepts = list(split.targets)
    sets = [split.forget.where(split.forget.labels == c) for c in concepts]
    evaluators = [search_evaluator(split, [c], cfg.unlearn["topk"]) for c in concepts]
    result = joint_unlearn(model, sets, split.retain, evaluators, cfg.unlearn["steps"], concepts)
    for c, delta in zip(concepts, result.deltas):
        delta.save(cfg.out / f"joint_{c}.delta", _stamp(cfg, "delta"))
    before = zero_shot_eval(model, split.test, split.prototypes, concepts)
    after = zero_shot_eval(result.model, split.test, split.prototypes, concepts)
    out = {
        "config_hash": cfg.hash(),
        "concepts": concepts,
        "edits": [{"concept": c, "layers": list(d.layers), "lambda": d.lam} for c, d in zip(concepts, result.deltas)],
        "original": before.to_dict(),
        "unlearned": after.to_dict(),
        "changed_layers": sorted({n for d in result.deltas for n in d.layers}),
    }
    write_json(_path(cfg, "joint"), out)
    return result, out


def stage_baseline(cfg: RunConfig) -> dict:
    pools, model = load_pools(cfg), load_model(cfg)
    split = split_for(cfg, pools)
    rows = []
    for bc in cfg.baselines():
        edited = baseline_run(model, bc, split.forget, split.retain)
        r = zero_shot_eval(edited, split.test, split.prototypes, split.targets)
        rows.append({"method": bc.method, "lr": bc.lr, "iterations": bc.iterations, "report": r.to_dict()})
    out = {"config_hash": cfg.hash(), "concepts": list(split.targets), "baselines": rows}
    write_json(_path(cfg, "baselines"), out)
    return out


def stage_eval(cfg: RunConfig) -> dict:
    pools, model = load_pools(cfg), load_model(cfg)
    split = split_for(cfg, pools)
    before = zero_shot_eval(model, split.test, split.prototypes, split.targets)
    out = {"config_hash": cfg.hash(), "concepts": list(split.targets), "original": before.to_dict()}
    timing = {"original_seconds": before.seconds}
    sim = concept_similarity(model, split.test, split.prototypes)
    if _path(cfg, "delta").exists():
        delta = load_delta(cfg, model)
        edited = apply_delta(model, delta, strict=True)
        after = zero_shot_eval(edited, split.test, split.prototypes, split.targets)
        out["unlearned"] = after.to_dict()
        out["edit"] = {"layers": list(delta.layers), "lambda": delta.lam}
        timing["unlearned_seconds"] = after.seconds
        sim = concept_similarity(edited, split.test, split.prototypes)
    write_json(_path(cfg, "report"), out)
    write_json(_path(cfg, "timing"), timing)
    write_text(_path(cfg, "similarity"), sim.to_csv())
    return out


def stage_sweep(cfg: RunConfig):
    pools, model = load_pools(cfg), load_model(cfg)
    delta = load_delta(cfg, model)
    split = split_for(cfg, pools)
    evaluator = search_evaluator(split, topk=cfg.unlearn["topk"])
    result = lambda_sweep(model, delta.direction, cfg.raw["sweep"]["lambda_grid"], evaluator)
    write_text(_path(cfg, "sweep"), result.to_csv())
    return result


def stage_gapratio(cfg: RunConfig, table_path=None):
    if table_path is None:
        table = gapratio.benchmark_table()
    else:
        table = gapratio.load_table(table_path)
        if set(gapratio.BENCHMARK_COMBINE["memory+storage"]) <= set(table.metrics):
            table = table.with_grouping(gapratio.BENCHMARK_COMBINE, gapratio.BENCHMARK_GROUPS)
    report = gapratio.gap_ratio(table)
    write_text(_path(cfg, "gapratio_json"), report.to_json())
    write_text(_path(cfg, "gapratio_csv"), report.to_csv())
    return report


def stage_run(cfg: RunConfig) -> dict:
    stage_gen_data(cfg)
    stage_train(cfg)
    stage_grad(cfg)
    selection = stage_select(cfg)
    stage_unlearn(cfg)
    report = stage_eval(cfg)
    summary = {
        "config_hash": cfg.hash(),
        "train_accuracy": read_checkpoint_meta(_path(cfg, "checkpoint"))["train_accuracy"],
        "pareto_front": selection["pareto_front"],
        **report,
    }
    write_json(_path(cfg, "summary"), summary)
    return summary


def changed_layers(a: DualEncoder, b: DualEncoder) -> list[str]:
    return [n for n in a.layer_names if any(not np.array_equal(x, y) for x, y in zip(a.get_layer(n), b.get_layer(n)))]
