"""Stage orchestration: extract -> cluster -> rank -> msiv -> eval.

All parameters live in one JSON config (``SCHEMA_VERSION``); every artifact
records the hash of the config section that produced it. Inference goes
through the on-disk cache, so re-running an unchanged pipeline performs no
forward passes and rewrites no file.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from . import clustering, evalmetrics, mage, msiv, ranking
from .backend import ModelBundle, load_model_bundle
from .cache import ArrayCache, CachedModel
from .io import atomic_write_text, config_hash, read_matrix_csv, write_json, write_matrix_csv
from .manifest import Manifest, ingest_manifest

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STAGES = ("extract", "cluster", "rank", "msiv", "eval")

DEFAULTS: dict[str, Any] = {
    "schema": SCHEMA_VERSION,
    "model": None,
    "manifest": None,
    "out_dir": "artifacts",
    "cache_dir": None,
    "use_cache": True,
    "seed": 0,
    "stages": ["extract", "cluster"],
    "extract": {"s_p": None, "t": 5, "mode": "restrict"},
    "cluster": {"k": "auto", "k_min": 2, "k_max": 25},
    "rank": {"classes": None, "concepts": "all"},
    "msiv": {
        "images": {"top": 1},
        "concepts": "all",
        "class": None,
        "delta": 0.9,
        "min_patch": None,
        "metric": "caoc",
    },
    "eval": {"quantile": 0.5, "parts": None, "bboxes": None},
}


# settings that change how results are computed, never what they are
EXECUTION_KEYS = ("cache_dir", "use_cache")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def merge_config(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge_config(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> tuple[dict, Path]:
    """Defaults <- config file <- overrides. Relative paths resolve against the config file."""
    cfg = copy.deepcopy(DEFAULTS)
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        data = json.loads(path.read_text())
        if data.get("schema", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ValueError(f"unsupported config schema {data.get('schema')}; expected {SCHEMA_VERSION}")
        cfg = merge_config(cfg, data)
        base = path.parent.resolve()
    if overrides:
        cfg = merge_config(cfg, overrides)
    return cfg, base


@dataclass
class Context:
    bundle: ModelBundle
    model: CachedModel
    manifest: Manifest
    out_dir: Path
    partition_file: Path | None = None

    @property
    def partition_path(self) -> Path:
        return self.partition_file or self.out_dir / "partition.json"

    @classmethod
    def create(cls, model_path, manifest_path, out_dir, cache_dir=None, use_cache: bool = True, partition=None) -> "Context":
        bundle = load_model_bundle(model_path)
        manifest = ingest_manifest(manifest_path, bundle.class_names)
        cache = ArrayCache(cache_dir) if use_cache else None
        return cls(bundle, CachedModel(bundle, cache), manifest, Path(out_dir), None if partition is None else Path(partition))

    def image(self, index: int) -> np.ndarray:
        return self.manifest.load(index, self.bundle.input_size)

    def loaders(self, indices) -> list:
        return [self.manifest.loader(i, self.bundle.input_size) for i in indices]

    def keys(self, indices) -> list:
        return [self.manifest.key(i) for i in indices]


def _resolve(base: Path, p) -> Path | None:
    if p is None:
        return None
    p = Path(p)
    return p if p.is_absolute() else base / p


# -- stages -----------------------------------------------------------------

def stage_extract(ctx: Context, cfg: dict) -> dict:
    size = ctx.bundle.input_size
    s_p = cfg["s_p"] or size // 8
    config = mage.MageConfig(int(s_p), int(cfg["t"]), cfg["mode"])
    idx = range(len(ctx.manifest))
    reps = mage.build_representatives(ctx.model, ctx.loaders(idx), config, ctx.keys(idx))
    side = mage.sidecar(config, ctx.manifest.hash, len(ctx.manifest))
    side["config_hash"] = config_hash({"extract": cfg, "model": ctx.bundle.digest, "manifest": ctx.manifest.hash})
    path, _ = mage.write_representatives(ctx.out_dir / "representatives.csv", reps, side)
    return {"representatives": str(path), "dim": len(reps[0])}


def stage_cluster(out_dir: Path, cfg: dict, seed: int) -> dict:
    out_dir = Path(out_dir)
    reps, side = mage.read_representatives(out_dir / "representatives.csv")
    X = mage.representative_matrix(reps)
    n = len(X)
    k = cfg["k"]
    sweep_info = None
    if k == "auto":
        hi = min(int(cfg["k_max"]), n)  # k_max is exclusive
        k_range = list(range(int(cfg["k_min"]), hi))
        parts = clustering.sweep(X, k_range, seed)
        k = clustering.elbow_select({kk: p.inertia for kk, p in parts.items()}, k_range)
        part = parts[k]
        sweep_info = {str(kk): {"inertia": p.inertia, "silhouette": p.silhouette} for kk, p in parts.items()}
    else:
        part = clustering.kmeans(X, int(k), seed)
        part.silhouette = _safe_silhouette(X, part)
    ref = side.get("config_hash", "")
    path = clustering.write_partition(out_dir / "partition.json", part, ref)
    if sweep_info is not None:
        write_json(out_dir / "k_sweep.json", {"config_ref": ref, "selected_k": k, "sweep": sweep_info})
    return {"partition": str(path), "k": int(k)}


def _safe_silhouette(X, part):
    try:
        return clustering.silhouette(X, part.labels)
    except ValueError:
        return None


def concept_channels(ctx: Context, concept) -> list[int] | None:
    if concept in (None, "all"):
        return None
    clusters = clustering.read_partition(ctx.partition_path)
    concept = int(concept)
    if concept not in clusters:
        raise KeyError(f"unknown cluster id {concept}")
    return clusters[concept]


def _concept_list(ctx: Context, selector) -> list:
    if selector == "all":
        return ["all"]
    if selector == "clusters":
        return sorted(clustering.read_partition(ctx.partition_path))
    return list(selector) if isinstance(selector, list) else [selector]


def class_space(ctx: Context, class_index: int, concept) -> tuple[ranking.ConceptOutputSpace, list[int]]:
    label = ctx.bundle.class_names[class_index]
    idx = ctx.manifest.indices_with_label(label)
    if not idx:
        raise ValueError(f"no manifest image of class {label!r}")
    space = ranking.build_concept_space(
        ctx.model, ctx.loaders(idx), idx, class_index, concept, concept_channels(ctx, concept), ctx.keys(idx)
    )
    return space, idx


def stage_rank(ctx: Context, cfg: dict) -> dict:
    classes = cfg["classes"] or list(ctx.bundle.class_names)
    written = []
    for name in classes:
        c = ctx.bundle.class_index(name)
        for concept in _concept_list(ctx, cfg["concepts"]):
            space, _ = class_space(ctx, c, concept)
            space.image_ids = [ctx.manifest.entries[i].path for i in space.image_ids]
            seq = ranking.rank(space, c)
            written.append(str(ranking.export_ranking(ctx.out_dir / "rankings" / f"class{c}_concept{concept}.json", space, seq)))
    return {"rankings": written}


def run_msiv_one(
    ctx: Context,
    index: int,
    class_index: int,
    concept,
    config: msiv.MsivConfig,
    png: Path,
    csv_path: Path,
    meta_path: Path,
    cfg_ref: str = "",
) -> dict:
    """Ms-IV for one manifest image; writes overlay PNG, raw CSV and run JSON."""
    space, idx = class_space(ctx, class_index, concept)
    if index not in idx:
        raise ValueError(
            f"image {ctx.manifest.entries[index].path} is not in the class "
            f"{ctx.bundle.class_names[class_index]!r} comparison set"
        )
    image = ctx.image(index)
    result = msiv.msiv_run(
        ctx.model, space, index, image, config, concept_channels(ctx, concept), key=ctx.manifest.key(index)
    )
    overlay, empty = msiv.render_overlay(image, result.importance)
    msiv.save_png(png, overlay)
    write_matrix_csv(csv_path, result.importance)
    meta = msiv.run_metadata(
        result, config, ctx.bundle.input_size,
        image_key=ctx.manifest.entries[index].path,
        manifest_index=index,
        manifest_hash=ctx.manifest.hash,
        class_index=class_index,
        class_name=ctx.bundle.class_names[class_index],
        concept=concept,
        comparison_set_size=len(idx),
        empty_explanation=empty,
        config_hash=cfg_ref,
    )
    write_json(meta_path, meta)
    return {"overlay": str(png), "raw": str(csv_path), "meta": str(meta_path)}


def stage_msiv(ctx: Context, cfg: dict) -> dict:
    config = msiv.MsivConfig(float(cfg["delta"]), cfg["min_patch"], cfg["metric"])
    ref = config_hash({"msiv": cfg, "model": ctx.bundle.digest, "manifest": ctx.manifest.hash})
    outputs = []
    for concept in _concept_list(ctx, cfg["concepts"]):
        for index in _msiv_images(ctx, cfg["images"], concept):
            label = cfg["class"] or ctx.manifest.entries[index].label
            c = ctx.bundle.class_index(label)
            prefix = ctx.out_dir / "msiv" / f"img{index:05d}__c{c}__k{concept}"
            outputs.append(run_msiv_one(
                ctx, index, c, concept, config,
                prefix.with_suffix(".png"), prefix.with_suffix(".csv"), prefix.with_suffix(".json"), ref,
            ))
    return {"msiv": outputs}


def _msiv_images(ctx: Context, selector, concept) -> list[int]:
    if isinstance(selector, dict) and "top" in selector:
        idx = list(range(len(ctx.manifest)))
        l1 = ranking.channel_l1(ctx.model, ctx.loaders(idx), ctx.keys(idx))
        channels = concept_channels(ctx, concept)
        channels = list(range(ctx.bundle.num_channels)) if channels is None else channels
        return ranking.top_activated_images(l1, channels, min(int(selector["top"]), len(idx)))
    return [ctx.manifest.find(p) for p in selector]


def _importance_runs(importance_dir: Path) -> list[tuple[dict, np.ndarray]]:
    runs = []
    for meta_path in sorted(Path(importance_dir).glob("*.json")):
        meta = json.loads(meta_path.read_text())
        if "image_key" not in meta:
            continue
        runs.append((meta, read_matrix_csv(meta_path.with_suffix(".csv"))))
    if not runs:
        raise ValueError(f"no importance runs found in {importance_dir}")
    return runs


def eval_faithfulness(ctx: Context, importance_dir: Path, quantile: float, out: Path) -> dict:
    images, masks, classes, keys, cache_keys, skipped = [], [], [], [], [], []
    for meta, m in _importance_runs(importance_dir):
        idx = ctx.manifest.find(meta["image_key"])
        try:
            mask = evalmetrics.mask_from_importance(m, ctx.bundle.input_size, quantile)
        except evalmetrics.EmptyExplanationError:
            skipped.append(meta["image_key"])
            continue
        images.append(ctx.image(idx))
        masks.append(mask)
        classes.append(int(meta["class_index"]))
        keys.append(meta["image_key"])
        cache_keys.append(ctx.manifest.key(idx))
    report = evalmetrics.faithfulness(ctx.model, images, masks, classes, cache_keys)
    data = report.to_json()
    for row, key in zip(data["per_image"], keys):
        row["image"] = key
    data.update({"quantile": quantile, "skipped_empty": skipped})
    write_json(out, data)
    return data


def eval_localization(importance_dir: Path, parts_csv: Path, bboxes_csv: Path, out: Path) -> dict:
    ann = evalmetrics.read_part_annotations(parts_csv, bboxes_csv)
    per_image = []
    by_concept: dict[str, list[str]] = {}
    for meta, m in _importance_runs(importance_dir):
        key = meta["image_key"]
        if key not in ann:
            continue
        a, (w, h) = ann[key]
        size = int(meta["image_size"])
        try:
            label = evalmetrics.localize(m, a.scaled(size / w, size / h), size)
        except (evalmetrics.EmptyExplanationError, ValueError):
            label = None
        per_image.append({"image": key, "concept": str(meta.get("concept")), "label": label})
        if label is not None:
            by_concept.setdefault(str(meta.get("concept")), []).append(label)
    data = {
        "per_image": per_image,
        "concepts": {k: evalmetrics.concept_consistency(v) for k, v in sorted(by_concept.items())},
    }
    write_json(out, data)
    return data


def export_vectors(out_dir: Path, dest: Path) -> Path:
    """Representatives with their cluster label, for external plotting."""
    reps, _ = mage.read_representatives(out_dir / "representatives.csv")
    clusters = clustering.read_partition(out_dir / "partition.json")
    label = {ch: j for j, chans in clusters.items() for ch in chans}
    dim = len(reps[0])
    lines = [",".join(["nf", "cluster"] + [f"c{i}" for i in range(dim)])]
    for r in reps:
        lines.append(",".join([str(r.channel), str(label[r.channel])] + [str(int(v)) for v in r.coords]))
    return atomic_write_text(dest, "\n".join(lines) + "\n")


def run_pipeline(config: dict, base_dir: str | Path = ".") -> dict:
    """Execute the configured stages in order; returns produced artifacts and telemetry."""
    base = Path(base_dir)
    if config.get("schema", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ValueError(f"unsupported config schema {config.get('schema')}")
    unknown = [s for s in config["stages"] if s not in STAGES]
    if unknown:
        raise ValueError(f"unknown stages {unknown}")
    ctx = Context.create(
        _resolve(base, config["model"]),
        _resolve(base, config["manifest"]),
        _resolve(base, config["out_dir"]),
        _resolve(base, config.get("cache_dir")),
        use_cache=bool(config.get("use_cache", True)),
    )
    ctx.out_dir.mkdir(parents=True, exist_ok=True)
    recorded = {k: v for k, v in config.items() if k not in EXECUTION_KEYS}
    summary: dict[str, Any] = {"config_hash": config_hash(recorded), "stages": {}}
    for stage in STAGES:
        if stage not in config["stages"]:
            continue
        log.info("stage %s", stage)
        try:
            if stage == "extract":
                res = stage_extract(ctx, config["extract"])
            elif stage == "cluster":
                res = stage_cluster(ctx.out_dir, config["cluster"], int(config["seed"]))
            elif stage == "rank":
                res = stage_rank(ctx, config["rank"])
            elif stage == "msiv":
                res = stage_msiv(ctx, config["msiv"])
            else:
                ev = config["eval"]
                res = {"faithfulness": eval_faithfulness(ctx, ctx.out_dir / "msiv", float(ev["quantile"]), ctx.out_dir / "eval" / "faithfulness.json")}
                if ev.get("parts") and ev.get("bboxes"):
                    res["localization"] = eval_localization(
                        ctx.out_dir / "msiv", _resolve(base, ev["parts"]), _resolve(base, ev["bboxes"]),
                        ctx.out_dir / "eval" / "localization.json",
                    )
        except Exception as exc:
            raise StageError(stage, exc) from exc
        summary["stages"][stage] = res
    write_json(ctx.out_dir / "pipeline.json", {"config": recorded, "config_hash": summary["config_hash"], "schema": SCHEMA_VERSION})
    summary["telemetry"] = {
        "inference_images": ctx.model.inference_calls,
        "cache_hits": ctx.model.cache.hits if ctx.model.cache else 0,
        "cache_misses": ctx.model.cache.misses if ctx.model.cache else 0,
    }
    return summary
