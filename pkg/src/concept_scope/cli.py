"""Command-line entry point: ``concept-scope <subcommand>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .cache import ArrayCache
from .msiv import DELTA_PRESETS, METRICS, MsivConfig


def _k_arg(v: str):
    return v if v == "auto" else int(v)


def _delta_arg(v: str) -> float:
    d = float(v)
    if not 0 < d <= 1:
        raise argparse.ArgumentTypeError("delta must lie in (0, 1]")
    return d


def _concept_arg(v: str):
    return v if v in ("all", "clusters") else int(v)


def _common(p: argparse.ArgumentParser, model: bool = True):
    p.add_argument("--config", type=Path, help="JSON pipeline config; flags override its fields")
    if model:
        p.add_argument("--model", type=Path, help="model descriptor JSON")
        p.add_argument("--manifest", type=Path, help="dataset manifest (CSV path,label or JSON)")
    p.add_argument("--out-dir", type=Path)
    p.add_argument("--cache-dir", type=Path, help="overrides $CONCEPT_SCOPE_CACHE_DIR")
    p.add_argument("--no-cache", action="store_true", help="bypass the inference cache")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="concept-scope", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the configured pipeline stages")
    _common(p)
    p.add_argument("--stages", nargs="+", choices=pipeline.STAGES)

    p = sub.add_parser("extract", help="build channel representatives")
    _common(p)
    p.add_argument("--patch-size", type=int, dest="s_p")
    p.add_argument("--t", type=int)
    p.add_argument("--mode", choices=("restrict", "patch-forward"))

    p = sub.add_parser("cluster", help="cluster representatives into concepts")
    _common(p, model=False)
    p.add_argument("--k", type=_k_arg, help="number of clusters or 'auto' (elbow)")
    p.add_argument("--k-min", type=int)
    p.add_argument("--k-max", type=int, help="exclusive upper bound for the elbow sweep")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("rank", help="export class rankings of concept output spaces")
    _common(p)
    p.add_argument("--class", dest="classes", action="append", help="class name (repeatable)")
    p.add_argument("--concept", type=_concept_arg, help="cluster id, 'all' or 'clusters'")
    p.add_argument("--partition", type=Path)

    p = sub.add_parser("msiv", help="multiscale importance map of one image")
    _common(p)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--class", dest="class_name", help="defaults to the image's manifest label")
    p.add_argument("--concept", type=_concept_arg, default="all")
    p.add_argument("--partition", type=Path)
    p.add_argument("--delta", type=_delta_arg, default=0.9, help=f"presets: {', '.join(map(str, DELTA_PRESETS))}")
    p.add_argument("--min-patch", type=int)
    p.add_argument("--metric", choices=METRICS, default="caoc")
    p.add_argument("--out", type=Path, required=True, help="overlay PNG")
    p.add_argument("--raw", type=Path, required=True, help="importance CSV")
    p.add_argument("--meta", type=Path, required=True, help="run JSON")

    p = sub.add_parser("eval", help="evaluation harnesses")
    esub = p.add_subparsers(dest="eval_command", required=True)
    e = esub.add_parser("faithfulness")
    _common(e)
    e.add_argument("--importance-dir", type=Path, required=True)
    e.add_argument("--quantile", type=float, default=0.5)
    e.add_argument("--out", type=Path, required=True)
    e = esub.add_parser("localization")
    e.add_argument("--importance-dir", type=Path, required=True)
    e.add_argument("--parts", type=Path, required=True)
    e.add_argument("--bboxes", type=Path, required=True)
    e.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("export", help="representatives + cluster labels as one CSV")
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--dest", type=Path)

    p = sub.add_parser("cache", help="cache maintenance")
    csub = p.add_subparsers(dest="cache_command", required=True)
    c = csub.add_parser("clear")
    c.add_argument("--cache-dir", type=Path)
    return parser


def _config(args) -> tuple[dict, Path]:
    cfg, base = pipeline.load_config(getattr(args, "config", None))
    for name in ("model", "manifest", "out_dir", "cache_dir"):
        v = getattr(args, name, None)
        if v is not None:
            cfg[name] = str(v.resolve())
    if getattr(args, "no_cache", False):
        cfg["use_cache"] = False
    return cfg, base


def _context(cfg: dict, base: Path, partition=None) -> pipeline.Context:
    if not cfg.get("model") or not cfg.get("manifest"):
        raise SystemExit("error: --model and --manifest are required (flag or config)")
    r = pipeline._resolve
    return pipeline.Context.create(
        r(base, cfg["model"]), r(base, cfg["manifest"]), r(base, cfg["out_dir"]), r(base, cfg.get("cache_dir")),
        use_cache=cfg["use_cache"], partition=partition,
    )


def _set(section: dict, **values):
    section.update({k: v for k, v in values.items() if v is not None})


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except (pipeline.StageError, ValueError, KeyError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    cmd = args.command
    if cmd == "cache":
        n = ArrayCache(args.cache_dir).clear()
        print(f"removed {n} cache entries")
        return 0
    if cmd == "export":
        dest = args.dest or args.out_dir / "vectors.csv"
        print(pipeline.export_vectors(args.out_dir, dest))
        return 0
    if cmd == "eval" and args.eval_command == "localization":
        data = pipeline.eval_localization(args.importance_dir, args.parts, args.bboxes, args.out)
        print(json.dumps(data["concepts"], indent=2))
        return 0

    cfg, base = _config(args)
    if cmd == "run":
        if args.stages:
            cfg["stages"] = args.stages
        summary = pipeline.run_pipeline(cfg, base)
        print(json.dumps(summary, indent=2, default=str))
        return 0
    if cmd == "cluster":
        _set(cfg["cluster"], k=args.k, k_min=args.k_min, k_max=args.k_max)
        seed = cfg["seed"] if args.seed is None else args.seed
        print(json.dumps(pipeline.stage_cluster(pipeline._resolve(base, cfg["out_dir"]), cfg["cluster"], seed)))
        return 0

    ctx = _context(cfg, base, getattr(args, "partition", None))
    if cmd == "extract":
        _set(cfg["extract"], s_p=args.s_p, t=args.t, mode=args.mode)
        print(json.dumps(pipeline.stage_extract(ctx, cfg["extract"])))
    elif cmd == "rank":
        _set(cfg["rank"], classes=args.classes, concepts=args.concept)
        print(json.dumps(pipeline.stage_rank(ctx, cfg["rank"]), indent=2))
    elif cmd == "msiv":
        index = ctx.manifest.find(args.image)
        label = args.class_name or ctx.manifest.entries[index].label
        config = MsivConfig(args.delta, args.min_patch, args.metric)
        out = pipeline.run_msiv_one(
            ctx, index, ctx.bundle.class_index(label), args.concept, config, args.out, args.raw, args.meta
        )
        print(json.dumps(out, indent=2))
    elif cmd == "eval":
        data = pipeline.eval_faithfulness(ctx, args.importance_dir, args.quantile, args.out)
        print(json.dumps({k: v for k, v in data.items() if k != "per_image"}, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
