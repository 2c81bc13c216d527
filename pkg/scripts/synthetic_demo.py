"""Build the quadrant-detector fixture and run every pipeline stage on it.

    python scripts/synthetic_demo.py /tmp/demo

Artifacts land in <dir>/artifacts; the Ms-IV overlays are in artifacts/msiv.
"""

import argparse
import json
import sys
from pathlib import Path

from concept_scope import pipeline, toymodels


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("directory", type=Path)
    p.add_argument("--metric", choices=("caoc", "kendall", "pd"), default="caoc")
    p.add_argument("--delta", type=float, default=0.9)
    args = p.parse_args(argv)

    fx = toymodels.quadrant_fixture(args.directory)
    cfg, base = pipeline.load_config(
        fx["config"],
        {"cache_dir": str(args.directory / "cache"), "msiv": {"metric": args.metric, "delta": args.delta}},
    )
    summary = pipeline.run_pipeline(cfg, base)
    print(json.dumps(summary["stages"]["eval"]["faithfulness"], indent=2, default=str)[:800])
    print("telemetry:", summary["telemetry"])
    print("artifacts:", base / cfg["out_dir"])
    return 0


if __name__ == "__main__":
    sys.exit(main())
