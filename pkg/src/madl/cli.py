"""``madl <subcommand> --config <path> [--frames a..b] [--out <dir>]``.

Exit code 0 on success. On failure a JSON error summary goes to stderr and the
exit code is 2 for configuration/input problems and 1 otherwise.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, PipelineConfig, default_config_text, load_config
from .geometry import MadlError
from . import pipeline as P

STAGES = ("detect", "map", "localize", "label", "review", "eval", "synth", "run")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="madl", description="Map-assisted drivable-area label generation.")
    ap.add_argument("subcommand", choices=STAGES + ("run_pipeline", "default-config"))
    ap.add_argument("--config", help="INI config file")
    ap.add_argument("--frames", help="inclusive frame range a..b")
    ap.add_argument("--out", help="output directory (overrides [run] output; for synth, the sequence root)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _summary(stage: P.StageResult) -> dict:
    return {
        "stage": stage.name,
        "seconds": round(stage.seconds, 3),
        "errors": {P.frame_name(k): v for k, v in sorted(stage.errors.items())},
        "info": stage.info,
    }


def run(args: argparse.Namespace) -> dict:
    if args.subcommand == "default-config":
        sys.stdout.write(default_config_text())
        return {}
    cfg = load_config(args.config) if args.config else PipelineConfig()
    frames = P.parse_frames(args.frames)
    out = Path(args.out) if args.out else None
    if args.subcommand == "synth":
        return _summary(P.stage_synth(cfg, out or cfg.input_dir))
    if args.subcommand in ("run", "run_pipeline"):
        manifest = P.run_pipeline(cfg, frames, out)
        return {"counts": manifest.counts(), "timings": manifest.timings, "config_hash": manifest.config_hash}
    seq = P.open_sequence(cfg, frames)
    out = out or cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    stage = {
        "detect": P.stage_detect,
        "map": P.stage_map,
        "localize": P.stage_localize,
        "label": P.stage_label,
        "review": P.stage_review,
        "eval": P.stage_eval,
    }[args.subcommand]
    return _summary(stage(cfg, seq, out))


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = run(args)
    except (ConfigError, FileNotFoundError) as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc), "subcommand": args.subcommand}, sys.stderr)
        sys.stderr.write("\n")
        return 2
    except (MadlError, OSError, ValueError) as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc), "subcommand": args.subcommand}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    if summary:
        print(json.dumps(summary, indent=1, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
