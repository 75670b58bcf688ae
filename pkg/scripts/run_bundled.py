"""Generate the bundled sequence (if needed), run the whole pipeline and print the headline numbers."""

import argparse
import json
import time
from pathlib import Path

from madl.config import parse_config
from madl.pipeline import run_pipeline
from madl.synthetic import bundled_sequence_spec, write_sequence


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data", type=Path, default=Path("bundled_seq"))
    ap.add_argument("--out", type=Path, default=Path("bundled_out"))
    args = ap.parse_args()
    if not (args.data / "scans").is_dir():
        write_sequence(args.data, bundled_sequence_spec())
    cfg = parse_config(f"[run]\ninput = {args.data.resolve()}\noutput = {args.out.resolve()}\n")
    t0 = time.perf_counter()
    manifest = run_pipeline(cfg)
    seconds = time.perf_counter() - t0
    masks = json.loads((args.out / "report.json").read_text())
    curbs = json.loads((args.out / "curb_report.json").read_text())
    print(json.dumps({
        "seconds": round(seconds, 2),
        "stage_seconds": {k: round(v, 2) for k, v in manifest.timings.items()},
        "frames": manifest.counts(),
        "mask_macro": masks["macro"],
        "mask_micro": masks["micro"],
        "curb_micro": curbs["micro"],
    }, indent=2))


if __name__ == "__main__":
    main()
