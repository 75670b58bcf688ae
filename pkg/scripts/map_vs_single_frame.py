"""Compare map-derived masks against masks from a single scan's drivable points, frame by frame.

Expects the output directory of a full pipeline run (see run_bundled.py).
"""

import argparse
from pathlib import Path

import numpy as np

from madl.config import parse_config
from madl.geometry import Label, load_poses
from madl.labels import mask_from_points, read_label_file, read_mask_png
from madl.mapping import load_map, query_region
from madl.pipeline import open_sequence


def iou(p, t):
    return (p & t).sum() / max((p | t).sum(), 1)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data", type=Path, default=Path("bundled_seq"))
    ap.add_argument("--out", type=Path, default=Path("bundled_out"))
    args = ap.parse_args()
    cfg = parse_config(f"[run]\ninput = {args.data.resolve()}\noutput = {args.out.resolve()}\n")
    seq = open_sequence(cfg)
    m = load_map(args.out / "map.ply")
    poses = load_poses(args.out / "poses_refined.txt")
    print("frame  ahead_m  map_iou  single_iou")
    for fid in seq.frame_ids:
        name = f"{fid:06d}"
        q = query_region(m, poses[fid], cfg.mapping.query_radius, {Label.DRIVABLE})
        ahead = q.xyz[q.xyz[:, 0] > 0]
        extent = np.hypot(ahead[:, 0], ahead[:, 1]).max() if len(ahead) else 0.0
        truth = read_mask_png(seq.root / "truth_masks" / f"{name}.png").positive
        path = args.out / "masks" / f"{name}.png"
        if not path.exists():
            path = args.out / "quarantine" / "masks" / f"{name}.png"
        mapped = iou(read_mask_png(path).positive, truth) if path.exists() else float("nan")
        labels = read_label_file(args.out / "detections" / f"{name}.label")
        single = mask_from_points(seq.load_scan(fid).xyz[labels == Label.DRIVABLE], *seq.calib)
        print(f"{fid:5d}  {extent:7.1f}  {mapped:7.3f}  {iou(single.positive, truth):10.3f}")


if __name__ == "__main__":
    main()
