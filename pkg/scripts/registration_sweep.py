"""Perturb the initial pose of a scan against its own curb map and report how often registration recovers."""

import argparse
import math

import numpy as np

from madl.curb import detect_curbs
from madl.geometry import LidarGeometry, PoseSE3, rotation_angle, rotvec_to_matrix
from madl.mapping import build_map, query_region, register_scan
from madl.synthetic import bundled_sequence_spec, generate_scene, simulate_scan


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--trials", type=int, default=300)
    ap.add_argument("--max-shift", type=float, default=0.5, help="metres")
    ap.add_argument("--max-angle", type=float, default=5.0, help="degrees")
    ap.add_argument("--frames", type=int, nargs="+", default=[12, 25, 40])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    truth, geom = generate_scene(bundled_sequence_spec()), LidarGeometry.default()
    maps = []
    for fid in args.frames:
        det = detect_curbs(simulate_scan(truth, truth.poses[fid], geom, frame_id=fid), geom)
        m = build_map([(det.cloud, PoseSE3.identity())], 0.2)
        maps.append((m, query_region(m, PoseSE3.identity(), np.inf)))

    rng = np.random.default_rng(args.seed)
    errs, iters, monotone = [], [], 0
    for k in range(args.trials):
        m, cells = maps[k % len(maps)]
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        d = rng.normal(size=3)
        init = PoseSE3(rotvec_to_matrix(axis * math.radians(rng.uniform(0, args.max_angle))),
                       d / np.linalg.norm(d) * rng.uniform(0, args.max_shift))
        res = register_scan(cells, m, init)
        errs.append((np.linalg.norm(res.pose.translation), math.degrees(rotation_angle(res.pose.rotation))))
        iters.append(len(res.history))
        monotone += bool(np.all(np.diff(res.history) <= 0))
    errs = np.array(errs)
    ok = (errs[:, 0] <= 0.01) & (errs[:, 1] <= 0.1)
    print(f"recovered {ok.sum()}/{args.trials}, monotone {monotone}/{args.trials}")
    print(f"translation error p50 {np.median(errs[:, 0]):.2e} max {errs[:, 0].max():.2e} m")
    print(f"rotation error p50 {np.median(errs[:, 1]):.2e} max {errs[:, 1].max():.2e} deg")
    print(f"iterations mean {np.mean(iters):.1f} max {max(iters)}")


if __name__ == "__main__":
    main()
