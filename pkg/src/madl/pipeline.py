"""File-mediated pipeline: detect, map, localize, label, review, eval, synth.

Every stage reads its inputs from the sequence directory and/or the output
tree and writes its results to the output tree, so stages can be rerun one at
a time. ``run_pipeline`` chains them and writes ``manifest.json`` last.

Output tree::

    detections/<id>.json   curb detection per frame
    detections/<id>.label  per-scan-point class (0 other, 1 ground, 2 drivable, 3/4 curb)
    map.ply                semantic map
    poses_refined.txt      localized poses; localize.jsonl diagnostics
    masks/<id>.png  labels/<id>.label  curbs/<id>.json  skipped.jsonl
    review/<id>_{rgb,adi,bev}.png  verdicts.jsonl  retained.json  quarantine/
    report.{json,txt}  curb_report.{json,txt}
    manifest.json
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .config import ConfigError, PipelineConfig
from .curb import detect_curbs, labels_for_scan, load_detection, save_detection
from .evaluation import evaluate_dataset, write_report
from .geometry import (
    Label,
    LabeledCloud,
    LidarGeometry,
    MadlError,
    PoseSE3,
    load_calib,
    load_poses,
    load_scan_bin,
    write_poses,
)
from .labels import generate_frame_labels, read_curb_points, read_label_file, write_label_file
from .mapping import NoOverlapError, build_map, load_map, register_scan, save_map
from .review import build_review_sample, filter_dataset, review_all, write_review_images, write_verdicts
from .synthetic import write_sequence

log = logging.getLogger(__name__)


def frame_name(fid: int) -> str:
    return f"{fid:06d}"


def parse_frames(spec: str | None) -> tuple[int, int] | None:
    """``"a..b"`` (inclusive) or a single index."""
    if spec is None:
        return None
    try:
        if ".." in spec:
            a, b = spec.split("..", 1)
            lo, hi = int(a), int(b)
        else:
            lo = hi = int(spec)
    except ValueError:
        raise ConfigError(f"--frames expects a..b, got {spec!r}") from None
    if lo < 0 or hi < lo:
        raise ConfigError(f"--frames range {spec!r} is empty or negative")
    return lo, hi


# ---------------------------------------------------------------------------
# Sequence access
# ---------------------------------------------------------------------------


@dataclass
class Sequence:
    root: Path
    frame_ids: list[int]
    poses: list[PoseSE3]
    geom: LidarGeometry
    calib: tuple

    def scan_path(self, fid: int) -> Path:
        return self.root / "scans" / f"{frame_name(fid)}.bin"

    def load_scan(self, fid: int) -> LabeledCloud:
        return load_scan_bin(self.scan_path(fid), self.geom, frame_id=fid)

    def image(self, fid: int) -> np.ndarray:
        p = self.root / "images" / f"{frame_name(fid)}.png"
        intr = self.calib[0]
        if p.is_file():
            return np.asarray(Image.open(p).convert("RGB"))
        return np.zeros((intr.height, intr.width, 3), np.uint8)


def load_geometry(root: Path) -> LidarGeometry:
    """Sensor description from ``truth.json`` / ``sensor.json`` if present."""
    for name in ("sensor.json", "truth.json"):
        p = root / name
        if p.is_file():
            meta = json.loads(p.read_text())
            if "ring_elevations" in meta:
                return LidarGeometry(meta["sensor_height"], meta["horizontal_resolution"],
                                     tuple(meta["ring_elevations"]))
    return LidarGeometry.default()


def open_sequence(cfg: PipelineConfig, frames: tuple[int, int] | None = None) -> Sequence:
    """Validate the input tree before anything is written."""
    root = cfg.input_dir
    scans = root / "scans"
    if not scans.is_dir():
        raise ConfigError(f"scans directory {scans} not found")
    ids = sorted(int(p.stem) for p in scans.glob("*.bin") if p.stem.isdigit())
    if not ids:
        raise ConfigError(f"no .bin scans in {scans}")
    for name in ("poses.txt", "calib.txt"):
        if not (root / name).is_file():
            raise ConfigError(f"{root / name} not found")
    poses = load_poses(root / "poses.txt")
    if len(poses) != len(ids) or ids != list(range(len(ids))):
        raise ConfigError(f"{len(ids)} scans (ids {ids[0]}..{ids[-1]}) but {len(poses)} poses")
    calib = load_calib(root / "calib.txt", cfg.projection.image_width, cfg.projection.image_height)
    if frames is not None:
        ids = [i for i in ids if frames[0] <= i <= frames[1]]
        if not ids:
            raise ConfigError(f"no frames in range {frames[0]}..{frames[1]}")
    return Sequence(root, ids, poses, load_geometry(root), calib)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


@dataclass
class StageResult:
    name: str
    seconds: float = 0.0
    errors: dict = field(default_factory=dict)  # frame id -> message
    info: dict = field(default_factory=dict)


def _map_frames(fn, args: list, workers: int):
    """Run ``fn`` over ``args`` in input order, in processes when ``workers > 1``."""
    if workers <= 1 or len(args) <= 1:
        return [fn(a) for a in args]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, args, chunksize=max(1, len(args) // (4 * workers))))


def _detect_one(job) -> tuple[int, str | None]:
    cfg, seq, fid, out = job
    try:
        scan = seq.load_scan(fid)
        det = detect_curbs(scan, seq.geom, cfg.curb_params())
        save_detection(out / "detections" / f"{frame_name(fid)}.json", det)
        write_label_file(out / "detections" / f"{frame_name(fid)}.label", labels_for_scan(det, len(scan)))
        return fid, None
    except (MadlError, ValueError, OSError) as exc:
        return fid, f"{type(exc).__name__}: {exc}"


def stage_detect(cfg: PipelineConfig, seq: Sequence, out: Path) -> StageResult:
    t0 = time.perf_counter()
    (out / "detections").mkdir(parents=True, exist_ok=True)
    res = StageResult("detect")
    for fid, err in _map_frames(_detect_one, [(cfg, seq, f, out) for f in seq.frame_ids], cfg.workers):
        if err:
            res.errors[fid] = err
            log.error("detect frame %d: %s", fid, err)
    res.seconds = time.perf_counter() - t0
    return res


def labeled_frame(seq: Sequence, fid: int, out: Path) -> LabeledCloud | None:
    """The frame's scan carrying its detection labels, or None if not detected."""
    lp = out / "detections" / f"{frame_name(fid)}.label"
    if not lp.is_file():
        return None
    scan = seq.load_scan(fid)
    labels = read_label_file(lp)
    if len(labels) != len(scan):
        raise MadlError(f"{lp}: {len(labels)} labels for {len(scan)} points")
    return scan.with_labels(labels.astype(np.uint8))


def stage_map(cfg: PipelineConfig, seq: Sequence, out: Path) -> StageResult:
    t0 = time.perf_counter()
    res = StageResult("map")
    frames = []
    for fid in seq.frame_ids:
        try:
            cloud = labeled_frame(seq, fid, out)
        except (MadlError, OSError) as exc:
            res.errors[fid] = str(exc)
            continue
        if cloud is None:
            res.errors[fid] = "no detection"
            continue
        frames.append((cloud, seq.poses[fid]))
    m = build_map(frames, cfg.mapping.voxel_size, cfg.mapping.curb_vote_weight)
    save_map(m, out / "map.ply")
    res.info = {"cells": len(m), "frames": len(frames)}
    res.seconds = time.perf_counter() - t0
    return res


def _read_refined(out: Path, seq: Sequence) -> list[PoseSE3]:
    p = out / "poses_refined.txt"
    if p.is_file():
        refined = load_poses(p)
        if len(refined) == len(seq.poses):
            return refined
    return list(seq.poses)


def _localize_one(job):
    cfg, seq, fid, out, semantic_map = job
    try:
        cloud = labeled_frame(seq, fid, out)
        if cloud is None:
            return fid, None, "no detection"
        r = register_scan(cloud, semantic_map, seq.poses[fid], cfg.registration())
        diag = {"frame_id": fid, "rms": round(r.rms_residual, 9), "iterations": r.iterations_used,
                "converged": r.converged, "inlier_fraction": round(r.inlier_fraction, 9)}
        return fid, r.pose, diag
    except (MadlError, ValueError, OSError) as exc:
        return fid, None, f"{type(exc).__name__}: {exc}"


def stage_localize(cfg: PipelineConfig, seq: Sequence, out: Path) -> StageResult:
    """Refine each provided pose against the map; failures keep the provided pose."""
    t0 = time.perf_counter()
    res = StageResult("localize")
    semantic_map = load_map(out / "map.ply")
    if len(semantic_map) == 0:
        raise NoOverlapError("map is empty; nothing to localize against")
    refined = _read_refined(out, seq)
    diags = []
    for fid, pose, diag in _map_frames(_localize_one, [(cfg, seq, f, out, semantic_map) for f in seq.frame_ids],
                                       cfg.workers):
        if pose is None:
            res.errors[fid] = diag
            refined[fid] = seq.poses[fid]
        else:
            refined[fid] = pose
            diags.append(diag)
    write_poses(out / "poses_refined.txt", refined)
    with open(out / "localize.jsonl", "w") as fh:
        for d in diags:
            fh.write(json.dumps(d, sort_keys=True) + "\n")
    res.seconds = time.perf_counter() - t0
    return res


def _label_one(job):
    cfg, seq, fid, out, semantic_map, pose = job
    try:
        scan = seq.load_scan(fid)
        art = generate_frame_labels(fid, pose, semantic_map, seq.calib, cfg.label_params(), scan, out)
        return fid, art.skipped, None
    except (MadlError, ValueError, OSError) as exc:
        return fid, None, f"{type(exc).__name__}: {exc}"


def stage_label(cfg: PipelineConfig, seq: Sequence, out: Path) -> StageResult:
    t0 = time.perf_counter()
    res = StageResult("label")
    semantic_map = load_map(out / "map.ply")
    poses = _read_refined(out, seq)
    skipped = []
    jobs = [(cfg, seq, f, out, semantic_map, poses[f]) for f in seq.frame_ids]
    for fid, skip, err in _map_frames(_label_one, jobs, cfg.workers):
        if err:
            res.errors[fid] = err
        elif skip:
            skipped.append({"frame_id": fid, "reason": skip})
    with open(out / "skipped.jsonl", "w") as fh:
        for s in skipped:
            fh.write(json.dumps(s, sort_keys=True) + "\n")
    res.info = {"skipped": [s["frame_id"] for s in skipped]}
    res.seconds = time.perf_counter() - t0
    return res


def _review_sample(job):
    cfg, seq, fid, out = job
    curbs = read_curb_points(out / "curbs" / f"{frame_name(fid)}.json")
    dp = out / "detections" / f"{frame_name(fid)}.json"
    rms, direction = 0.0, 0.0
    if dp.is_file():
        det = load_detection(dp)
        rms, direction = det.residual_rms, det.road_direction
    r = cfg.review
    sample = build_review_sample(fid, seq.load_scan(fid), curbs, seq.image(fid), seq.calib, rms, direction,
                                 r.adi_resolution, r.bev_resolution, r.extent)
    write_review_images(sample, out / "review")
    return sample


def stage_review(cfg: PipelineConfig, seq: Sequence, out: Path) -> StageResult:
    """Render, judge and filter every frame that has generated labels."""
    t0 = time.perf_counter()
    res = StageResult("review")
    ids = [f for f in seq.frame_ids if (out / "curbs" / f"{frame_name(f)}.json").is_file()]
    samples = _map_frames(_review_sample, [(cfg, seq, f, out) for f in ids], cfg.workers)
    verdicts = review_all(samples, cfg.remote(), cfg.heuristic())
    write_verdicts(out / "verdicts.jsonl", verdicts)
    result = filter_dataset(verdicts, out)
    res.info = {"retained": result.retained, "quarantined": result.quarantined,
                "sources": sorted({v.source for v in verdicts})}
    res.seconds = time.perf_counter() - t0
    return res


def stage_eval(cfg: PipelineConfig, seq: Sequence, out: Path) -> StageResult:
    t0 = time.perf_counter()
    res = StageResult("eval")
    names = [frame_name(f) for f in seq.frame_ids]
    truth_masks = seq.root / "truth_masks"
    if (out / "masks").is_dir() and truth_masks.is_dir() and any((out / "masks").glob("*.png")):
        rep = evaluate_dataset(out / "masks", truth_masks, "mask", frames=names)
        write_report(rep, out, "report")
        res.info["mask_micro"] = rep.micro.as_dict()
    truth_curbs = seq.root / "truth_curbs"
    if (out / "curbs").is_dir() and truth_curbs.is_dir() and any((out / "curbs").glob("*.json")):
        rep = evaluate_dataset(out / "curbs", truth_curbs, "curb", cfg.projection.curb_tolerance, frames=names)
        write_report(rep, out, "curb_report")
        res.info["curb_micro"] = rep.micro.as_dict()
    res.seconds = time.perf_counter() - t0
    return res


def stage_synth(cfg: PipelineConfig, root: Path) -> StageResult:
    t0 = time.perf_counter()
    write_sequence(root, cfg.scene_spec(), noise_sigma=cfg.run.noise_sigma)
    return StageResult("synth", time.perf_counter() - t0, info={"root": str(root)})


# ---------------------------------------------------------------------------
# Whole run
# ---------------------------------------------------------------------------


@dataclass
class RunManifest:
    config_hash: str
    frames: dict  # frame id -> {"status": ..., "artifacts": {...}, "error": ...}
    timings: dict
    stage_errors: dict

    def as_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "frames": {frame_name(k): v for k, v in sorted(self.frames.items())},
            "timings": self.timings,
            "stage_errors": self.stage_errors,
        }

    def counts(self) -> dict:
        out: dict[str, int] = {}
        for v in self.frames.values():
            out[v["status"]] = out.get(v["status"], 0) + 1
        return out


def _frame_artifacts(out: Path, fid: int) -> dict:
    name = frame_name(fid)
    found = {}
    for key, rel in (("mask", f"masks/{name}.png"), ("label", f"labels/{name}.label"), ("curbs", f"curbs/{name}.json"),
                     ("detection", f"detections/{name}.json")):
        if (out / rel).is_file():
            found[key] = rel
        elif (out / "quarantine" / rel).is_file():
            found[key] = f"quarantine/{rel}"
    return found


def build_manifest(cfg: PipelineConfig, seq: Sequence, out: Path, results: list[StageResult]) -> RunManifest:
    frames = {}
    skipped = {}
    quarantined: set[int] = set()
    for r in results:
        if r.name == "label":
            skipped = {f: True for f in r.info.get("skipped", [])}
        if r.name == "review":
            quarantined = set(r.info.get("quarantined", []))
    for fid in seq.frame_ids:
        errs = {r.name: r.errors[fid] for r in results if fid in r.errors and r.name in ("detect", "label")}
        if errs:
            status = "error"
        elif fid in skipped:
            status = "skipped"
        elif fid in quarantined:
            status = "quarantined"
        else:
            status = "labeled"
        entry = {"status": status, "artifacts": _frame_artifacts(out, fid)}
        if errs:
            entry["error"] = errs
        warnings = {r.name: r.errors[fid] for r in results if fid in r.errors and r.name not in ("detect", "label")}
        if warnings:
            entry["warnings"] = warnings
        frames[fid] = entry
    timings = {r.name: round(r.seconds, 3) for r in results}
    stage_errors = {r.name: len(r.errors) for r in results}
    return RunManifest(cfg.hash(), frames, timings, stage_errors)


def write_manifest(path: Path, manifest: RunManifest) -> None:
    path.write_text(json.dumps(manifest.as_dict(), indent=1, sort_keys=True) + "\n")


def _reset_outputs(out: Path) -> None:
    """Clear frame artifacts of an earlier run so reruns start from the same state."""
    import shutil

    for sub in ("detections", "masks", "labels", "curbs", "review", "quarantine"):
        if (out / sub).is_dir():
            shutil.rmtree(out / sub)
    for name in ("poses_refined.txt", "retained.json", "verdicts.jsonl", "skipped.jsonl", "localize.jsonl"):
        if (out / name).exists():
            (out / name).unlink()


def run_pipeline(cfg: PipelineConfig, frames: tuple[int, int] | None = None, out: Path | None = None,
                 evaluate: bool = True) -> RunManifest:
    """detect -> map -> localize -> label -> review/filter (-> eval), manifest last."""
    seq = open_sequence(cfg, frames)
    out = Path(out) if out is not None else cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    _reset_outputs(out)
    results = [stage_detect(cfg, seq, out), stage_map(cfg, seq, out)]
    results.append(stage_localize(cfg, seq, out))
    results.append(stage_label(cfg, seq, out))
    results.append(stage_review(cfg, seq, out))
    if evaluate:
        results.append(stage_eval(cfg, seq, out))
    manifest = build_manifest(cfg, seq, out, results)
    write_manifest(out / "manifest.json", manifest)
    return manifest
