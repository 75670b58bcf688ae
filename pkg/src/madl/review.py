"""Review renderings, retain/discard verdicts and dataset filtering.

Each generated frame is rendered three ways (camera image with projected
curbs, altitude difference image, top-down view) and judged either by a
remote multimodal service or by a deterministic heuristic on the curb
diagnostics. Discarded frames are moved to ``quarantine/``, never deleted.
"""

from __future__ import annotations

import base64
import io
import json
import logging
import math
import os
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import requests
from PIL import Image

from .geometry import CameraIntrinsics, Extrinsics, LabeledCloud, MadlError, PathLike
from .labels import project_points

log = logging.getLogger(__name__)

ADI_FULL_SCALE = 0.5  # meters mapped to 255
CURB_COLOR = (255, 0, 0)
BEV_CURB_VALUE = 255
TOKEN_ENV = "MADL_REVIEW_TOKEN"

DEFAULT_INSTRUCTIONS = (
    "You are reviewing an automatically labeled driving frame. Image 1 is the camera view "
    "with projected curb points in red, image 2 is an altitude difference image (brighter = "
    "larger height change), image 3 is a top-down point cloud view with curb points in white. "
    "Decide whether the curb labels follow real curbs on both sides of the road. Answer with "
    'JSON {"decision": "retain" or "discard", "confidence": 0..1, "reason": "<short text>"}.'
)


class RemoteReviewError(MadlError):
    pass


class MissingVerdictError(MadlError):
    pass


@dataclass
class ReviewSample:
    frame_id: int
    rgb_overlay: np.ndarray  # (H, W, 3) uint8
    adi: np.ndarray  # (H, W) uint8
    adi_valid: np.ndarray  # (H, W) bool
    bev: np.ndarray  # (H, W) uint8
    metadata: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ReviewVerdict:
    frame_id: int
    decision: str
    confidence: float
    reason: str
    source: str

    def __post_init__(self):
        if self.decision not in ("retain", "discard"):
            raise ValueError(f"decision must be retain or discard, got {self.decision!r}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if self.source not in ("remote", "heuristic"):
            raise ValueError(f"unknown verdict source {self.source!r}")

    @property
    def retain(self) -> bool:
        return self.decision == "retain"


@dataclass(frozen=True)
class HeuristicThresholds:
    n_min: int = 30
    r_max: float = 0.2
    s_min: float = 10.0


@dataclass(frozen=True)
class RemoteConfig:
    endpoint: str = ""
    token: str | None = None
    timeout: float = 30.0
    instructions: str = DEFAULT_INSTRUCTIONS
    fallback: bool = True
    max_in_flight: int = 4

    def resolved_token(self) -> str | None:
        return self.token or os.environ.get(TOKEN_ENV)


# ---------------------------------------------------------------------------
# Renderings
# ---------------------------------------------------------------------------


def _grid_cells(xy: np.ndarray, resolution: float, extent: float):
    """Row/col of each point on the forward-looking grid and an in-bounds mask.

    Rows run from far (top) to near, columns from left (+y) to right.
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    n = int(math.ceil(extent / resolution - 1e-9))
    row = np.floor((extent - xy[:, 0]) / resolution).astype(np.int64)
    col = np.floor((extent / 2 - xy[:, 1]) / resolution).astype(np.int64)
    ok = (xy[:, 0] >= 0) & (xy[:, 0] <= extent) & (np.abs(xy[:, 1]) <= extent / 2)
    row, col = np.clip(row, 0, n - 1), np.clip(col, 0, n - 1)
    return row, col, ok, n


def compute_adi(cloud: LabeledCloud | np.ndarray, grid_resolution: float = 0.2, extent: float = 40.0):
    """Altitude difference image: per-cell ``max z - min z`` on an 8-bit scale.

    Returns ``(image, valid)``; empty cells are 0 and invalid.
    """
    xyz = cloud.xyz if isinstance(cloud, LabeledCloud) else np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    row, col, ok, n = _grid_cells(xyz, grid_resolution, extent)
    zmax = np.full((n, n), -np.inf)
    zmin = np.full((n, n), np.inf)
    np.maximum.at(zmax, (row[ok], col[ok]), xyz[ok, 2])
    np.minimum.at(zmin, (row[ok], col[ok]), xyz[ok, 2])
    valid = np.isfinite(zmax)
    # Round away float noise so a step of exactly k/510 m lands on a stable code.
    diff = np.round(np.where(valid, zmax - zmin, 0.0), 9)
    scaled = np.clip(diff, 0.0, ADI_FULL_SCALE) / ADI_FULL_SCALE * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8), valid


def adi_meters(adi: np.ndarray) -> np.ndarray:
    return adi.astype(np.float64) / 255.0 * ADI_FULL_SCALE


def render_bev(
    cloud: LabeledCloud | np.ndarray,
    curb_points: np.ndarray | None = None,
    resolution: float = 0.1,
    extent: float = 40.0,
    z_range: tuple[float, float] = (-2.5, 1.5),
) -> np.ndarray:
    """Top-down render: points shaded 32..223 by height, curbs drawn at 255."""
    xyz = cloud.xyz if isinstance(cloud, LabeledCloud) else np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    row, col, ok, n = _grid_cells(xyz, resolution, extent)
    img = np.zeros((n, n), np.uint8)
    lo, hi = z_range
    shade = 32 + np.floor(np.clip((xyz[:, 2] - lo) / (hi - lo), 0.0, 1.0) * 191).astype(np.uint8)
    np.maximum.at(img, (row[ok], col[ok]), shade[ok])
    if curb_points is not None and len(curb_points):
        cp = np.asarray(curb_points, dtype=np.float64).reshape(-1, 3)
        r, c, cok, _ = _grid_cells(cp, resolution, extent)
        img[r[cok], c[cok]] = BEV_CURB_VALUE
    return img


def overlay_curbs(rgb: np.ndarray, pixels: np.ndarray, color=CURB_COLOR) -> np.ndarray:
    """Copy of ``rgb`` with a 3x3 marker centred on each curb pixel."""
    out = np.array(rgb, dtype=np.uint8, copy=True)
    px = np.floor(np.asarray(pixels, dtype=np.float64).reshape(-1, 2)).astype(np.int64)
    h, w = out.shape[:2]
    for du in (-1, 0, 1):
        for dv in (-1, 0, 1):
            u, v = px[:, 0] + du, px[:, 1] + dv
            ok = (u >= 0) & (u < w) & (v >= 0) & (v < h)
            out[v[ok], u[ok]] = color
    return out


def curb_span(curbs: LabeledCloud, road_direction: float = 0.0) -> dict:
    """Point count and along-road extent of each curb side."""
    c, s = math.cos(road_direction), math.sin(road_direction)
    out = {}
    for side, lbl in (("left", 3), ("right", 4)):
        pts = curbs.xyz[curbs.labels == lbl]
        along = c * pts[:, 0] + s * pts[:, 1]
        out[side] = (len(pts), float(np.ptp(along)) if len(pts) else 0.0)
    return out


def build_review_sample(
    frame_id: int,
    scan: LabeledCloud,
    curbs: LabeledCloud,
    rgb: np.ndarray,
    calib: tuple[CameraIntrinsics, Extrinsics],
    residual_rms: float,
    road_direction: float = 0.0,
    adi_resolution: float = 0.2,
    bev_resolution: float = 0.1,
    extent: float = 40.0,
) -> ReviewSample:
    intr, extr = calib
    proj = project_points(curbs.xyz, intr, extr)
    spans = curb_span(curbs, road_direction)
    adi, valid = compute_adi(scan, adi_resolution, extent)
    return ReviewSample(
        frame_id=frame_id,
        rgb_overlay=overlay_curbs(rgb, proj.uv),
        adi=adi,
        adi_valid=valid,
        bev=render_bev(scan, curbs.xyz, bev_resolution, extent),
        metadata={
            "left_count": spans["left"][0],
            "right_count": spans["right"][0],
            "left_span": spans["left"][1],
            "right_span": spans["right"][1],
            "residual_rms": float(residual_rms),
        },
    )


def write_review_images(sample: ReviewSample, out_dir: PathLike) -> dict[str, str]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    name = f"{sample.frame_id:06d}"
    paths = {}
    for kind, img in (("rgb", sample.rgb_overlay), ("adi", sample.adi), ("bev", sample.bev)):
        p = out / f"{name}_{kind}.png"
        Image.fromarray(img).save(p, optimize=False)
        paths[kind] = str(p)
    return paths


def _png_b64(img: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(img).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


# ---------------------------------------------------------------------------
# Verdicts
# ---------------------------------------------------------------------------


def review_heuristic(sample: ReviewSample | dict, thresholds: HeuristicThresholds | None = None) -> ReviewVerdict:
    """Retain iff both sides have enough points, a small residual and a long span.

    Confidence on retain is the smallest relative margin ``|v - t| / t`` over the
    checks, on discard the relative margin of the first failing check; both
    clipped to [0, 1]. The span checked is the shorter of the two sides.
    """
    th = thresholds or HeuristicThresholds()
    meta = sample.metadata if isinstance(sample, ReviewSample) else sample
    frame_id = int(meta.get("frame_id", sample.frame_id if isinstance(sample, ReviewSample) else -1))
    span = min(meta.get("left_span", 0.0), meta.get("right_span", 0.0))
    checks = [
        ("left count", meta["left_count"] >= th.n_min, (meta["left_count"] - th.n_min) / th.n_min),
        ("right count", meta["right_count"] >= th.n_min, (meta["right_count"] - th.n_min) / th.n_min),
        ("residual", meta["residual_rms"] <= th.r_max, (th.r_max - meta["residual_rms"]) / th.r_max),
        ("span", span >= th.s_min, (span - th.s_min) / th.s_min),
    ]
    for name, passed, margin in checks:
        if not passed:
            return ReviewVerdict(frame_id, "discard", float(np.clip(abs(margin), 0, 1)), name, "heuristic")
    conf = float(np.clip(min(m for _, _, m in checks), 0.0, 1.0))
    return ReviewVerdict(frame_id, "retain", conf, "all checks passed", "heuristic")


def review_remote(sample: ReviewSample, cfg: RemoteConfig, session: requests.Session | None = None) -> ReviewVerdict:
    """POST the three renderings and parse ``{decision, confidence, reason}``."""
    if not cfg.endpoint:
        raise RemoteReviewError("no review endpoint configured")
    body = {
        "frame_id": int(sample.frame_id),
        "instructions": cfg.instructions,
        "images": [_png_b64(sample.rgb_overlay), _png_b64(sample.adi), _png_b64(sample.bev)],
    }
    headers = {"Content-Type": "application/json"}
    token = cfg.resolved_token()
    if token:
        headers["Authorization"] = f"Bearer {token}"
    post = (session or requests).post
    try:
        resp = post(cfg.endpoint, data=json.dumps(body), headers=headers, timeout=cfg.timeout)
    except requests.RequestException as exc:
        raise RemoteReviewError(f"request failed: {exc}") from exc
    if not 200 <= resp.status_code < 300:
        raise RemoteReviewError(f"endpoint returned HTTP {resp.status_code}")
    try:
        doc = resp.json()
    except ValueError as exc:
        raise RemoteReviewError("response is not JSON") from exc
    if not isinstance(doc, dict):
        raise RemoteReviewError("response is not a JSON object")
    decision, conf, reason = doc.get("decision"), doc.get("confidence"), doc.get("reason", "")
    if decision not in ("retain", "discard"):
        raise RemoteReviewError(f"malformed response: decision {decision!r}")
    if isinstance(conf, bool) or not isinstance(conf, (int, float)) or not 0 <= conf <= 1:
        raise RemoteReviewError(f"malformed response: confidence {conf!r}")
    if not isinstance(reason, str):
        raise RemoteReviewError("malformed response: reason is not a string")
    return ReviewVerdict(int(sample.frame_id), decision, float(conf), reason, "remote")


def review_sample(
    sample: ReviewSample, remote: RemoteConfig | None, thresholds: HeuristicThresholds | None = None
) -> ReviewVerdict:
    """Remote review when configured, heuristic otherwise or on remote failure."""
    if remote is None or not remote.endpoint:
        return review_heuristic(sample, thresholds)
    try:
        return review_remote(sample, remote)
    except RemoteReviewError as exc:
        if not remote.fallback:
            raise
        log.warning("frame %d: remote review failed (%s); using heuristic", sample.frame_id, exc)
        return review_heuristic(sample, thresholds)


def review_all(
    samples: list[ReviewSample], remote: RemoteConfig | None, thresholds: HeuristicThresholds | None = None
) -> list[ReviewVerdict]:
    """Verdicts in input order; remote calls run up to ``max_in_flight`` at once."""
    if remote is None or not remote.endpoint or remote.max_in_flight <= 1:
        return [review_sample(s, remote, thresholds) for s in samples]
    with ThreadPoolExecutor(max_workers=remote.max_in_flight) as pool:
        return list(pool.map(lambda s: review_sample(s, remote, thresholds), samples))


def write_verdicts(path: PathLike, verdicts: list[ReviewVerdict]) -> None:
    with open(path, "w") as fh:
        for v in verdicts:
            fh.write(json.dumps(asdict(v), sort_keys=True) + "\n")


def read_verdicts(path: PathLike) -> list[ReviewVerdict]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(ReviewVerdict(**json.loads(line)))
    return out


# ---------------------------------------------------------------------------
# Filtering
# ---------------------------------------------------------------------------

ARTIFACT_DIRS = ("masks", "labels", "curbs", "review")


def frame_artifacts(artifacts_dir: Path) -> dict[int, list[Path]]:
    """Generated files per frame id, found by the ``<id>`` filename prefix."""
    found: dict[int, list[Path]] = {}
    for sub in ARTIFACT_DIRS:
        d = artifacts_dir / sub
        if not d.is_dir():
            continue
        for p in sorted(d.iterdir()):
            head = p.name.split(".")[0].split("_")[0]
            if p.is_file() and head.isdigit():
                found.setdefault(int(head), []).append(p)
    return found


@dataclass
class FilterResult:
    retained: list[int]
    quarantined: list[int]
    manifest_path: Path


def filter_dataset(verdicts: list[ReviewVerdict], artifacts_dir: PathLike) -> FilterResult:
    """Move discarded frames' artifacts into ``quarantine/`` and write ``retained.json``."""
    root = Path(artifacts_dir)
    by_frame = {v.frame_id: v for v in verdicts}
    generated = frame_artifacts(root)
    missing = sorted(set(generated) - set(by_frame))
    if missing:
        raise MissingVerdictError(f"no verdict for frame(s): {', '.join(map(str, missing))}")
    retained, quarantined = [], []
    for fid in sorted(generated):
        if by_frame[fid].retain:
            retained.append(fid)
            continue
        quarantined.append(fid)
        for p in generated[fid]:
            dest = root / "quarantine" / p.parent.name / p.name
            dest.parent.mkdir(parents=True, exist_ok=True)
            shutil.move(str(p), str(dest))
    prior = root / "quarantine" / "frames.json"
    earlier = json.loads(prior.read_text()) if prior.exists() else []
    all_q = sorted(set(earlier) | set(quarantined))
    if all_q:
        prior.parent.mkdir(parents=True, exist_ok=True)
        prior.write_text(json.dumps(all_q) + "\n")
    manifest = root / "retained.json"
    manifest.write_text(json.dumps({"retained": retained, "quarantined": all_q}, indent=1) + "\n")
    return FilterResult(retained, quarantined, manifest)
