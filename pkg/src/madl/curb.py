"""Single-frame curb detection.

Stages: forward crop, ground segmentation, per-ring feature extraction
(height difference, smoothness, adaptive window), beam-model road direction,
left/right split along the road line, and iterative GP outlier filtering per
side.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.linalg import cho_solve, lapack, solve_triangular

from .geometry import Label, LabeledCloud, LidarGeometry, MadlError, PathLike
from .ground import GroundParams, segment_ground

log = logging.getLogger(__name__)


class UndefinedSmoothnessError(MadlError):
    pass


class IllConditionedError(MadlError):
    pass


class StageError(MadlError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class CurbThresholds:
    H1: float = 0.05
    H2: float = 0.30
    H3: float = 0.04
    Ts: float = 0.002

    def __post_init__(self):
        if not (0 < self.H1 < self.H2 and self.H3 > 0 and self.Ts > 0):
            raise ValueError(f"invalid curb thresholds: {self}")


@dataclass(frozen=True)
class WindowParams:
    target_span: float = 1.5
    delta_min: float = 0.02
    delta_max: float = 1.0


@dataclass(frozen=True)
class BeamParams:
    bins: int = 360
    max_range: float = 40.0
    region_halfwidth: float = math.radians(45.0)
    cluster_tolerance: float = 0.02

    def __post_init__(self):
        if self.bins < 4:
            raise ValueError("beam model needs at least 4 bins")


@dataclass(frozen=True)
class GprParams:
    length_scale: float = 5.0
    signal_variance: float = 1.0
    noise_variance: float = 0.0025
    confidence_k: float = 2.0
    max_iterations: int = 10
    min_points: int = 5

    def __post_init__(self):
        if min(self.length_scale, self.signal_variance, self.noise_variance, self.confidence_k) <= 0:
            raise ValueError("GP parameters must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass(frozen=True)
class CurbParams:
    crop_limit: float = 30.0
    ground: GroundParams = field(default_factory=GroundParams)
    thresholds: CurbThresholds = field(default_factory=CurbThresholds)
    window: WindowParams = field(default_factory=WindowParams)
    beam: BeamParams = field(default_factory=BeamParams)
    gpr: GprParams = field(default_factory=GprParams)
    # Half-open margin (m) past the detected curb extent where the boundary
    # curves are still trusted when labeling drivable points.
    boundary_extrapolation: float = 1.0


# ---------------------------------------------------------------------------
# Ring features
# ---------------------------------------------------------------------------


def split_into_rings(ground: LabeledCloud) -> list[np.ndarray]:
    """Point indices per ring present, each sorted by azimuth."""
    az = np.arctan2(ground.xyz[:, 1], ground.xyz[:, 0])
    out = []
    for r in np.unique(ground.ring):
        idx = np.flatnonzero(ground.ring == r)
        out.append(idx[np.argsort(az[idx], kind="stable")])
    return out


def height_difference_pass(z: np.ndarray, th: CurbThresholds) -> bool:
    """Height band on ``max - min`` plus a floor on the population std."""
    z = np.asarray(z, dtype=np.float64)
    spread = z.max() - z.min()
    mu = z.sum() / len(z)
    std = math.sqrt(((z - mu) ** 2).sum() / len(z))
    return bool(th.H1 <= spread <= th.H2 and std >= th.H3)


def smoothness(neighborhood: np.ndarray, center: int) -> float:
    """Smoothness of ``neighborhood[center]`` against the rest of the window."""
    pts = np.asarray(neighborhood, dtype=np.float64)
    p = pts[center]
    norm = float(np.linalg.norm(p))
    if norm == 0:
        raise UndefinedSmoothnessError("smoothness is undefined for a point at the origin")
    diff = len(pts) * p - pts.sum(axis=0)
    return float(np.linalg.norm(diff) / (len(pts) * norm))


def horizontal_spacing(geom: LidarGeometry, ring: int) -> float:
    """Unclamped along-ring spacing ``Hs * cot(theta_r) * pi * theta_a``.

    The depression magnitude is used, so downward rings give positive values.
    """
    theta = geom.ring_elevations[ring]
    if theta == 0:
        return math.inf
    return geom.sensor_height * abs(1.0 / math.tan(theta)) * math.pi * geom.horizontal_resolution


def adaptive_window(geom: LidarGeometry, ring: int, params: WindowParams | None = None) -> int:
    params = params or WindowParams()
    delta = horizontal_spacing(geom, ring)
    if not math.isfinite(delta):
        log.warning("ring %d is horizontal; window spacing clamped to %.3g m", ring, params.delta_max)
    delta = min(max(delta, params.delta_min), params.delta_max)
    return max(1, math.ceil(params.target_span / delta))


def _window_stats(values: np.ndarray, w: int):
    """Windowed views of ``values`` (N, ...) padded with NaN at the ring ends."""
    pad = [(w, w)] + [(0, 0)] * (values.ndim - 1)
    padded = np.pad(values.astype(np.float64), pad, constant_values=np.nan)
    return sliding_window_view(padded, 2 * w + 1, axis=0)


def window_height_stats(z: np.ndarray, w: int):
    """Per point: window size, ``max - min`` and population std of z over +-w neighbours."""
    zw = _window_stats(np.asarray(z, dtype=np.float64), w)  # (n, 2w+1), NaN past the ends
    return np.sum(~np.isnan(zw), axis=1), np.nanmax(zw, axis=1) - np.nanmin(zw, axis=1), np.nanstd(zw, axis=1)


def ring_features(xyz: np.ndarray, w: int, th: CurbThresholds):
    """Height-difference and smoothness gates for one azimuth-sorted ring.

    Returns ``(height_ok, s)``; windows are truncated at the ring ends.
    """
    n = len(xyz)
    if n < 2:
        return np.zeros(n, bool), np.zeros(n)
    count, spread, std = window_height_stats(xyz[:, 2], w)
    height_ok = (count >= 2) & (spread >= th.H1) & (spread <= th.H2) & (std >= th.H3)
    # sum_{j != i}(p_i - p_j) = |S| p_i - sum_S p_j
    c = np.vstack([np.zeros((1, 3)), np.cumsum(xyz, axis=0)])
    lo = np.clip(np.arange(n) - w, 0, n)
    hi = np.clip(np.arange(n) + w + 1, 0, n)
    win_sum = c[hi] - c[lo]
    size = (hi - lo)[:, None]
    diff = size * xyz - win_sum
    norm = np.linalg.norm(xyz, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.linalg.norm(diff, axis=1) / (size[:, 0] * norm)
    s[norm == 0] = 0.0
    return height_ok, s


def extract_candidates(
    ground: LabeledCloud, th: CurbThresholds, geom: LidarGeometry, window: WindowParams | None = None
) -> np.ndarray:
    """Indices into ``ground`` of points passing both feature gates."""
    window = window or WindowParams()
    keep = []
    for idx in split_into_rings(ground):
        ring = int(ground.ring[idx[0]])
        w = adaptive_window(geom, ring, window)
        height_ok, s = ring_features(ground.xyz[idx], w, th)
        keep.append(idx[height_ok & (s >= th.Ts)])
    return np.sort(np.concatenate(keep)) if keep else np.zeros(0, int)


# ---------------------------------------------------------------------------
# Beam model and road direction
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BeamModel:
    bin_count: int
    beam_lengths: np.ndarray
    max_range: float

    @property
    def bin_width(self) -> float:
        return 2 * math.pi / self.bin_count

    @property
    def bin_centers(self) -> np.ndarray:
        return -math.pi + (np.arange(self.bin_count) + 0.5) * self.bin_width


def azimuth_bin(xy: np.ndarray, bins: int) -> np.ndarray:
    az = np.arctan2(xy[:, 1], xy[:, 0])
    b = np.floor((az + math.pi) / (2 * math.pi / bins)).astype(int)
    return np.clip(b, 0, bins - 1)


def build_beam_model(non_ground: LabeledCloud | np.ndarray, bins: int = 360, max_range: float = 40.0) -> BeamModel:
    if bins < 4:
        raise ValueError("beam model needs at least 4 bins")
    xyz = non_ground.xyz if isinstance(non_ground, LabeledCloud) else np.asarray(non_ground).reshape(-1, 3)
    lengths = np.full(bins, float(max_range))
    if len(xyz):
        r = np.hypot(xyz[:, 0], xyz[:, 1])
        b = azimuth_bin(xyz, bins)
        np.minimum.at(lengths, b, np.minimum(r, max_range))
        lengths = np.where(lengths > 0, lengths, max_range)
    return BeamModel(bins, lengths, float(max_range))


@dataclass(frozen=True)
class RoadDirection:
    angle: float
    low_confidence: bool
    front_angle: float | None = None
    rear_angle: float | None = None

    @property
    def unit(self) -> np.ndarray:
        return np.array([math.cos(self.angle), math.sin(self.angle)])


def suppress_peaks(lengths: np.ndarray) -> np.ndarray:
    """Flatten isolated single-bin spikes whose neighbours are both >50% shorter."""
    left, right = np.roll(lengths, 1), np.roll(lengths, -1)
    peak = (left < 0.5 * lengths) & (right < 0.5 * lengths)
    out = lengths.copy()
    out[peak] = np.maximum(left, right)[peak]
    return out


def _wrap(a):
    return (a + math.pi) % (2 * math.pi) - math.pi


def _longest_cluster(centers, lengths, tol) -> float | None:
    """Center azimuth of the widest contiguous run of near-maximal beams.

    ``None`` when the region carries no information (all beams equal).
    """
    if len(lengths) == 0 or np.ptp(lengths) == 0:
        return None
    top = lengths >= lengths.max() * (1 - tol)
    best, best_len, start = None, -1, None
    for i, flag in enumerate(np.append(top, False)):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            if i - start > best_len:
                best_len, best = i - start, (start, i - 1)
            start = None
    a, b = best
    # centers are contiguous and unwrapped within a region.
    return float(0.5 * (centers[a] + centers[b]))


def estimate_road_direction(beams: BeamModel, params: BeamParams | None = None) -> RoadDirection:
    """Road direction from the longest front and rear beam clusters."""
    params = params or BeamParams()
    lengths = suppress_peaks(beams.beam_lengths)
    centers = beams.bin_centers
    hw = params.region_halfwidth
    front = np.abs(centers) <= hw
    # Unwrap rear-region azimuths around pi so the bins stay contiguous.
    rear_c = np.mod(centers, 2 * math.pi)
    rear = np.abs(rear_c - math.pi) <= hw
    f_order = np.argsort(centers[front])
    r_order = np.argsort(rear_c[rear])
    fa = _longest_cluster(centers[front][f_order], lengths[front][f_order], params.cluster_tolerance)
    ra = _longest_cluster(rear_c[rear][r_order], lengths[rear][r_order], params.cluster_tolerance)
    if fa is None and ra is None:
        return RoadDirection(0.0, True)
    if ra is None:
        angle = fa
    elif fa is None:
        angle = _wrap(ra - math.pi)
    else:
        back = _wrap(ra - math.pi)
        angle = _wrap(fa + 0.5 * _wrap(back - fa))
    return RoadDirection(float(angle), False, fa, None if ra is None else float(_wrap(ra)))


def classify_left_right(points: np.ndarray, direction: RoadDirection | float) -> tuple[np.ndarray, np.ndarray]:
    """Boolean (left, right) masks by the sign of ``dir x p``; ties go right."""
    pts = np.asarray(points, dtype=np.float64)
    angle = direction.angle if isinstance(direction, RoadDirection) else float(direction)
    dx, dy = math.cos(angle), math.sin(angle)
    cross = dx * pts[:, 1] - dy * pts[:, 0]
    left = cross > 0
    return left, ~left


def to_road_frame(xy: np.ndarray, angle: float) -> np.ndarray:
    """Rotate sensor-frame xy by ``-angle`` so the road runs along +x."""
    c, s = math.cos(angle), math.sin(angle)
    xy = np.asarray(xy, dtype=np.float64)
    return np.stack([c * xy[:, 0] + s * xy[:, 1], -s * xy[:, 0] + c * xy[:, 1]], axis=1)


def from_road_frame(xy: np.ndarray, angle: float) -> np.ndarray:
    return to_road_frame(xy, -angle)


# ---------------------------------------------------------------------------
# Gaussian process regression
# ---------------------------------------------------------------------------

# Reciprocal condition number below which a kernel matrix is rejected.
MIN_RCOND = 1e-9


def se_kernel(a: np.ndarray, b: np.ndarray, params: GprParams) -> np.ndarray:
    d = np.subtract.outer(np.asarray(a, float), np.asarray(b, float))
    return params.signal_variance * np.exp(-(d**2) / (2 * params.length_scale**2))


def _cholesky(k: np.ndarray) -> np.ndarray:
    for jitter in (0.0, 1e-8):
        kk = k + jitter * np.eye(len(k)) if jitter else k
        c, info = lapack.dpotrf(kk, lower=1, clean=1)
        if info == 0:
            anorm = np.abs(kk).sum(axis=0).max()
            rcond, _ = lapack.dpocon(c, anorm, uplo="L")
            if rcond < MIN_RCOND:
                raise IllConditionedError(f"kernel matrix is ill-conditioned (rcond={rcond:.2e})")
            return c
    raise IllConditionedError("Cholesky factorization failed even with 1e-8 jitter")


def gpr_fit(train_x, train_y, params: GprParams, query_x) -> tuple[np.ndarray, np.ndarray]:
    """Zero-mean GP posterior predictive mean and variance at ``query_x``.

    The variance includes observation noise, so it tends to
    ``signal_variance + noise_variance`` far from the data.
    """
    x = np.asarray(train_x, dtype=np.float64).ravel()
    y = np.asarray(train_y, dtype=np.float64).ravel()
    q = np.asarray(query_x, dtype=np.float64).ravel()
    if len(x) < 1 or len(x) != len(y):
        raise ValueError("need at least one training pair of matching lengths")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y)) and np.all(np.isfinite(q))):
        raise ValueError("GP inputs must be finite")
    k = se_kernel(x, x, params) + params.noise_variance * np.eye(len(x))
    c = _cholesky(k)
    alpha = cho_solve((c, True), y)
    ks = se_kernel(x, q, params)
    mean = ks.T @ alpha
    v = solve_triangular(c, ks, lower=True, check_finite=False) if len(q) else np.zeros((len(x), 0))
    latent = np.maximum(params.signal_variance - np.sum(v * v, axis=0), 0.0)
    return mean, latent + params.noise_variance


def _loo_residuals(x: np.ndarray, y: np.ndarray, params: GprParams) -> tuple[np.ndarray, np.ndarray]:
    """Leave-one-out residuals and predictive variances of a GP fit on (x, y)."""
    y = y - y.mean()
    c = _cholesky(se_kernel(x, x, params) + params.noise_variance * np.eye(len(x)))
    kinv = cho_solve((c, True), np.eye(len(x)))
    d = np.diag(kinv)
    return (kinv @ y) / d, 1.0 / d


@dataclass
class GprFilterResult:
    inliers: np.ndarray  # bool mask over the input
    iterations: int
    boundary: np.ndarray  # (M, 2) samples of the posterior mean
    residual_rms: float
    warning: str | None = None
    converged: bool = True


def gpr_filter(x: np.ndarray, y: np.ndarray, params: GprParams | None = None, sample_step: float = 0.5) -> GprFilterResult:
    """Iteratively fit ``y = f(x)`` and drop points whose leave-one-out
    prediction misses by more than ``k`` sigma.

    The constant mean of the current inliers is removed before each fit.
    """
    params = params or GprParams()
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    n = len(x)
    keep = np.ones(n, bool)
    if n < params.min_points:
        msg = f"only {n} points (< {params.min_points}); passed through unfiltered"
        log.warning("gpr_filter: %s", msg)
        return GprFilterResult(keep, 0, np.column_stack([x, y]), 0.0, msg)
    iterations = 0
    converged = False
    warning = None
    while iterations < params.max_iterations:
        iterations += 1
        idx = np.flatnonzero(keep)
        resid, var = _loo_residuals(x[idx], y[idx], params)
        z = np.abs(resid) / np.sqrt(var)
        flagged = z > params.confidence_k
        if not flagged.any():
            converged = True
            break
        # Only the strongest offenders go per pass; an outlier inflates its
        # neighbours' residuals too, and those recover once it is gone.
        bad = np.zeros(n, bool)
        bad[idx[flagged & (z >= 0.5 * z.max())]] = True
        if (keep & ~bad).sum() < params.min_points:
            warning = f"stopped after {iterations} iterations: removal would leave < {params.min_points} points"
            log.warning("gpr_filter: %s", warning)
            break
        keep &= ~bad
    xs, ys = x[keep], y[keep]
    off = ys.mean()
    grid = np.arange(xs.min(), xs.max() + sample_step, sample_step)
    grid = grid[grid <= xs.max() + 1e-9]
    if len(grid) == 0 or grid[-1] < xs.max():
        grid = np.append(grid, xs.max())
    mean_grid, _ = gpr_fit(xs, ys - off, params, grid)
    mean_in, _ = gpr_fit(xs, ys - off, params, xs)
    rms = float(np.sqrt(np.mean((ys - off - mean_in) ** 2)))
    return GprFilterResult(keep, iterations, np.column_stack([grid, mean_grid + off]), rms, warning, converged)


# ---------------------------------------------------------------------------
# Full detector
# ---------------------------------------------------------------------------


@dataclass
class CurbDetection:
    frame_id: int
    left: np.ndarray  # (N, 3) sensor frame
    right: np.ndarray
    boundary_left: np.ndarray  # (M, 2) road-frame (x, y) samples
    boundary_right: np.ndarray
    residual_rms: float
    road_direction: float
    low_confidence: bool = False
    cloud: LabeledCloud | None = None  # cropped frame with per-point semantic labels
    source_index: np.ndarray | None = None  # cloud index -> raw scan index
    warnings: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "frame_id": int(self.frame_id),
            "left": np.round(self.left, 6).tolist(),
            "right": np.round(self.right, 6).tolist(),
            "boundary_left": np.round(self.boundary_left, 6).tolist(),
            "boundary_right": np.round(self.boundary_right, 6).tolist(),
            "residual_rms": float(self.residual_rms),
            "road_direction": float(self.road_direction),
            "low_confidence": bool(self.low_confidence),
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_json(cls, doc: dict) -> CurbDetection:
        def arr(key, width):
            return np.asarray(doc.get(key, []), dtype=np.float64).reshape(-1, width)

        return cls(
            frame_id=int(doc["frame_id"]),
            left=arr("left", 3),
            right=arr("right", 3),
            boundary_left=arr("boundary_left", 2),
            boundary_right=arr("boundary_right", 2),
            residual_rms=float(doc["residual_rms"]),
            road_direction=float(doc["road_direction"]),
            low_confidence=bool(doc.get("low_confidence", False)),
            warnings=list(doc.get("warnings", [])),
        )


def save_detection(path: PathLike, det: CurbDetection) -> None:
    Path(path).write_text(json.dumps(det.to_json()) + "\n")


def load_detection(path: PathLike) -> CurbDetection:
    return CurbDetection.from_json(json.loads(Path(path).read_text()))


def _boundary_at(boundary: np.ndarray, x: np.ndarray, margin: float) -> np.ndarray:
    """Boundary y at road-frame ``x``; NaN outside the sampled range (+margin)."""
    if len(boundary) == 0:
        return np.full(len(x), np.nan)
    bx, by = boundary[:, 0], boundary[:, 1]
    y = np.interp(x, bx, by)
    out = (x < bx.min() - margin) | (x > bx.max() + margin)
    y[out] = np.nan
    return y


def drivable_mask(xyz: np.ndarray, det: CurbDetection, margin: float = 1.0) -> np.ndarray:
    """Which sensor-frame points fall strictly between the two boundary curves."""
    if len(xyz) == 0:
        return np.zeros(0, bool)
    road = to_road_frame(xyz[:, :2], det.road_direction)
    yl = _boundary_at(det.boundary_left, road[:, 0], margin)
    yr = _boundary_at(det.boundary_right, road[:, 0], margin)
    with np.errstate(invalid="ignore"):
        return (road[:, 1] < yl) & (road[:, 1] > yr)


def label_frame(ground_cloud: LabeledCloud, det: CurbDetection, curb_index: dict, margin: float = 1.0) -> LabeledCloud:
    """Assign drivable / curb labels on a ground-segmented cloud."""
    labels = ground_cloud.labels.copy()
    is_ground = labels == Label.GROUND
    between = drivable_mask(ground_cloud.xyz, det, margin)
    labels[is_ground & between] = Label.DRIVABLE
    labels[curb_index["left"]] = Label.CURB_LEFT
    labels[curb_index["right"]] = Label.CURB_RIGHT
    return ground_cloud.with_labels(labels)


def detect_curbs(frame: LabeledCloud, geom: LidarGeometry, params: CurbParams | None = None) -> CurbDetection:
    """Run every single-frame stage and return the labeled detection."""
    params = params or CurbParams()
    warnings: list[str] = []

    def stage(name, fn, *args):
        try:
            return fn(*args)
        except MadlError as exc:
            raise StageError(name, exc) from exc
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise StageError(name, exc) from exc

    x = frame.xyz[:, 0]
    source_index = np.flatnonzero((x > 0) & (x <= params.crop_limit))
    cropped = stage("crop", frame.subset, source_index)
    empty = np.zeros((0, 3))
    if len(cropped) == 0:
        return CurbDetection(frame.frame_id, empty, empty, np.zeros((0, 2)), np.zeros((0, 2)), 0.0, 0.0, True, cropped,
                             source_index, ["empty frame after crop"])
    seg = stage("ground", segment_ground, cropped, params.ground)
    warnings += seg.diagnostics.get("ground_warnings", [])
    is_ground = seg.labels == Label.GROUND
    ground_idx = np.flatnonzero(is_ground)
    ground = seg.subset(ground_idx)
    cand = ground_idx[stage("features", extract_candidates, ground, params.thresholds, geom, params.window)]
    beams = stage("beam", build_beam_model, seg.subset(~is_ground), params.beam.bins, params.beam.max_range)
    direction = stage("direction", estimate_road_direction, beams, params.beam)
    if direction.low_confidence:
        warnings.append("road direction defaulted (uniform beam model)")
    cand_xyz = seg.xyz[cand]
    left_m, right_m = stage("classify", classify_left_right, cand_xyz[:, :2], direction)
    road_xy = to_road_frame(cand_xyz[:, :2], direction.angle)

    sides = {}
    sq_res, n_res = 0.0, 0
    for name, m in (("left", left_m), ("right", right_m)):
        idx = cand[m]
        if len(idx) == 0:
            sides[name] = (idx, np.zeros((0, 2)))
            continue
        res = stage("gpr", gpr_filter, road_xy[m, 0], road_xy[m, 1], params.gpr)
        if res.warning:
            warnings.append(f"{name}: {res.warning}")
        sides[name] = (idx[res.inliers], res.boundary)
        if res.warning is None:
            sq_res += res.residual_rms**2 * res.inliers.sum()
            n_res += int(res.inliers.sum())
    rms = math.sqrt(sq_res / n_res) if n_res else 0.0
    det = CurbDetection(
        frame_id=frame.frame_id,
        left=seg.xyz[sides["left"][0]],
        right=seg.xyz[sides["right"][0]],
        boundary_left=sides["left"][1],
        boundary_right=sides["right"][1],
        residual_rms=rms,
        road_direction=direction.angle,
        low_confidence=direction.low_confidence,
        source_index=source_index,
        warnings=warnings,
    )
    det.cloud = label_frame(seg, det, {"left": sides["left"][0], "right": sides["right"][0]},
                            params.boundary_extrapolation)
    return det


def labels_for_scan(det: CurbDetection, n_points: int) -> np.ndarray:
    """Scatter the detection's per-point labels back onto the raw scan order."""
    out = np.zeros(n_points, np.uint32)
    if det.cloud is not None and det.source_index is not None:
        out[det.source_index] = det.cloud.labels
    return out
