"""Analytic road scenes with known curbs, used as a ground-truth oracle.

A scene is a centerline made of a straight run followed by a circular arc.
Curbs sit at +-road_width/2 from the centerline; beyond each curb is a raised
sidewalk of ``curb_height`` and then a wall. Scans are simulated by exact
ray casting against those analytic surfaces, so every return carries its true
ring id and semantic label.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import (
    CameraIntrinsics,
    Extrinsics,
    Label,
    LabeledCloud,
    LidarGeometry,
    PathLike,
    PoseSE3,
    write_calib,
    write_poses,
    write_scan_bin,
)
from .labels import LabelMask, rasterize_mask, write_label_file, write_mask_png

# Surface codes used internally by the ray caster.
_ROAD, _SIDEWALK, _CURB_L, _CURB_R, _WALL, _BOX = range(6)
_SURFACE_LABEL = {
    _ROAD: Label.DRIVABLE,
    _SIDEWALK: Label.GROUND,
    _CURB_L: Label.CURB_LEFT,
    _CURB_R: Label.CURB_RIGHT,
    _WALL: Label.OTHER,
    _BOX: Label.OTHER,
}
_SURFACE_INTENSITY = {_ROAD: 0.2, _SIDEWALK: 0.35, _CURB_L: 0.5, _CURB_R: 0.5, _WALL: 0.7, _BOX: 0.9}


# The road continues straight for this far beyond both ends of the scene so
# that scans near the ends see a closed corridor.
EXTENSION = 100.0


class SceneValidationError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    size: tuple[float, float, float]


@dataclass(frozen=True)
class SceneSpec:
    road_width: float = 8.0
    curb_height: float = 0.15
    curvature: float = 0.0
    length: float = 120.0
    straight_length: float = 0.0
    sidewalk_width: float = 3.0
    wall_height: float = 4.0
    obstacles: tuple[Box, ...] = ()
    random_obstacles: int = 0
    seed: int = 0
    num_frames: int = 10
    frame_spacing: float = 2.0
    first_frame_s: float = 10.0

    def validate(self) -> None:
        if self.road_width <= 0:
            raise SceneValidationError("road_width must be positive")
        if self.curb_height < 0:
            raise SceneValidationError("curb_height must be non-negative")
        if self.length <= 0 or not 0 <= self.straight_length <= self.length:
            raise SceneValidationError("need 0 <= straight_length <= length")
        if abs(self.curvature) * self.length >= math.pi:
            raise SceneValidationError("|curvature| * length must be below pi")
        if self.curvature and 1.0 / abs(self.curvature) <= self.road_width / 2 + self.sidewalk_width:
            raise SceneValidationError("curve radius too tight for the road cross-section")
        if self.num_frames < 0 or self.frame_spacing <= 0:
            raise SceneValidationError("bad frame layout")
        last = self.first_frame_s + max(self.num_frames - 1, 0) * self.frame_spacing
        if self.num_frames and not (0 <= self.first_frame_s and last <= self.length):
            raise SceneValidationError("frames must lie on the centerline")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SceneSpec:
        d = dict(d)
        d["obstacles"] = tuple(Box(tuple(b["center"]), tuple(b["size"])) for b in d.get("obstacles", ()))
        return cls(**d)


def bundled_sequence_spec() -> SceneSpec:
    """The 50-frame straight-then-curved sequence used by the acceptance suite."""
    return SceneSpec(
        road_width=8.0,
        curb_height=0.15,
        curvature=1.0 / 100.0,
        length=200.0,
        straight_length=70.0,
        num_frames=50,
        frame_spacing=2.0,
        first_frame_s=10.0,
        obstacles=(Box((30.0, 6.0, 0.15 + 0.75), (2.0, 1.0, 1.5)), (Box((55.0, -5.5, 0.15 + 0.5), (1.0, 1.0, 1.0)))),
        seed=7,
    )


@dataclass
class GroundTruth:
    spec: SceneSpec
    centerline: np.ndarray  # (M, 2) world xy
    headings: np.ndarray  # (M,)
    arclength: np.ndarray  # (M,)
    left_curb: np.ndarray  # (M, 2)
    right_curb: np.ndarray
    left_wall: np.ndarray
    right_wall: np.ndarray
    boxes: list[Box]
    poses: list[PoseSE3] = field(default_factory=list)
    frame_s: np.ndarray = None
    sensor_height: float = 1.73

    @property
    def drivable_polygon(self) -> np.ndarray:
        """Closed (unrepeated) polygon between the two curb polylines."""
        return np.vstack([self.left_curb, self.right_curb[::-1]])

    def curb_samples(self, spacing: float = 0.1, s_range: tuple[float, float] | None = None) -> dict[int, np.ndarray]:
        """Dense 3D samples of both curb lines at mid-face height (world frame)."""
        lo, hi = s_range if s_range is not None else (0.0, self.spec.length)
        lo, hi = max(lo, -EXTENSION), min(hi, self.spec.length + EXTENSION)
        if hi <= lo:
            return {Label.CURB_LEFT: np.zeros((0, 3)), Label.CURB_RIGHT: np.zeros((0, 3))}
        s = np.arange(lo, hi + 1e-9, spacing)
        c, h = centerline_at(self.spec, s)
        n = np.stack([-np.sin(h), np.cos(h)], axis=1)
        half = self.spec.road_width / 2
        z = np.full((len(s), 1), self.spec.curb_height / 2)
        return {
            Label.CURB_LEFT: np.hstack([c + half * n, z]),
            Label.CURB_RIGHT: np.hstack([c - half * n, z]),
        }


def centerline_at(spec: SceneSpec, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Centerline position and heading at arc length ``s``."""
    s = np.asarray(s, dtype=np.float64)
    L0, k = spec.straight_length, spec.curvature
    arc_len = spec.length - L0
    u = np.clip(s - L0, 0.0, arc_len)
    x = np.minimum(s, L0)
    tail = np.clip(s - spec.length, 0.0, None)
    heading = np.full_like(s, 0.0) + k * u
    if k == 0:
        px, py = x + u, np.zeros_like(s)
    else:
        px = x + np.sin(k * u) / k
        py = (1.0 - np.cos(k * u)) / k
    px = px + tail * np.cos(heading)
    py = py + tail * np.sin(heading)
    return np.stack([px, py], axis=1), heading


def _arc_samples(spec: SceneSpec, offset: float) -> np.ndarray:
    """Arc-length stations fine enough that chords deviate <= 1 mm from the offset curve."""
    L0, k = spec.straight_length, spec.curvature
    stations = [-EXTENSION, 0.0, L0, spec.length + EXTENSION]
    arc_len = spec.length - L0
    if arc_len > 0:
        if k == 0:
            stations.append(spec.length)
        else:
            radius = abs(1.0 / k - offset) if k > 0 else abs(1.0 / k + offset)
            dphi = 2.0 * math.acos(1.0 - 1e-3 / radius)
            n = max(1, math.ceil(abs(k) * arc_len / dphi))
            stations.extend(L0 + arc_len * np.arange(1, n + 1) / n)
    return np.unique(np.asarray(stations))


def _offset_polyline(spec: SceneSpec, offset: float) -> np.ndarray:
    s = _arc_samples(spec, offset)
    c, h = centerline_at(spec, s)
    n = np.stack([-np.sin(h), np.cos(h)], axis=1)
    return c + offset * n


def generate_scene(spec: SceneSpec, sensor_height: float = 1.73) -> GroundTruth:
    spec.validate()
    half = spec.road_width / 2
    wall = half + spec.sidewalk_width
    stations = np.arange(0.0, spec.length + 1e-9, 0.5)
    c, h = centerline_at(spec, stations)
    boxes = list(spec.obstacles)
    if spec.random_obstacles:
        rng = np.random.default_rng(spec.seed)
        for _ in range(spec.random_obstacles):
            s = rng.uniform(0, spec.length)
            side = rng.choice([-1.0, 1.0])
            size = rng.uniform(0.5, 1.5, size=3)
            lateral = side * rng.uniform(half + size.max() / 2 + 0.3, wall - size.max() / 2 - 0.1)
            pc, ph = centerline_at(spec, [s])
            n = np.array([-math.sin(ph[0]), math.cos(ph[0])])
            xy = pc[0] + lateral * n
            boxes.append(Box((float(xy[0]), float(xy[1]), spec.curb_height + size[2] / 2), tuple(float(v) for v in size)))
    frame_s = spec.first_frame_s + spec.frame_spacing * np.arange(spec.num_frames)
    fc, fh = centerline_at(spec, frame_s)
    poses = [PoseSE3.from_xyz_rpy(p[0], p[1], sensor_height, yaw=yaw) for p, yaw in zip(fc, fh)]
    return GroundTruth(
        spec=spec,
        centerline=c,
        headings=h,
        arclength=stations,
        left_curb=_offset_polyline(spec, half),
        right_curb=_offset_polyline(spec, -half),
        left_wall=_offset_polyline(spec, wall),
        right_wall=_offset_polyline(spec, -wall),
        boxes=boxes,
        poses=poses,
        frame_s=frame_s,
        sensor_height=sensor_height,
    )


# ---------------------------------------------------------------------------
# Ray casting
# ---------------------------------------------------------------------------


def _segments(poly: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return poly[:-1], poly[1:]


def _ray_segment_params(origin, dirs, a, b):
    """Horizontal distance along each ray to each segment, inf where missed.

    ``dirs`` is (R, 2) unit vectors, ``a``/``b`` are (S, 2) segment endpoints.
    Segments are half-open at ``b`` so a shared vertex is crossed once.
    """
    if len(a) == 0:
        return np.full((len(dirs), 0), np.inf)
    e = b - a
    ao = a - origin
    denom = dirs[:, None, 0] * e[None, :, 1] - dirs[:, None, 1] * e[None, :, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (ao[None, :, 0] * e[None, :, 1] - ao[None, :, 1] * e[None, :, 0]) / denom
        u = (ao[None, :, 0] * dirs[:, None, 1] - ao[None, :, 1] * dirs[:, None, 0]) / denom
    hit = (denom != 0) & (s > 0) & (u >= 0) & (u < 1)
    return np.where(hit, s, np.inf)


def _near_segments(poly: np.ndarray, origin: np.ndarray, reach: float):
    a, b = _segments(poly)
    if len(a) == 0:
        return a, b
    # Distance from origin to each segment.
    e = b - a
    t = np.clip(np.einsum("ij,ij->i", origin - a, e) / np.maximum(np.einsum("ij,ij->i", e, e), 1e-300), 0, 1)
    d = np.linalg.norm(a + t[:, None] * e - origin, axis=1)
    keep = d <= reach
    return a[keep], b[keep]


def _cast_ring(truth: GroundTruth, origin, sensor_z, elevation, azimuths, max_range):
    """Return (horizontal range, surface code) per azimuth; range inf = no return."""
    spec = truth.spec
    h = spec.curb_height
    n = len(azimuths)
    dirs = np.stack([np.cos(azimuths), np.sin(azimuths)], axis=1)
    tan_el = math.tan(elevation)
    reach = max_range
    if tan_el < 0:
        reach = min(max_range, sensor_z / -tan_el)
    reach += 1e-6

    def z_at(s):
        return sensor_z + s * tan_el

    best = np.full(n, np.inf)
    code = np.full(n, -1)

    def offer(s, c):
        better = s < best
        best[better] = s[better]
        code[better] = c

    curb_s = []
    curb_side = []
    for side, poly in ((_CURB_L, truth.left_curb), (_CURB_R, truth.right_curb)):
        a, b = _near_segments(poly, origin, reach)
        s = _ray_segment_params(origin, dirs, a, b)
        curb_s.append(s)
        curb_side.append(np.full(s.shape[1], side))
    curb_s = np.hstack(curb_s)
    curb_side = np.concatenate(curb_side)

    wall_s = np.hstack([_ray_segment_params(origin, dirs, *_near_segments(p, origin, reach)) for p in (truth.left_wall, truth.right_wall)])
    first_wall = wall_s.min(axis=1) if wall_s.shape[1] else np.full(n, np.inf)

    # Curb face: crossing a curb line while the ray is between 0 and h.
    if curb_s.shape[1]:
        zc = z_at(curb_s)
        face = np.where((zc >= 0) & (zc <= h) & np.isfinite(curb_s), curb_s, np.inf)
        j = face.argmin(axis=1)
        fs = face[np.arange(n), j]
        for side in (_CURB_L, _CURB_R):
            sel = curb_side[j] == side
            offer(np.where(sel, fs, np.inf), side)

    def crossings_before(s):
        return (curb_s < s[:, None]).sum(axis=1)

    if tan_el < 0:
        s_road = np.full(n, sensor_z / -tan_el)
        ok = (crossings_before(s_road) % 2 == 0) & (s_road < first_wall)
        offer(np.where(ok, s_road, np.inf), _ROAD)
        s_side = np.full(n, (sensor_z - h) / -tan_el)
        ok = (crossings_before(s_side) % 2 == 1) & (s_side < first_wall)
        offer(np.where(ok, s_side, np.inf), _SIDEWALK)

    zw = z_at(first_wall)
    offer(np.where(np.isfinite(first_wall) & (zw <= h + spec.wall_height), first_wall, np.inf), _WALL)

    for box in truth.boxes:
        cx, cy, cz = box.center
        sx, sy, sz = box.size
        lo = np.array([cx - sx / 2, cy - sy / 2]) - origin
        hi = np.array([cx + sx / 2, cy + sy / 2]) - origin
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = lo / dirs
            t2 = hi / dirs
        t1 = np.where(np.isnan(t1), -np.inf, t1)
        t2 = np.where(np.isnan(t2), np.inf, t2)
        tmin = np.minimum(t1, t2).max(axis=1)
        tmax = np.maximum(t1, t2).min(axis=1)
        inside = (tmax >= tmin) & (tmax > 0)
        tmin = np.maximum(tmin, 0.0)
        zlo, zhi = cz - sz / 2, cz + sz / 2
        z_in = z_at(tmin)
        offer(np.where(inside & (z_in >= zlo) & (z_in <= zhi), tmin, np.inf), _BOX)
        if tan_el < 0:
            s_top = (sensor_z - zhi) / -tan_el
            ok = inside & (s_top >= tmin) & (s_top <= tmax)
            offer(np.where(ok, s_top, np.inf), _BOX)

    best[best > max_range] = np.inf
    return best, code


def simulate_scan(
    truth: GroundTruth,
    pose: PoseSE3,
    geom: LidarGeometry,
    *,
    noise_sigma: float = 0.0,
    seed: int = 0,
    max_range: float = 80.0,
    frame_id: int = 0,
) -> LabeledCloud:
    """Ray-cast one revolution of the sensor at ``pose`` (sensor-to-world).

    The sensor is assumed level (roll = pitch = 0), matching how the scene's
    poses are generated. Points come back in the sensor frame ordered by ring
    then azimuth, labeled with their true semantic class.
    """
    n_az = int(round(2 * math.pi / geom.horizontal_resolution))
    local_az = -math.pi + geom.horizontal_resolution * np.arange(n_az)
    origin = pose.translation[:2].copy()
    sensor_z = float(pose.translation[2])
    world_az = local_az + pose.yaw
    rng = np.random.default_rng([seed, frame_id]) if noise_sigma > 0 else None
    xyz, rings, labels, inten = [], [], [], []
    for r, el in enumerate(geom.ring_elevations):
        s, code = _cast_ring(truth, origin, sensor_z, el, world_az, max_range)
        ok = np.isfinite(s)
        s, code, az = s[ok], code[ok], local_az[ok]
        rng_3d = s / math.cos(el)
        if rng is not None:
            rng_3d = rng_3d + rng.normal(0.0, noise_sigma, size=len(rng_3d))
        horiz = rng_3d * math.cos(el)
        pts = np.stack([horiz * np.cos(az), horiz * np.sin(az), rng_3d * math.sin(el)], axis=1)
        xyz.append(pts)
        rings.append(np.full(len(pts), r, np.int32))
        labels.append(np.array([_SURFACE_LABEL[c] for c in code], np.uint8))
        inten.append(np.array([_SURFACE_INTENSITY[c] for c in code]))
    return LabeledCloud(
        np.concatenate(xyz) if xyz else np.zeros((0, 3)),
        np.concatenate(inten) if inten else None,
        np.concatenate(rings) if rings else None,
        np.concatenate(labels) if labels else None,
        frame_id=frame_id,
    )


# ---------------------------------------------------------------------------
# Camera ground truth
# ---------------------------------------------------------------------------


def default_calibration() -> tuple[CameraIntrinsics, Extrinsics]:
    """KITTI-like front camera 0.27 m ahead of and 0.08 m below the LiDAR."""
    intr = CameraIntrinsics(fu=700.0, fv=700.0, cu=600.0, cv=180.0, bx=0.0, width=1242, height=375)
    r = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    cam_in_lidar = np.array([0.27, 0.0, -0.08])
    return intr, Extrinsics(PoseSE3(r, -r @ cam_in_lidar))


def _clip_polygon_near(poly: np.ndarray, z_near: float) -> np.ndarray:
    """Sutherland-Hodgman clip of a 3D polygon to ``z >= z_near``."""
    out = []
    n = len(poly)
    for i in range(n):
        cur, nxt = poly[i], poly[(i + 1) % n]
        cin, nin = cur[2] >= z_near, nxt[2] >= z_near
        if cin:
            out.append(cur)
        if cin != nin:
            t = (z_near - cur[2]) / (nxt[2] - cur[2])
            out.append(cur + t * (nxt - cur))
    return np.array(out).reshape(-1, 3)


def simulate_camera_truth(truth: GroundTruth, pose: PoseSE3, intr: CameraIntrinsics, extr: Extrinsics):
    """Render the analytic drivable region as a binary mask.

    Returns ``(mask, empty)`` where ``empty`` flags a region fully outside
    the view frustum.
    """

    poly_w = np.hstack([truth.drivable_polygon, np.zeros((len(truth.drivable_polygon), 1))])
    world_to_cam = extr.lidar_to_camera @ pose.inverse()
    cam = world_to_cam.apply(poly_w)
    cam = _clip_polygon_near(cam, 1e-3)
    if len(cam) < 3:
        return LabelMask.zeros(intr.width, intr.height), True
    u = intr.fu * (cam[:, 0] - intr.bx) / cam[:, 2] + intr.cu
    v = intr.fv * cam[:, 1] / cam[:, 2] + intr.cv
    mask = rasterize_mask(np.stack([u, v], axis=1), intr.width, intr.height)
    return mask, not mask.values.any()


def render_rgb(mask: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Flat-shaded stand-in camera image: sky, verge and road."""
    img = np.empty((intr.height, intr.width, 3), np.uint8)
    img[:] = (70, 110, 60)
    horizon = int(min(max(round(intr.cv), 0), intr.height))
    img[:horizon] = (150, 180, 215)
    img[mask > 0] = (105, 105, 105)
    return img


# ---------------------------------------------------------------------------
# Sequence directory
# ---------------------------------------------------------------------------


def write_sequence(
    root: PathLike,
    spec: SceneSpec,
    geom: LidarGeometry | None = None,
    calib: tuple[CameraIntrinsics, Extrinsics] | None = None,
    noise_sigma: float = 0.0,
    curb_radius: float = 60.0,
    observed_ahead: float = 30.0,
) -> GroundTruth:
    """Write ``scans/ poses.txt calib.txt truth_masks/ truth_labels/
    truth_curbs/ images/ truth.json`` under ``root``.

    ``truth_curbs/<id>.json`` holds the analytic curb samples (sensor frame)
    within ``curb_radius`` of the pose, restricted to the route interval the
    sequence observes: from the first pose to ``observed_ahead`` past the last.
    """
    geom = geom or LidarGeometry.default()
    intr, extr = calib or default_calibration()
    root = Path(root)
    for sub in ("scans", "truth_masks", "images", "truth_labels", "truth_curbs"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    truth = generate_scene(spec, geom.sensor_height)
    write_poses(root / "poses.txt", truth.poses)
    write_calib(root / "calib.txt", intr, extr)
    curbs = truth.curb_samples(0.1, (truth.frame_s[0], truth.frame_s[-1] + observed_ahead))
    for i, pose in enumerate(truth.poses):
        cloud = simulate_scan(truth, pose, geom, noise_sigma=noise_sigma, seed=spec.seed, frame_id=i)
        write_scan_bin(root / "scans" / f"{i:06d}.bin", cloud)
        truth_cls = np.isin(cloud.labels, [Label.CURB_LEFT, Label.CURB_RIGHT]).astype(np.uint32)
        write_label_file(root / "truth_labels" / f"{i:06d}.label", truth_cls)
        write_truth_curbs(root / "truth_curbs" / f"{i:06d}.json", i, curbs, pose, curb_radius)
        mask, _ = simulate_camera_truth(truth, pose, intr, extr)
        write_mask_png(root / "truth_masks" / f"{i:06d}.png", mask)
        Image.fromarray(render_rgb(mask.values, intr)).save(root / "images" / f"{i:06d}.png")
    meta = {
        "spec": spec.to_dict(),
        "sensor_height": geom.sensor_height,
        "horizontal_resolution": geom.horizontal_resolution,
        "ring_elevations": list(geom.ring_elevations),
        "noise_sigma": noise_sigma,
        "curb_radius": curb_radius,
        "observed_ahead": observed_ahead,
    }
    (root / "truth.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return truth


def write_truth_curbs(path: PathLike, frame_id: int, curbs: dict, pose: PoseSE3, radius: float) -> None:
    inv = pose.inverse()
    doc = {"frame_id": frame_id}
    for key, lbl in (("left", Label.CURB_LEFT), ("right", Label.CURB_RIGHT)):
        pts = curbs[lbl]
        near = pts[np.linalg.norm(pts - pose.translation, axis=1) <= radius]
        doc[key] = inv.apply(near).round(6).tolist()
    Path(path).write_text(json.dumps(doc) + "\n")


def load_truth(root: PathLike) -> tuple[GroundTruth, LidarGeometry]:
    meta = json.loads((Path(root) / "truth.json").read_text())
    geom = LidarGeometry(meta["sensor_height"], meta["horizontal_resolution"], tuple(meta["ring_elevations"]))
    return generate_scene(SceneSpec.from_dict(meta["spec"]), geom.sensor_height), geom
