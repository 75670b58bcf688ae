"""Geometric primitives, sensor calibration and KITTI-style file IO.

Point clouds are stored column-wise in numpy arrays rather than as lists of
point objects; a :class:`LabeledCloud` with ``N`` points carries an ``(N, 3)``
coordinate array plus per-point intensity, ring id and semantic label.
"""

from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

PathLike = str | os.PathLike

ORTHONORMAL_TOL = 1e-9
POSE_REPAIR_TOL = 1e-3


class MadlError(Exception):
    """Base class for all pipeline errors."""


class MalformedFileError(MadlError):
    pass


class PoseParseError(MadlError):
    pass


class InvalidPoseError(MadlError):
    pass


class CalibFormatError(MadlError):
    pass


class InvalidCalibError(MadlError):
    pass


class Label(enum.IntEnum):
    OTHER = 0
    GROUND = 1
    DRIVABLE = 2
    CURB_LEFT = 3
    CURB_RIGHT = 4


CURB_LABELS = (Label.CURB_LEFT, Label.CURB_RIGHT)
MAP_LABELS = (Label.DRIVABLE, Label.CURB_LEFT, Label.CURB_RIGHT)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# Rigid transforms
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PoseSE3:
    """Rigid transform ``p -> R p + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise InvalidPoseError("pose contains non-finite values")
        if np.abs(r.T @ r - np.eye(3)).max() > ORTHONORMAL_TOL or abs(np.linalg.det(r) - 1.0) > ORTHONORMAL_TOL:
            raise InvalidPoseError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", _frozen(r))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> PoseSE3:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> PoseSE3:
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_xyz_rpy(cls, x=0.0, y=0.0, z=0.0, roll=0.0, pitch=0.0, yaw=0.0) -> PoseSE3:
        return cls(rpy_to_matrix(roll, pitch, yaw), [x, y, z])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> PoseSE3:
        rt = self.rotation.T
        return PoseSE3(rt, -rt @ self.translation)

    def apply(self, xyz: np.ndarray) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=np.float64)
        return xyz @ self.rotation.T + self.translation

    def __matmul__(self, other: PoseSE3) -> PoseSE3:
        return compose(self, other)

    def __repr__(self):
        return f"PoseSE3(t={self.translation.tolist()}, yaw={math.degrees(self.yaw):.4f}deg)"

    @property
    def yaw(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])


def rpy_to_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    return rz @ ry @ rx


def rotvec_to_matrix(w: np.ndarray) -> np.ndarray:
    """Rodrigues' formula."""
    w = np.asarray(w, dtype=np.float64)
    theta = float(np.linalg.norm(w))
    if theta < 1e-15:
        return np.eye(3)
    k = w / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(theta) * kx + (1 - math.cos(theta)) * (kx @ kx)


def rotation_angle(r: np.ndarray) -> float:
    """Angle (radians) of the rotation ``r``."""
    c = (np.trace(r) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, c)))


def nearest_rotation(m: np.ndarray) -> np.ndarray:
    """Project a 3x3 matrix onto SO(3) (Frobenius-nearest)."""
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    """``a ∘ b``: apply ``b`` first, then ``a``."""
    r = a.rotation @ b.rotation
    t = a.rotation @ b.translation + a.translation
    # Products of rotations drift by ~1e-16 per step; keep long chains valid.
    if np.abs(r.T @ r - np.eye(3)).max() > 1e-12:
        r = nearest_rotation(r)
    return PoseSE3(r, t)


# ---------------------------------------------------------------------------
# Sensor description
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CameraIntrinsics:
    fu: float
    fv: float
    cu: float
    cv: float
    bx: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fu > 0 and self.fv > 0):
            raise InvalidCalibError("focal lengths must be positive")
        if not (0 <= self.cu < self.width and 0 <= self.cv < self.height):
            raise InvalidCalibError("principal point outside the image")

    @property
    def p_rect(self) -> np.ndarray:
        return np.array(
            [
                [self.fu, 0.0, self.cu, -self.fu * self.bx],
                [0.0, self.fv, self.cv, 0.0],
                [0.0, 0.0, 1.0, 0.0],
            ]
        )


@dataclass(frozen=True)
class Extrinsics:
    lidar_to_camera: PoseSE3


@dataclass(frozen=True)
class LidarGeometry:
    sensor_height: float
    horizontal_resolution: float
    ring_elevations: tuple[float, ...]

    def __post_init__(self):
        el = tuple(float(e) for e in self.ring_elevations)
        object.__setattr__(self, "ring_elevations", el)
        if self.horizontal_resolution <= 0:
            raise ValueError("horizontal_resolution must be positive")
        if len(el) < 1:
            raise ValueError("at least one ring is required")
        d = np.diff(el)
        if len(el) > 1 and not (np.all(d > 0) or np.all(d < 0)):
            raise ValueError("ring_elevations must be strictly monotone")

    @property
    def num_rings(self) -> int:
        return len(self.ring_elevations)

    @classmethod
    def default(cls) -> LidarGeometry:
        """32 rings between -25 and +3 degrees, 0.2 degree azimuth step, 1.73 m high."""
        return cls(
            sensor_height=1.73,
            horizontal_resolution=math.radians(0.2),
            ring_elevations=tuple(np.radians(np.linspace(-25.0, 3.0, 32))),
        )


# ---------------------------------------------------------------------------
# Point clouds
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LabeledCloud:
    xyz: np.ndarray
    intensity: np.ndarray = None
    ring: np.ndarray = None
    labels: np.ndarray = None
    frame_id: int = 0
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        xyz = np.array(self.xyz, dtype=np.float64).reshape(-1, 3)
        n = len(xyz)
        if not np.all(np.isfinite(xyz)):
            raise ValueError("point coordinates must be finite")
        inten = np.zeros(n) if self.intensity is None else np.array(self.intensity, dtype=np.float64).reshape(n)
        ring = np.zeros(n, np.int32) if self.ring is None else np.array(self.ring, dtype=np.int32).reshape(n)
        labels = (
            np.full(n, Label.OTHER, np.uint8) if self.labels is None else np.array(self.labels, dtype=np.uint8).reshape(n)
        )
        object.__setattr__(self, "xyz", _frozen(xyz))
        object.__setattr__(self, "intensity", _frozen(inten))
        object.__setattr__(self, "ring", _frozen(ring))
        object.__setattr__(self, "labels", _frozen(labels))

    def __len__(self):
        return len(self.xyz)

    @classmethod
    def empty(cls, frame_id: int = 0) -> LabeledCloud:
        return cls(np.zeros((0, 3)), frame_id=frame_id)

    def subset(self, mask_or_index) -> LabeledCloud:
        return LabeledCloud(
            self.xyz[mask_or_index],
            self.intensity[mask_or_index],
            self.ring[mask_or_index],
            self.labels[mask_or_index],
            self.frame_id,
            dict(self.diagnostics),
        )

    def with_labels(self, labels) -> LabeledCloud:
        return replace(self, labels=np.asarray(labels, dtype=np.uint8), diagnostics=dict(self.diagnostics))

    def with_xyz(self, xyz) -> LabeledCloud:
        return replace(self, xyz=xyz, diagnostics=dict(self.diagnostics))

    def select(self, *labels: int) -> LabeledCloud:
        return self.subset(np.isin(self.labels, list(labels)))

    @staticmethod
    def concat(clouds: list[LabeledCloud], frame_id: int = 0) -> LabeledCloud:
        if not clouds:
            return LabeledCloud.empty(frame_id)
        return LabeledCloud(
            np.concatenate([c.xyz for c in clouds]),
            np.concatenate([c.intensity for c in clouds]),
            np.concatenate([c.ring for c in clouds]),
            np.concatenate([c.labels for c in clouds]),
            frame_id,
        )


def transform_cloud(cloud: LabeledCloud, pose: PoseSE3) -> LabeledCloud:
    return cloud.with_xyz(pose.apply(cloud.xyz))


def elevation_angles(xyz: np.ndarray) -> np.ndarray:
    return np.arctan2(xyz[:, 2], np.hypot(xyz[:, 0], xyz[:, 1]))


def assign_rings(cloud: LabeledCloud, geom: LidarGeometry) -> LabeledCloud:
    """Assign each point to the ring with the nearest elevation.

    Ties go to the lower ring index. Points at the sensor origin get ring 0
    and are counted in ``diagnostics["origin_points"]``.
    """
    el = np.asarray(geom.ring_elevations)
    order = np.argsort(el, kind="stable")
    sorted_el = el[order]
    elev = elevation_angles(cloud.xyz)
    if len(sorted_el) == 1:
        ring = np.zeros(len(cloud), np.int32)
    else:
        hi = np.clip(np.searchsorted(sorted_el, elev), 1, len(sorted_el) - 1)
        lo = hi - 1
        d_lo = np.abs(elev - sorted_el[lo])
        d_hi = np.abs(sorted_el[hi] - elev)
        idx_lo, idx_hi = order[lo], order[hi]
        pick_lo = (d_lo < d_hi) | ((d_lo == d_hi) & (idx_lo < idx_hi))
        ring = np.where(pick_lo, idx_lo, idx_hi).astype(np.int32)
    at_origin = np.all(cloud.xyz == 0.0, axis=1)
    ring[at_origin] = 0
    diag = dict(cloud.diagnostics)
    diag["origin_points"] = int(at_origin.sum())
    return replace(cloud, ring=ring, diagnostics=diag)


def crop_forward(cloud: LabeledCloud, limit: float = 30.0) -> LabeledCloud:
    """Keep points with ``0 < x <= limit``."""
    if limit <= 0:
        raise ValueError("limit must be positive")
    x = cloud.xyz[:, 0]
    return cloud.subset((x > 0) & (x <= limit))


# ---------------------------------------------------------------------------
# File IO
# ---------------------------------------------------------------------------

_SCAN_DTYPE = np.dtype("<f4")


def read_scan_raw(path: PathLike) -> np.ndarray:
    """Raw ``(N, 4)`` float32 records of a velodyne ``.bin`` file."""
    data = Path(path).read_bytes()
    if len(data) % 16:
        raise MalformedFileError(f"{path}: size {len(data)} is not a multiple of 16 bytes")
    return np.frombuffer(data, dtype=_SCAN_DTYPE).reshape(-1, 4)


def load_scan_bin(path: PathLike, geom: LidarGeometry | None = None, frame_id: int = 0) -> LabeledCloud:
    raw = read_scan_raw(path)
    cloud = LabeledCloud(raw[:, :3].astype(np.float64), raw[:, 3].astype(np.float64), frame_id=frame_id)
    return assign_rings(cloud, geom or LidarGeometry.default())


def write_scan_bin(path: PathLike, cloud: LabeledCloud) -> None:
    raw = np.empty((len(cloud), 4), dtype=_SCAN_DTYPE)
    raw[:, :3] = cloud.xyz
    raw[:, 3] = cloud.intensity
    Path(path).write_bytes(raw.tobytes())


def _parse_pose_tokens(values: np.ndarray, where: str) -> PoseSE3:
    m = values.reshape(3, 4)
    r, t = m[:, :3], m[:, 3]
    if not np.all(np.isfinite(m)):
        raise InvalidPoseError(f"{where}: non-finite values")
    if np.linalg.det(r) <= 0:
        raise InvalidPoseError(f"{where}: rotation has non-positive determinant")
    drift = np.abs(r.T @ r - np.eye(3)).max()
    if drift > POSE_REPAIR_TOL:
        raise InvalidPoseError(f"{where}: rotation is not orthonormal (drift {drift:.3g})")
    # Anything PoseSE3 would reject (including the >1e-6 drift of rounded
    # text files) is projected onto SO(3).
    if drift > ORTHONORMAL_TOL or abs(np.linalg.det(r) - 1) > ORTHONORMAL_TOL:
        r = nearest_rotation(r)
    return PoseSE3(r, t)


def load_poses(path: PathLike) -> list[PoseSE3]:
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        tokens = line.split()
        if len(tokens) != 12:
            raise PoseParseError(f"{path}:{lineno}: expected 12 values, found {len(tokens)}")
        try:
            values = np.array([float(tok) for tok in tokens])
        except ValueError as exc:
            raise PoseParseError(f"{path}:{lineno}: {exc}") from None
        poses.append(_parse_pose_tokens(values, f"{path}:{lineno}"))
    return poses


def format_pose(pose: PoseSE3) -> str:
    # repr() of a float is the shortest string that round-trips exactly.
    return " ".join(repr(float(v)) for v in pose.matrix[:3, :4].ravel())


def write_poses(path: PathLike, poses: list[PoseSE3]) -> None:
    Path(path).write_text("".join(format_pose(p) + "\n" for p in poses))


def _read_calib_keys(path: PathLike) -> dict[str, np.ndarray]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if ":" not in line:
            continue
        key, _, rest = line.partition(":")
        try:
            out[key.strip()] = np.array([float(v) for v in rest.split()])
        except ValueError:
            continue
    return out


def load_calib(path: PathLike, width: int = 1242, height: int = 375) -> tuple[CameraIntrinsics, Extrinsics]:
    """Read ``P_rect`` and ``Tr_lidar_to_cam`` from a KITTI-style calib file.

    Image size is taken from optional ``image_size: W H`` line, else the
    given defaults.
    """
    keys = _read_calib_keys(path)
    for k in ("P_rect", "Tr_lidar_to_cam"):
        if k not in keys:
            raise CalibFormatError(f"{path}: missing key {k!r}")
        if len(keys[k]) != 12:
            raise CalibFormatError(f"{path}: {k} needs 12 values, found {len(keys[k])}")
    if "image_size" in keys and len(keys["image_size"]) == 2:
        width, height = (int(v) for v in keys["image_size"])
    p = keys["P_rect"].reshape(3, 4)
    fu, fv, cu, cv = p[0, 0], p[1, 1], p[0, 2], p[1, 2]
    intr = CameraIntrinsics(float(fu), float(fv), float(cu), float(cv), float(-p[0, 3] / fu), width, height)
    tr = keys["Tr_lidar_to_cam"].reshape(3, 4)
    r = tr[:, :3]
    if np.linalg.det(r) <= 0 or np.abs(r.T @ r - np.eye(3)).max() > POSE_REPAIR_TOL:
        raise InvalidCalibError(f"{path}: Tr_lidar_to_cam rotation is not orthonormal")
    return intr, Extrinsics(PoseSE3(nearest_rotation(r), tr[:, 3]))


def write_calib(path: PathLike, intr: CameraIntrinsics, extr: Extrinsics) -> None:
    def row(a):
        return " ".join(repr(float(v)) for v in np.ravel(a))

    lines = [
        f"P_rect: {row(intr.p_rect)}",
        f"Tr_lidar_to_cam: {row(extr.lidar_to_camera.matrix[:3, :4])}",
        f"image_size: {intr.width} {intr.height}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")
