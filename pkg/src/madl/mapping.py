"""Global semantic map: voxel accumulation, scan-to-map registration, queries."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geometry import (
    CURB_LABELS,
    MAP_LABELS,
    LabeledCloud,
    MadlError,
    MalformedFileError,
    PathLike,
    PoseSE3,
    rotvec_to_matrix,
)

log = logging.getLogger(__name__)


class MapFormatError(MalformedFileError):
    pass


class MapTruncatedError(MalformedFileError, OSError):
    pass


class NoOverlapError(MadlError):
    pass


class DivergenceError(MadlError):
    pass


# ---------------------------------------------------------------------------
# Map
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class SemanticMap:
    """One representative (centroid, majority label) per occupied voxel.

    Cells are kept sorted by voxel key so that files written from equal maps
    are byte-identical. Centroids are stored at float32 precision.
    """

    voxel_size: float
    points: np.ndarray  # (N, 3) float64, float32-representable
    labels: np.ndarray  # (N,) uint8
    frame_count: int = 0
    keys: np.ndarray = field(init=False)  # (N, 3) int64, derived from points
    _tree: cKDTree | None = field(default=None, init=False, repr=False)
    _label_trees: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        pts = np.asarray(self.points, np.float32).astype(np.float64).reshape(-1, 3)
        labels = np.asarray(self.labels, np.uint8).reshape(-1)
        if len(pts) != len(labels):
            raise ValueError("points and labels must have equal length")
        keys = np.floor(pts / self.voxel_size).astype(np.int64)
        order = np.lexsort(keys.T[::-1]) if len(keys) else np.zeros(0, int)
        self.points, self.labels, self.keys = pts[order], labels[order], keys[order]
        self._tree = cKDTree(self.points) if len(self.points) else None
        self._label_trees = {}

    def __len__(self):
        return len(self.points)

    @property
    def tree(self) -> cKDTree | None:
        return self._tree

    def label_tree(self, label: int) -> tuple[cKDTree | None, np.ndarray]:
        """KD-tree over the cells of one class plus the cell indices it covers."""
        if label not in self._label_trees:
            idx = np.flatnonzero(self.labels == label)
            self._label_trees[label] = (cKDTree(self.points[idx]) if len(idx) else None, idx)
        return self._label_trees[label]

    @property
    def cells(self) -> dict[tuple[int, int, int], tuple[np.ndarray, int]]:
        return {tuple(k): (p, int(lbl)) for k, p, lbl in zip(self.keys.tolist(), self.points, self.labels)}

    @classmethod
    def empty(cls, voxel_size: float = 0.2) -> SemanticMap:
        return cls(voxel_size, np.zeros((0, 3)), np.zeros(0, np.uint8))


def voxelize(xyz: np.ndarray, labels: np.ndarray, voxel_size: float, vote_weights: dict | None = None):
    """Group points by voxel: sorted keys, centroids, majority labels.

    ``vote_weights`` maps label -> weight of one vote (default 1). Label ties
    resolve to the smallest label id.
    """
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    labels = np.asarray(labels, dtype=np.uint8)
    if len(xyz) == 0:
        return np.zeros((0, 3), np.int64), np.zeros((0, 3)), np.zeros(0, np.uint8)
    keys = np.floor(xyz / voxel_size).astype(np.int64)
    ukeys, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.ravel()
    n = len(ukeys)
    counts = np.bincount(inv, minlength=n).astype(np.float64)
    cent = np.stack([np.bincount(inv, weights=xyz[:, i], minlength=n) for i in range(3)], axis=1) / counts[:, None]
    w = np.ones(256)
    for lbl, wt in (vote_weights or {}).items():
        w[int(lbl)] = wt
    votes = np.zeros((n, 256))
    np.add.at(votes, (inv, labels), w[labels])
    return ukeys, cent, votes.argmax(axis=1).astype(np.uint8)


def build_map(
    frames: list[tuple[LabeledCloud, PoseSE3]], voxel_size: float = 0.2, curb_vote_weight: float = 1.0
) -> SemanticMap:
    """Accumulate drivable and curb points of every frame in the map frame.

    Curb returns are few next to the road returns sharing their voxels, so
    each curb vote may count ``curb_vote_weight`` times in the label vote.
    """
    pts, lbls = [], []
    for cloud, pose in frames:
        keep = np.isin(cloud.labels, MAP_LABELS)
        pts.append(pose.apply(cloud.xyz[keep]))
        lbls.append(cloud.labels[keep])
    if not pts or sum(len(p) for p in pts) == 0:
        log.warning("build_map: no drivable or curb points; map is empty")
        m = SemanticMap.empty(voxel_size)
        m.frame_count = len(frames)
        return m
    weights = {lbl: curb_vote_weight for lbl in CURB_LABELS}
    _, cent, lab = voxelize(np.concatenate(pts), np.concatenate(lbls), voxel_size, weights)
    return SemanticMap(voxel_size, cent, lab, frame_count=len(frames))


def build_map_from_lists(clouds: list[LabeledCloud], poses: list[PoseSE3], voxel_size: float = 0.2) -> SemanticMap:
    if len(clouds) != len(poses):
        raise ValueError(f"{len(clouds)} frames but {len(poses)} poses")
    return build_map(list(zip(clouds, poses)), voxel_size)


def query_region(
    semantic_map: SemanticMap, pose: PoseSE3, radius: float, classes=None, frame_id: int = 0
) -> LabeledCloud:
    """Map cells of ``classes`` within ``radius`` of the pose, in the sensor frame."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    if len(semantic_map) == 0:
        return LabeledCloud.empty(frame_id)
    d = np.linalg.norm(semantic_map.points - pose.translation, axis=1)
    keep = d <= radius
    if classes is not None:
        keep &= np.isin(semantic_map.labels, [int(c) for c in classes])
    xyz = pose.inverse().apply(semantic_map.points[keep])
    return LabeledCloud(xyz, labels=semantic_map.labels[keep], frame_id=frame_id)


# ---------------------------------------------------------------------------
# Registration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegistrationConfig:
    max_correspondence_dist: float = 1.0
    max_iterations: int = 60
    translation_eps: float = 1e-5
    rotation_eps: float = 1e-6
    weight_scheme: str = "constant"  # or "huber"
    huber_delta: float = 0.1
    # Pair each scan point only with map cells of the same class.
    match_labels: bool = True
    # Class factor in the weight of curb correspondences. Ring returns on the
    # road surface repeat every azimuth step, so on their own they leave a
    # comb of near-equal minima in yaw; the curbs break that symmetry.
    curb_weight: float = 10.0

    def __post_init__(self):
        if min(self.max_correspondence_dist, self.translation_eps, self.rotation_eps, self.huber_delta,
               self.curb_weight) <= 0:
            raise ValueError("registration tolerances must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.weight_scheme not in ("constant", "huber"):
            raise ValueError(f"unknown weight scheme {self.weight_scheme!r}")


@dataclass
class RegistrationResult:
    pose: PoseSE3
    rms_residual: float
    iterations_used: int
    converged: bool
    inlier_fraction: float
    history: list = field(default_factory=list)  # truncated cost after each iteration


def _correspondences(xyz, labels, semantic_map: SemanticMap, cfg: RegistrationConfig):
    """Nearest map cell per point (``inf`` distance when outside the gate)."""
    gate = cfg.max_correspondence_dist
    d = np.full(len(xyz), np.inf)
    q = np.zeros_like(xyz)
    if cfg.match_labels:
        for lbl in np.unique(labels):
            tree, cell_idx = semantic_map.label_tree(int(lbl))
            if tree is None:
                continue
            sel = np.flatnonzero(labels == lbl)
            dd, ii = tree.query(xyz[sel], distance_upper_bound=gate)
            ok = np.isfinite(dd)
            d[sel[ok]] = dd[ok]
            q[sel[ok]] = semantic_map.points[cell_idx[ii[ok]]]
    else:
        dd, ii = semantic_map.tree.query(xyz, distance_upper_bound=gate)
        ok = np.isfinite(dd)
        d[ok] = dd[ok]
        q[ok] = semantic_map.points[ii[ok]]
    return d, q


def _cost(d: np.ndarray, gate: float, cw: np.ndarray) -> float:
    """Class-weighted truncated squared residual; monotone under the guarded update."""
    t = np.minimum(d, gate)
    return float(cw @ (t * t))


def _class_weights(labels: np.ndarray, cfg: RegistrationConfig) -> np.ndarray:
    return np.where(np.isin(labels, CURB_LABELS), cfg.curb_weight, 1.0)


def _weights(d: np.ndarray, cfg: RegistrationConfig) -> np.ndarray:
    if cfg.weight_scheme == "huber":
        return np.where(d <= cfg.huber_delta, 1.0, cfg.huber_delta / np.maximum(d, 1e-300))
    return np.ones_like(d)


def _solve_update(p, q, w):
    """Small-angle weighted least-squares step about the weighted centroid."""
    c = (w[:, None] * p).sum(axis=0) / w.sum()
    pc = p - c
    r = p - q
    # d/d(omega) of (omega x pc) is -[pc]_x
    j = np.zeros((len(p), 3, 6))
    j[:, 0, 1], j[:, 0, 2] = pc[:, 2], -pc[:, 1]
    j[:, 1, 0], j[:, 1, 2] = -pc[:, 2], pc[:, 0]
    j[:, 2, 0], j[:, 2, 1] = pc[:, 1], -pc[:, 0]
    j[:, :, 3:] = np.eye(3)
    j = j.reshape(-1, 6)
    wj = np.repeat(w, 3)[:, None] * j
    h = j.T @ wj
    g = wj.T @ r.ravel()
    # Tiny damping keeps the solve finite when the geometry leaves a degree
    # of freedom unconstrained (e.g. a perfectly planar overlap).
    h += 1e-9 * np.trace(h) * np.eye(6) / 6
    x = -np.linalg.solve(h, g)
    return x[:3], x[3:], c


def _step_pose(omega, dt, c, scale) -> PoseSE3:
    r = rotvec_to_matrix(scale * omega)
    return PoseSE3(r, c + scale * dt - r @ c)


def register_scan(
    scan: LabeledCloud, semantic_map: SemanticMap, initial: PoseSE3, cfg: RegistrationConfig | None = None
) -> RegistrationResult:
    """Refine ``initial`` (sensor-to-map) by iterated weighted least squares.

    Only scan points whose label is a map class take part when
    ``match_labels`` is on. Each step is halved until the truncated cost
    does not increase, so the cost history is non-increasing.
    """
    cfg = cfg or RegistrationConfig()
    if len(semantic_map) == 0:
        raise NoOverlapError("map is empty")
    if cfg.match_labels:
        use = np.isin(scan.labels, np.unique(semantic_map.labels))
        if not use.any():
            raise NoOverlapError("scan has no points of any map class")
        src, src_labels = scan.xyz[use], scan.labels[use]
    else:
        src, src_labels = scan.xyz, scan.labels
    gate = cfg.max_correspondence_dist
    cw = _class_weights(src_labels, cfg)
    pose = initial
    cur = pose.apply(src)
    d, q = _correspondences(cur, src_labels, semantic_map, cfg)
    cost = _cost(d, gate, cw)
    history = [cost]
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        ok = np.isfinite(d)
        if not ok.any():
            raise NoOverlapError(f"no correspondences within {gate} m at iteration {it}")
        omega, dt, c = _solve_update(cur[ok], q[ok], cw[ok] * _weights(d[ok], cfg))
        if not (np.all(np.isfinite(omega)) and np.all(np.isfinite(dt))):
            raise DivergenceError(f"non-finite update at iteration {it}")
        scale, accepted = 1.0, False
        for _ in range(20):
            step = _step_pose(omega, dt, c, scale)
            cand = step @ pose
            cand_pts = cand.apply(src)
            nd, nq = _correspondences(cand_pts, src_labels, semantic_map, cfg)
            ncost = _cost(nd, gate, cw)
            if ncost <= cost:
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            converged = True
            break
        pose, cur, d, q, cost = cand, cand_pts, nd, nq, ncost
        history.append(cost)
        if np.linalg.norm(scale * dt) < cfg.translation_eps and np.linalg.norm(scale * omega) < cfg.rotation_eps:
            converged = True
            break
    ok = np.isfinite(d)
    rms = math.sqrt(cost / cw.sum()) if len(src) else 0.0
    return RegistrationResult(pose, rms, it, converged, float(ok.mean()) if len(ok) else 0.0, history)


# ---------------------------------------------------------------------------
# PLY persistence
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "uchar": "u1", "short": "<i2", "ushort": "<u2", "int": "<i4", "uint": "<u4",
    "float": "<f4", "double": "<f8", "int8": "i1", "uint8": "u1", "int16": "<i2", "uint16": "<u2",
    "int32": "<i4", "uint32": "<u4", "float32": "<f4", "float64": "<f8",
}


def save_map(semantic_map: SemanticMap, path: PathLike) -> None:
    """Binary little-endian PLY: float32 x, y, z and uint8 label per vertex."""
    n = len(semantic_map)
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"comment voxel_size {semantic_map.voxel_size!r}\n"
        f"comment frame_count {semantic_map.frame_count}\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar label\n"
        "end_header\n"
    )
    rec = np.zeros(n, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("label", "u1")])
    for i, axis in enumerate("xyz"):
        rec[axis] = semantic_map.points[:, i]
    rec["label"] = semantic_map.labels
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(rec.tobytes())


def load_map(path: PathLike) -> SemanticMap:
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise MapFormatError(f"{path}: not a PLY file")
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    payload = data[end + len(b"end_header\n") :]
    voxel_size, frame_count, n, props, fmt = None, 0, None, [], None
    for line in lines[1:]:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "comment" and len(tok) >= 3 and tok[1] == "voxel_size":
            voxel_size = float(tok[2])
        elif tok[0] == "comment" and len(tok) >= 3 and tok[1] == "frame_count":
            frame_count = int(tok[2])
        elif tok[0] == "element":
            if tok[1] != "vertex" or n is not None:
                raise MapFormatError(f"{path}: unexpected element {tok[1]!r}")
            n = int(tok[2])
        elif tok[0] == "property":
            if tok[1] == "list" or tok[1] not in _PLY_TYPES:
                raise MapFormatError(f"{path}: unsupported property {line!r}")
            props.append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt != "binary_little_endian":
        raise MapFormatError(f"{path}: format {fmt!r} is not binary_little_endian")
    names = [p[0] for p in props]
    for required in ("x", "y", "z", "label"):
        if required not in names:
            raise MapFormatError(f"{path}: missing vertex property {required!r}")
    if voxel_size is None:
        raise MapFormatError(f"{path}: header has no voxel_size comment")
    dtype = np.dtype(props)
    if n is None or len(payload) < n * dtype.itemsize:
        raise MapTruncatedError(f"{path}: payload truncated ({len(payload)} bytes for {n} vertices)")
    rec = np.frombuffer(payload, dtype=dtype, count=n)
    pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    labels = rec["label"].astype(np.uint8)
    return SemanticMap(voxel_size, pts, labels, frame_count=frame_count)
