"""Projection of map geometry into label space.

Drivable points retrieved from the map are projected through the rectified
camera model, wrapped in a k-nearest-neighbour concave hull and rasterized into
a binary mask. Curb points stay in 3D and become per-point ``.label`` files.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial import ConvexHull, cKDTree

from .geometry import (
    CURB_LABELS,
    CameraIntrinsics,
    Extrinsics,
    Label,
    LabeledCloud,
    MadlError,
    PathLike,
    PoseSE3,
)


class DegenerateInputError(MadlError):
    pass


@dataclass(frozen=True, eq=False)
class Projection:
    """Projected points: ``uv`` (M, 2) pixels, camera depth and source index."""

    uv: np.ndarray
    depth: np.ndarray
    index: np.ndarray

    def __len__(self):
        return len(self.uv)


@dataclass(frozen=True, eq=False)
class LabelMask:
    values: np.ndarray  # (height, width) uint8, 0 or 255

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @classmethod
    def zeros(cls, width: int, height: int) -> LabelMask:
        return cls(np.zeros((height, width), np.uint8))

    @property
    def positive(self) -> np.ndarray:
        return self.values > 0


def project_points(points: LabeledCloud | np.ndarray, intr: CameraIntrinsics, extr: Extrinsics) -> Projection:
    """Pinhole projection of sensor-frame points into the rectified image.

    Points behind the camera (``z_c <= 1e-6``) or outside the image are
    dropped.
    """
    xyz = points.xyz if isinstance(points, LabeledCloud) else np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam = extr.lidar_to_camera.apply(xyz)
    z = cam[:, 2]
    front = z > 1e-6
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fu * (cam[:, 0] - intr.bx) / z + intr.cu
        v = intr.fv * cam[:, 1] / z + intr.cv
    keep = front & (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
    idx = np.flatnonzero(keep)
    return Projection(np.stack([u[idx], v[idx]], axis=1), z[idx], idx)


def project_homogeneous(xh: np.ndarray, intr: CameraIntrinsics, extr: Extrinsics) -> np.ndarray:
    """``y = P_rect @ T @ x`` for homogeneous LiDAR points, returning (u, v)."""
    y = intr.p_rect @ extr.lidar_to_camera.matrix @ np.asarray(xh, dtype=np.float64).T
    return (y[:2] / y[2]).T


# ---------------------------------------------------------------------------
# Point-in-polygon primitives shared by the hull check and the rasterizer
# ---------------------------------------------------------------------------


def _edges(poly: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    poly = np.asarray(poly, dtype=np.float64)
    return poly, np.roll(poly, -1, axis=0)


def points_in_polygon(pts: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd membership; points on the boundary count as inside."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    a, b = _edges(poly)
    px, py = pts[:, 0], pts[:, 1]
    inside = np.zeros(len(pts), bool)
    border = np.zeros(len(pts), bool)
    chunk = max(1, 2_000_000 // max(len(pts), 1))
    for s in range(0, len(a), chunk):
        ax, ay = a[s : s + chunk, 0:1], a[s : s + chunk, 1:2]
        bx, by = b[s : s + chunk, 0:1], b[s : s + chunk, 1:2]
        flat = (ay == by).ravel()
        if flat.any():
            fx0, fx1 = np.minimum(ax[flat], bx[flat]), np.maximum(ax[flat], bx[flat])
            border |= ((py == ay[flat]) & (px >= fx0) & (px <= fx1)).any(axis=0)
        sl = ~flat
        ax, ay, bx, by = ax[sl], ay[sl], bx[sl], by[sl]
        x_at = ax + (py - ay) * (bx - ax) / (by - ay)
        spans = (ay > py) != (by > py)
        inside ^= np.logical_xor.reduce(spans & (px < x_at), axis=0)
        border |= ((py >= np.minimum(ay, by)) & (py <= np.maximum(ay, by)) & (x_at == px)).any(axis=0)
    return inside | border


def rasterize_mask(polygon: np.ndarray, width: int, height: int) -> LabelMask:
    """Fill pixels whose centers are inside ``polygon`` (even-odd, border inclusive)."""
    values = np.zeros((height, width), np.uint8)
    poly = np.asarray(polygon, dtype=np.float64).reshape(-1, 2)
    if len(poly) < 3:
        return LabelMask(values)
    a, b = _edges(poly)
    ymin, ymax = np.minimum(a[:, 1], b[:, 1]), np.maximum(a[:, 1], b[:, 1])
    horiz = a[:, 1] == b[:, 1]
    centers = np.arange(width) + 0.5
    j0 = max(0, int(math.floor(ymin.min() - 0.5)))
    j1 = min(height - 1, int(math.ceil(ymax.max() - 0.5)))
    for j in range(j0, j1 + 1):
        py = j + 0.5
        near = (ymin <= py) & (ymax >= py)
        if not near.any():
            continue
        ea, eb = a[near], b[near]
        hz = horiz[near]
        row = np.zeros(width, bool)
        sl = ~hz
        if sl.any():
            ax, ay, bx, by = ea[sl, 0], ea[sl, 1], eb[sl, 0], eb[sl, 1]
            x_at = ax + (py - ay) * (bx - ax) / (by - ay)
            spans = (ay > py) != (by > py)
            xs = np.sort(x_at[spans])
            greater = len(xs) - np.searchsorted(xs, centers, side="right")
            row = (greater % 2) == 1
            # Centers lying exactly on a sloped edge.
            on = x_at - 0.5
            hit = (on == np.floor(on)) & (on >= 0) & (on < width)
            row[on[hit].astype(int)] = True
        # Horizontal edges that survive the span filter lie exactly on this row.
        for (hax, _), (hbx, _) in zip(ea[hz], eb[hz]):
            lo, hi = min(hax, hbx), max(hax, hbx)
            row |= (centers >= lo) & (centers <= hi)
        values[j, row] = 255
    return LabelMask(values)


# ---------------------------------------------------------------------------
# Concave hull
# ---------------------------------------------------------------------------


def _cross(o, a, b):
    return (a[..., 0] - o[..., 0]) * (b[..., 1] - o[..., 1]) - (a[..., 1] - o[..., 1]) * (b[..., 0] - o[..., 0])


def _crosses_any(p, qs, ea, eb) -> np.ndarray:
    """For candidate edges p->q, whether each properly crosses any edge ea->eb."""
    if len(ea) == 0:
        return np.zeros(len(qs), bool)
    p = np.broadcast_to(p, qs.shape)
    P, Q = p[:, None, :], qs[:, None, :]
    A, B = ea[None, :, :], eb[None, :, :]
    # Cheap bounding-box rejection first.
    overlap = (
        (np.minimum(P[..., 0], Q[..., 0]) <= np.maximum(A[..., 0], B[..., 0]))
        & (np.minimum(A[..., 0], B[..., 0]) <= np.maximum(P[..., 0], Q[..., 0]))
        & (np.minimum(P[..., 1], Q[..., 1]) <= np.maximum(A[..., 1], B[..., 1]))
        & (np.minimum(A[..., 1], B[..., 1]) <= np.maximum(P[..., 1], Q[..., 1]))
    )
    if not overlap.any():
        return np.zeros(len(qs), bool)
    d1 = _cross(A, B, P)
    d2 = _cross(A, B, Q)
    d3 = _cross(P, Q, A)
    d4 = _cross(P, Q, B)
    proper = (d1 * d2 < 0) & (d3 * d4 < 0)
    return (overlap & proper).any(axis=1)


def _walk(pts: np.ndarray, tree: cKDTree, k: int) -> np.ndarray | None:
    n = len(pts)
    available = np.ones(n, bool)
    first = int(np.lexsort((pts[:, 0], pts[:, 1]))[0])
    hull = np.empty(n + 1, np.intp)
    hull[0] = first
    size = 1
    # Per-edge bounding boxes (edge i joins hull[i] and hull[i + 1]).
    lo = np.empty((n + 1, 2))
    hi = np.empty((n + 1, 2))
    available[first] = False
    remaining = n - 1
    current = first
    back_angle = math.pi  # pretend we arrived heading +x
    q = min(n, 2 * k + 8)
    while True:
        if size == 4:
            available[first] = True
            remaining += 1
        if remaining == 0:
            return None
        want = min(k, remaining)
        while True:
            dist, idx = tree.query(pts[current], k=q)
            dist, idx = np.atleast_1d(dist), np.atleast_1d(idx)
            keep = idx < n
            dist, idx = dist[keep], idx[keep]
            # Equal distances are common on the pixel lattice; break ties by index.
            idx = idx[np.lexsort((idx, dist))]
            cand = idx[available[idx]][:want]
            if len(cand) >= want or q >= n:
                break
            q = min(n, 2 * q)
        if len(cand) == 0:
            return None
        vec = pts[cand] - pts[current]
        ang = np.arctan2(vec[:, 1], vec[:, 0])
        cw = np.mod(back_angle - ang, 2 * math.pi)
        order = np.argsort(-cw, kind="stable")
        cand, ang = cand[order], ang[order]
        # The edge ending at `current` is adjacent and never counts; of the
        # rest only edges overlapping the candidate fan can cross.
        m = max(size - 2, 0)
        fan = pts[cand]
        fmax = np.maximum(fan.max(axis=0), pts[current])
        fmin = np.minimum(fan.min(axis=0), pts[current])
        near = np.flatnonzero((lo[:m] <= fmax).all(axis=1) & (hi[:m] >= fmin).all(axis=1))
        if len(near):
            ea, eb = pts[hull[near]], pts[hull[near + 1]]
            crosses = _crosses_any(pts[current], fan, ea, eb)
            closing = cand == first
            if closing.any():
                # Closing edge shares its endpoint with the first hull edge.
                keep = near != 0
                crosses[closing] = _crosses_any(pts[current], pts[cand[closing]], ea[keep], eb[keep])
            ok = np.flatnonzero(~crosses)
            if len(ok) == 0:
                return None
            pick = ok[0]
        else:
            pick = 0
        nxt = int(cand[pick])
        back_angle = float(ang[pick]) + math.pi
        if nxt == first:
            return hull[:size].copy()
        lo[size - 1] = np.minimum(pts[current], pts[nxt])
        hi[size - 1] = np.maximum(pts[current], pts[nxt])
        hull[size] = nxt
        size += 1
        available[nxt] = False
        remaining -= 1
        current = nxt
        if size > n:
            return None


def _is_simple(poly: np.ndarray) -> bool:
    a, b = _edges(poly)
    n = len(a)
    for i in range(n):
        # Skip the edge itself and its two neighbours.
        others = [j for j in range(n) if j not in (i, (i - 1) % n, (i + 1) % n)]
        if others and _crosses_any(a[i], b[i][None, :], a[others], b[others])[0]:
            return False
    return True


def concave_hull(
    pixels: np.ndarray | Projection, k: int = 12, max_k: int | None = None, contain: np.ndarray | None = None
) -> np.ndarray:
    """Concave hull by k-nearest-neighbour boundary walking.

    ``k`` is increased by one until the walk closes into a polygon that
    contains every input point. ``max_k`` caps the escalation (default: the
    number of distinct points); if the cap is reached the convex hull is
    returned, which always satisfies the containment requirement.
    ``contain`` adds points that must end up inside but are not hull
    candidates (their convex hull must lie within that of ``pixels``).

    Returns the polygon vertices in counter-clockwise order (y up), without
    repeating the first vertex.
    """
    pts = pixels.uv if isinstance(pixels, Projection) else np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    pts = np.unique(pts, axis=0)
    n = len(pts)
    if n < 3:
        raise DegenerateInputError(f"need at least 3 distinct points, got {n}")
    centered = pts - pts.mean(axis=0)
    if np.linalg.matrix_rank(centered, tol=1e-9 * max(1.0, np.abs(centered).max())) < 2:
        raise DegenerateInputError("points are collinear")
    if n == 3:
        return _ccw(pts)
    tree = cKDTree(pts)
    k = max(3, k)
    cap = n - 1 if max_k is None else min(max_k, n - 1)
    while k <= cap:
        idx = _walk(pts, tree, k)
        if idx is not None and len(idx) >= 3:
            poly = pts[idx]
            if points_in_polygon(pts, poly).all() and (contain is None or points_in_polygon(contain, poly).all()):
                return poly
        k += 1
    return pts[ConvexHull(pts).vertices]


def _ccw(poly: np.ndarray) -> np.ndarray:
    return poly if polygon_area(poly) >= 0 else poly[::-1]


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area (positive for counter-clockwise in y-up axes)."""
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def write_mask_png(path: PathLike, mask: LabelMask) -> None:
    Image.fromarray(mask.values, mode="L").save(path, format="PNG")


def read_mask_png(path: PathLike) -> LabelMask:
    values = np.asarray(Image.open(path).convert("L"))
    return LabelMask(np.where(values > 127, 255, 0).astype(np.uint8))


def write_label_file(path: PathLike, classes: np.ndarray) -> None:
    np.asarray(classes, dtype="<u4").tofile(path)


def read_label_file(path: PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) % 4:
        raise MadlError(f"{path}: size is not a multiple of 4 bytes")
    return np.frombuffer(data, dtype="<u4").copy()


def curb_point_classes(scan: LabeledCloud, curb_points: np.ndarray, tolerance: float = 0.2) -> np.ndarray:
    """Per scan point: 1 if a curb point lies within ``tolerance``, else 0."""
    classes = np.zeros(len(scan), np.uint32)
    curb_points = np.asarray(curb_points, dtype=np.float64).reshape(-1, 3)
    if len(curb_points) and len(scan):
        d, _ = cKDTree(curb_points).query(scan.xyz, k=1, distance_upper_bound=tolerance)
        classes[d <= tolerance] = 1
    return classes


def export_curb_labels(scan: LabeledCloud, curb_points: np.ndarray, tolerance: float, path: PathLike) -> np.ndarray:
    """Write a ``.label`` file (uint32 per scan point, low 16 bits = class)."""
    classes = curb_point_classes(scan, curb_points, tolerance)
    write_label_file(path, classes)
    return classes


def write_curb_points(path: PathLike, cloud: LabeledCloud) -> None:
    """Per-frame 3D curb points as JSON (sensor frame)."""
    doc = {
        "frame_id": int(cloud.frame_id),
        "left": cloud.xyz[cloud.labels == Label.CURB_LEFT].round(6).tolist(),
        "right": cloud.xyz[cloud.labels == Label.CURB_RIGHT].round(6).tolist(),
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def read_curb_points(path: PathLike) -> LabeledCloud:
    doc = json.loads(Path(path).read_text())
    left = np.asarray(doc["left"], dtype=np.float64).reshape(-1, 3)
    right = np.asarray(doc["right"], dtype=np.float64).reshape(-1, 3)
    labels = np.concatenate([np.full(len(left), Label.CURB_LEFT), np.full(len(right), Label.CURB_RIGHT)])
    return LabeledCloud(np.vstack([left, right]), labels=labels, frame_id=int(doc["frame_id"]))


# ---------------------------------------------------------------------------
# Per-frame label generation
# ---------------------------------------------------------------------------


@dataclass
class LabelParams:
    query_radius: float = 60.0
    hull_k: int = 12
    curb_tolerance: float = 0.2


@dataclass
class LabelArtifacts:
    frame_id: int
    mask: LabelMask | None
    curb_points: LabeledCloud
    curb_classes: np.ndarray | None = None
    skipped: str | None = None
    paths: dict = field(default_factory=dict)


def snap_to_pixels(uv: np.ndarray, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Distinct pixel centers hit by ``uv`` and the subset on the lattice boundary.

    A pixel is interior when all four edge neighbours are occupied too; such
    pixels cannot be concave-hull vertices at any useful ``k``.
    """
    ij = np.floor(uv).astype(np.int64)
    occ = np.zeros((height + 2, width + 2), bool)
    occ[ij[:, 1] + 1, ij[:, 0] + 1] = True
    interior = occ[1:-1, 1:-1] & occ[:-2, 1:-1] & occ[2:, 1:-1] & occ[1:-1, :-2] & occ[1:-1, 2:]
    v, u = np.nonzero(occ[1:-1, 1:-1])
    centers = np.column_stack([u, v]) + 0.5
    edge = ~interior[v, u]
    return centers, centers[edge]


def mask_from_points(points: LabeledCloud | np.ndarray, intr: CameraIntrinsics, extr: Extrinsics, k: int = 12):
    """Project, hull and rasterize; ``None`` when fewer than 3 pixels land in view.

    Projections are snapped to pixel centers before the hull, which moves them
    by at most half a pixel diagonal and bounds the hull input size.
    """
    proj = project_points(points, intr, extr)
    centers, edge = snap_to_pixels(proj.uv, intr.width, intr.height)
    if len(centers) < 3:
        return None
    try:
        poly = concave_hull(edge, k, contain=centers)
    except DegenerateInputError:
        return None
    return rasterize_mask(poly, intr.width, intr.height)


def generate_frame_labels(
    frame_id: int,
    pose: PoseSE3,
    semantic_map,
    calib: tuple[CameraIntrinsics, Extrinsics],
    params: LabelParams | None = None,
    scan: LabeledCloud | None = None,
    out_dir: PathLike | None = None,
) -> LabelArtifacts:
    """Query the map around ``pose`` and turn the result into label artifacts.

    With ``out_dir`` set, writes ``masks/<id>.png``, ``curbs/<id>.json`` and,
    when the raw ``scan`` is given, ``labels/<id>.label``.
    """
    from .mapping import query_region

    params = params or LabelParams()
    intr, extr = calib
    drivable = query_region(semantic_map, pose, params.query_radius, {Label.DRIVABLE})
    curbs = query_region(semantic_map, pose, params.query_radius, set(CURB_LABELS))
    curbs = LabeledCloud(curbs.xyz, labels=curbs.labels, frame_id=frame_id)
    mask = mask_from_points(drivable, intr, extr, params.hull_k)
    art = LabelArtifacts(frame_id, mask, curbs)
    if mask is None:
        art.skipped = "fewer than 3 projected drivable pixels"
    if scan is not None:
        art.curb_classes = curb_point_classes(scan, curbs.xyz, params.curb_tolerance)
    if out_dir is not None:
        out = Path(out_dir)
        name = f"{frame_id:06d}"
        for sub in ("masks", "curbs", "labels"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        write_curb_points(out / "curbs" / f"{name}.json", curbs)
        art.paths["curbs"] = str(out / "curbs" / f"{name}.json")
        if mask is not None:
            write_mask_png(out / "masks" / f"{name}.png", mask)
            art.paths["mask"] = str(out / "masks" / f"{name}.png")
        if art.curb_classes is not None:
            write_label_file(out / "labels" / f"{name}.label", art.curb_classes)
            art.paths["label"] = str(out / "labels" / f"{name}.label")
    return art
