"""Piecewise plane fitting ground segmentation along the driving axis."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import Label, LabeledCloud, MadlError

log = logging.getLogger(__name__)


class DegenerateGeometryError(MadlError):
    pass


@dataclass(frozen=True)
class GroundParams:
    num_segments: int = 3
    seed_count: int = 20
    dist_threshold: float = 0.2
    iterations: int = 3
    # Fraction of lowest points ignored as under-ground noise before seeding.
    noise_fraction: float = 0.005

    def __post_init__(self):
        if self.num_segments < 1 or self.seed_count < 3 or self.dist_threshold <= 0 or self.iterations < 1:
            raise ValueError(f"invalid ground parameters: {self}")


@dataclass(frozen=True)
class PlaneModel:
    normal: np.ndarray
    offset: float

    def distance(self, xyz: np.ndarray) -> np.ndarray:
        """Signed orthogonal distance ``n·p + d``."""
        return np.asarray(xyz) @ self.normal + self.offset


def segment_indices_x(xyz: np.ndarray, n: int) -> list[np.ndarray]:
    """Index arrays of ``n`` equal-width x slabs (right-open, last one closed)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(xyz) == 0:
        return []
    x = xyz[:, 0]
    lo, hi = float(x.min()), float(x.max())
    if n == 1 or hi == lo:
        return [np.arange(len(x))] + [np.zeros(0, int)] * (n - 1)
    edges = lo + (hi - lo) * np.arange(1, n) / n
    which = np.searchsorted(edges, x, side="right")
    return [np.flatnonzero(which == i) for i in range(n)]


def split_segments_x(cloud: LabeledCloud, n: int) -> list[LabeledCloud]:
    return [cloud.subset(idx) for idx in segment_indices_x(cloud.xyz, n)]


def fit_plane(points: np.ndarray) -> PlaneModel:
    """Least-squares plane through ``points`` (smallest covariance eigenvector)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 3:
        raise DegenerateGeometryError(f"plane fit needs 3 points, got {len(pts)}")
    centroid = pts.mean(axis=0)
    q = pts - centroid
    cov = q.T @ q / len(pts)
    evals, evecs = np.linalg.eigh(cov)
    scale = max(evals[2], 1e-300)
    if evals[1] <= 1e-12 * scale or evals[2] <= 0:
        raise DegenerateGeometryError("points are collinear or coincident")
    normal = evecs[:, 0]
    if normal[2] < 0 or (normal[2] == 0 and (normal[0] < 0 or (normal[0] == 0 and normal[1] < 0))):
        normal = -normal
    normal = normal / np.linalg.norm(normal)
    return PlaneModel(normal, float(-normal @ centroid))


def _segment_ground_mask(xyz: np.ndarray, params: GroundParams):
    n = len(xyz)
    if n < 3:
        return np.zeros(n, bool), None
    order = np.argsort(xyz[:, 2], kind="stable")
    skip = int(params.noise_fraction * n)
    if n - skip < 3:
        skip = 0
    seeds = order[skip : skip + params.seed_count]
    ground = np.zeros(n, bool)
    ground[seeds] = True
    plane = None
    for _ in range(params.iterations):
        if ground.sum() < 3:
            break
        plane = fit_plane(xyz[ground])
        ground = np.abs(plane.distance(xyz)) <= params.dist_threshold
    return ground, plane


def segment_ground(cloud: LabeledCloud, params: GroundParams | None = None) -> LabeledCloud:
    """Label every point ``GROUND`` or ``OTHER``.

    The cloud is cut into ``num_segments`` slabs along x; each slab is fitted
    independently. Fitted planes and warnings go into ``diagnostics``.
    """
    params = params or GroundParams()
    if len(cloud) == 0:
        raise ValueError("segment_ground needs a non-empty cloud")
    labels = np.full(len(cloud), Label.OTHER, np.uint8)
    planes, warnings = [], []
    for i, idx in enumerate(segment_indices_x(cloud.xyz, params.num_segments)):
        if len(idx) < 3:
            if len(idx):
                warnings.append(f"segment {i}: only {len(idx)} points")
            planes.append(None)
            continue
        try:
            mask, plane = _segment_ground_mask(cloud.xyz[idx], params)
        except DegenerateGeometryError as exc:
            warnings.append(f"segment {i}: {exc}")
            planes.append(None)
            continue
        labels[idx[mask]] = Label.GROUND
        planes.append(plane)
    for w in warnings:
        log.warning("ground segmentation: %s", w)
    out = cloud.with_labels(labels)
    out.diagnostics.update(ground_planes=planes, ground_warnings=warnings)
    return out
