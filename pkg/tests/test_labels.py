import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import ConvexHull

from madl.geometry import CameraIntrinsics, Extrinsics, Label, LabeledCloud, PoseSE3
from madl.labels import (
    DegenerateInputError,
    LabelParams,
    concave_hull,
    export_curb_labels,
    generate_frame_labels,
    polygon_area,
    project_homogeneous,
    project_points,
    rasterize_mask,
    read_curb_points,
    read_label_file,
    read_mask_png,
    write_mask_png,
)
from madl.mapping import SemanticMap, build_map, load_map, query_region
from madl.synthetic import default_calibration

import oracles

INTR = CameraIntrinsics(700.0, 700.0, 600.0, 180.0, 0.0, 1242, 375)
IDENT = Extrinsics(PoseSE3.identity())


# -- projection ---------------------------------------------------------------------


def test_principal_point():
    intr = CameraIntrinsics(700.0, 700.0, 600.0, 180.0, 0.3, 1242, 375)
    for z in (0.5, 7.0, 80.0):
        p = project_points(np.array([[0.3, 0.0, z]]), intr, IDENT)
        assert np.allclose(p.uv, [[600.0, 180.0]], atol=1e-12)


def test_projection_example():
    p = project_points(np.array([[1.0, 0.0, 10.0]]), INTR, IDENT)
    assert np.allclose(p.uv, [[670.0, 180.0]], atol=1e-12)


def test_behind_camera_culled():
    p = project_points(np.array([[0.0, 0.0, -5.0], [0.0, 0.0, 5.0]]), INTR, IDENT)
    assert p.index.tolist() == [1]


def test_out_of_image_culled():
    p = project_points(np.array([[100.0, 0.0, 1.0]]), INTR, IDENT)
    assert len(p) == 0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000), st.floats(0.01, 100))
def test_homogeneous_invariance(seed, lam):
    rng = np.random.default_rng(seed)
    intr, extr = default_calibration()
    x = np.append(rng.uniform([2, -10, -2], [40, 10, 2]), 1.0)
    a = project_homogeneous(x[None], intr, extr)
    b = project_homogeneous(lam * x[None], intr, extr)
    assert np.allclose(a, b, atol=1e-9, rtol=0)


def test_homogeneous_matches_pinhole():
    rng = np.random.default_rng(7)
    intr, extr = default_calibration()
    pts = rng.uniform([5, -5, -1.7], [30, 5, 0], (50, 3))
    p = project_points(pts, intr, extr)
    h = project_homogeneous(np.column_stack([pts, np.ones(50)])[p.index], intr, extr)
    assert np.allclose(p.uv, h, atol=1e-9)


# -- concave hull -------------------------------------------------------------------


def test_hull_square():
    sq = np.array([[0.0, 0], [1, 0], [1, 1], [0, 1]])
    for k in (3, 5, 10):
        poly = concave_hull(sq, k)
        assert len(poly) == 4 and abs(polygon_area(poly)) == pytest.approx(1.0)


def _c_shape():
    g = np.stack(np.meshgrid(np.arange(0, 20.0), np.arange(0, 20.0)), -1).reshape(-1, 2)
    hole = (g[:, 0] >= 5) & (g[:, 1] >= 5) & (g[:, 1] <= 14)
    return g[~hole]


def test_hull_c_shape():
    pts = _c_shape()
    poly = concave_hull(pts, 4)
    assert abs(polygon_area(poly)) < ConvexHull(pts).volume
    assert all(oracles.point_in_polygon(p, poly.tolist()) for p in pts.tolist())
    assert oracles.is_simple(poly.tolist())


def test_hull_too_few_points():
    with pytest.raises(DegenerateInputError):
        concave_hull(np.array([[0.0, 0], [1, 1]]))


def test_hull_collinear():
    with pytest.raises(DegenerateInputError):
        concave_hull(np.array([[0.0, 0], [1, 1], [2, 2], [3, 3]]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.integers(3, 15))
def test_hull_contains_and_is_simple(seed, k):
    rng = np.random.default_rng(seed)
    pts = np.round(rng.uniform(0, 30, (int(rng.integers(5, 80)), 2)), 1)
    poly = concave_hull(pts, k)
    assert all(oracles.point_in_polygon(p, poly.tolist()) for p in pts.tolist())
    assert oracles.is_simple(poly.tolist())


# -- rasterization ---------------------------------------------------------------------


def test_full_frame_polygon():
    m = rasterize_mask(np.array([[0.0, 0], [10, 0], [10, 8], [0, 8]]), 10, 8)
    assert np.all(m.values == 255)


def test_triangle_matches_brute_force():
    tri = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]]
    m = rasterize_mask(np.array(tri), 16, 16)
    ref = oracles.raster(tri, 16, 16)
    assert np.array_equal(m.values, ref)
    assert (m.values > 0).sum() == (ref > 0).sum()


def test_empty_area_polygon():
    m = rasterize_mask(np.array([[1.3, 1.3], [5.3, 1.3], [9.3, 1.3]]), 12, 12)
    assert np.all(m.values == 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000), st.booleans())
def test_raster_random_polygons(seed, integral):
    rng = np.random.default_rng(seed)
    w, h = int(rng.integers(4, 65)), int(rng.integers(4, 65))
    poly = oracles.star_polygon(rng, w / 2, h / 2, 1.0, max(w, h) * 0.7, int(rng.integers(3, 12)))
    if integral:
        poly = np.round(poly * 2) / 2  # vertices on pixel corners and centers
    m = rasterize_mask(poly, w, h)
    assert np.array_equal(m.values, oracles.raster(poly.tolist(), w, h))


def test_mask_png_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    m = rasterize_mask(oracles.star_polygon(rng, 30, 20, 5, 25, 9), 64, 40)
    write_mask_png(tmp_path / "m.png", m)
    back = read_mask_png(tmp_path / "m.png")
    assert np.array_equal(back.values, m.values)
    assert set(np.unique(back.values)) <= {0, 255}


# -- frame labels ----------------------------------------------------------------------


def test_empty_region_is_skipped():
    m = SemanticMap(0.2, np.array([[500.0, 0, 0], [501.0, 0, 0], [500.0, 1, 0]]), np.array([2, 2, 2]))
    art = generate_frame_labels(0, PoseSE3.identity(), m, default_calibration())
    assert art.mask is None and art.skipped


def test_curb_count_conservation(pipeline_run, bundled_truth, tmp_path):
    cfg, _, _ = pipeline_run
    m = load_map(cfg.output_dir / "map.ply")
    pose = bundled_truth.poses[25]
    art = generate_frame_labels(25, pose, m, default_calibration(), LabelParams(), out_dir=tmp_path)
    expected = query_region(m, pose, LabelParams().query_radius, {Label.CURB_LEFT, Label.CURB_RIGHT})
    assert len(art.curb_points) == len(expected)
    assert len(read_curb_points(tmp_path / "curbs" / "000025.json")) == len(expected)
    assert art.mask.values.shape == (default_calibration()[0].height, default_calibration()[0].width)


def test_mid_sequence_mask_iou(pipeline_run):
    cfg, _, _ = pipeline_run
    pred = read_mask_png(cfg.output_dir / "masks" / "000025.png").positive
    truth = read_mask_png(cfg.input_dir / "truth_masks" / "000025.png").positive
    assert (pred & truth).sum() / (pred | truth).sum() >= 0.85


def test_single_frame_map_labels(straight_truth, geom):
    from madl.curb import detect_curbs
    from madl.synthetic import simulate_camera_truth, simulate_scan

    pose = straight_truth.poses[2]
    det = detect_curbs(simulate_scan(straight_truth, pose, geom), geom)
    m = build_map([(det.cloud, pose)], 0.2)
    art = generate_frame_labels(2, pose, m, default_calibration())
    truth, _ = simulate_camera_truth(straight_truth, pose, *default_calibration())
    pred, truth = art.mask.positive, truth.positive
    assert (pred & truth).sum() / (pred | truth).sum() >= 0.5


# -- curb label export ------------------------------------------------------------------


def test_export_no_curbs(tmp_path):
    scan = LabeledCloud(np.random.default_rng(0).normal(size=(17, 3)))
    classes = export_curb_labels(scan, np.zeros((0, 3)), 0.2, tmp_path / "a.label")
    assert np.all(classes == 0)
    assert (tmp_path / "a.label").stat().st_size == 4 * 17
    assert np.array_equal(read_label_file(tmp_path / "a.label"), classes)


def test_export_within_tolerance(tmp_path):
    scan = LabeledCloud(np.array([[10.0, 4.0, -1.6], [10.0, 0.0, -1.7]]))
    classes = export_curb_labels(scan, np.array([[10.05, 4.0, -1.6]]), 0.2, tmp_path / "b.label")
    assert classes.tolist() == [1, 0]
    raw = (tmp_path / "b.label").read_bytes()
    assert len(raw) == 8 and raw[:4] == (1).to_bytes(4, "little")
