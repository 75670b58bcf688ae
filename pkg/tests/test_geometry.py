import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from madl.geometry import (
    CalibFormatError,
    CameraIntrinsics,
    Extrinsics,
    LabeledCloud,
    LidarGeometry,
    MalformedFileError,
    PoseParseError,
    PoseSE3,
    assign_rings,
    compose,
    crop_forward,
    load_calib,
    load_poses,
    load_scan_bin,
    rotvec_to_matrix,
    transform_cloud,
    write_calib,
    write_poses,
    write_scan_bin,
)
from madl.synthetic import simulate_scan

from conftest import random_pose

finite = st.floats(-50, 50, allow_nan=False)
rotvec = st.tuples(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3))
poses = st.builds(lambda w, t: PoseSE3(rotvec_to_matrix(np.array(w)), np.array(t)), rotvec,
                  st.tuples(finite, finite, finite))


def yaw(deg):
    return PoseSE3.from_xyz_rpy(yaw=math.radians(deg))


# -- compose / transform ----------------------------------------------------


def test_compose_identity_left():
    t = PoseSE3.from_xyz_rpy(1, 2, 3, 0.1, 0.2, 0.3)
    out = compose(PoseSE3.identity(), t)
    assert np.array_equal(out.matrix, t.matrix)


def test_compose_inverse_is_identity():
    t = PoseSE3.from_xyz_rpy(1, -2, 3, 0.4, -0.2, 1.3)
    assert np.allclose((t @ t.inverse()).matrix, np.eye(4), atol=1e-9)


def test_compose_yaw_matches_matrix_product():
    out = compose(yaw(90), yaw(90))
    expected = yaw(90).matrix @ yaw(90).matrix
    assert np.allclose(out.matrix, expected, atol=1e-12)
    assert np.allclose(out.matrix, yaw(180).matrix, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(poses, poses, poses)
def test_compose_associative(a, b, c):
    assert np.allclose(((a @ b) @ c).matrix, (a @ (b @ c)).matrix, atol=1e-9)


def test_transform_identity_and_translation():
    c = LabeledCloud(np.array([[0.0, 0, 0], [1, 2, 3]]))
    assert np.array_equal(transform_cloud(c, PoseSE3.identity()).xyz, c.xyz)
    moved = transform_cloud(c, PoseSE3(np.eye(3), [1, 0, 0]))
    assert np.array_equal(moved.xyz[0], [1, 0, 0])


def test_transform_yaw_rotates_x_to_y():
    out = transform_cloud(LabeledCloud([[1.0, 0, 0]]), yaw(90))
    assert np.allclose(out.xyz[0], [0, 1, 0], atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(poses, st.lists(st.tuples(finite, finite, finite), min_size=1, max_size=20))
def test_transform_round_trip(pose, pts):
    c = LabeledCloud(np.array(pts))
    back = transform_cloud(transform_cloud(c, pose), pose.inverse())
    assert np.allclose(back.xyz, c.xyz, atol=1e-9)


# -- scans --------------------------------------------------------------------


def test_load_scan_single_record(tmp_path):
    p = tmp_path / "a.bin"
    p.write_bytes(struct.pack("<4f", 1.0, 2.0, 3.0, 0.5))
    c = load_scan_bin(p)
    assert len(c) == 1
    assert np.array_equal(c.xyz[0], [1, 2, 3]) and c.intensity[0] == 0.5


def test_load_scan_empty(tmp_path):
    p = tmp_path / "e.bin"
    p.write_bytes(b"")
    assert len(load_scan_bin(p)) == 0


def test_load_scan_bad_size(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"\0" * 17)
    with pytest.raises(MalformedFileError):
        load_scan_bin(p)


@settings(max_examples=40, deadline=None)
@given(st.binary(min_size=0, max_size=50).map(lambda b: b[: len(b) // 16 * 16]))
def test_scan_bytes_round_trip(tmp_path_factory, raw):
    arr = np.frombuffer(raw, "<f4").reshape(-1, 4) if raw else np.zeros((0, 4), "<f4")
    # Only finite records are valid point clouds.
    arr = np.nan_to_num(arr, nan=0.0, posinf=1.0, neginf=-1.0)
    d = tmp_path_factory.mktemp("scan")
    src = d / "src.bin"
    src.write_bytes(arr.tobytes())
    dst = d / "dst.bin"
    write_scan_bin(dst, load_scan_bin(src))
    assert dst.read_bytes() == src.read_bytes()


# -- rings --------------------------------------------------------------------


def _point_at_elevation(el, r=10.0):
    return [r * math.cos(el), 0.0, r * math.sin(el)]


def test_ring_exact_elevation(geom):
    el = geom.ring_elevations[3]
    out = assign_rings(LabeledCloud([_point_at_elevation(el)]), geom)
    assert out.ring[0] == 3


def test_ring_tie_goes_to_lower_index():
    geom = LidarGeometry(1.73, 0.01, (-0.2, -0.1, 0.0, 0.1))
    # Midway between rings 2 and 3 (0.0 and 0.1); pick a point whose elevation is exactly 0.05.
    pts = np.array([[1.0, 0.0, math.tan(0.05)]])
    el = math.atan2(pts[0, 2], 1.0)
    geom2 = LidarGeometry(1.73, 0.01, (-0.2, -0.1, el - 0.05, el + 0.05))
    out = assign_rings(LabeledCloud(pts), geom2)
    assert out.ring[0] == 2


def test_ring_recovery_on_synthetic_scan(straight_truth, geom):
    scan = simulate_scan(straight_truth, straight_truth.poses[2], geom)
    rec = assign_rings(scan.with_labels(scan.labels), geom)
    assert np.array_equal(rec.ring, scan.ring)


# -- crop -----------------------------------------------------------------------


def test_crop_forward_examples():
    c = LabeledCloud([[35.0, 0, 0], [10.0, 0, 0]])
    out = crop_forward(c, 30)
    assert out.xyz.tolist() == [[10.0, 0, 0]]
    assert len(crop_forward(LabeledCloud.empty(), 30)) == 0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(finite, finite, finite), max_size=30), st.floats(0.1, 60))
def test_crop_subset_and_idempotent(pts, limit):
    c = LabeledCloud(np.array(pts).reshape(-1, 3))
    once = crop_forward(c, limit)
    twice = crop_forward(once, limit)
    assert np.array_equal(once.xyz, twice.xyz)
    assert all(any(np.array_equal(p, q) for q in c.xyz) for p in once.xyz)


# -- poses and calibration -------------------------------------------------------


def test_pose_identity_line(tmp_path):
    p = tmp_path / "poses.txt"
    p.write_text("1 0 0 0 0 1 0 0 0 0 1 0\n")
    (pose,) = load_poses(p)
    assert np.array_equal(pose.matrix, np.eye(4))


def test_pose_bad_line_names_line(tmp_path):
    p = tmp_path / "poses.txt"
    p.write_text("1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0 0 0 0 1\n")
    with pytest.raises(PoseParseError, match=":2:"):
        load_poses(p)


def test_pose_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    ps = [random_pose(rng) for _ in range(50)]
    write_poses(tmp_path / "p.txt", ps)
    back = load_poses(tmp_path / "p.txt")
    for a, b in zip(ps, back):
        assert np.allclose(a.matrix, b.matrix, atol=1e-9)
    # repr-based text is exact, so a second write is byte-identical.
    write_poses(tmp_path / "q.txt", back)
    assert (tmp_path / "p.txt").read_bytes() == (tmp_path / "q.txt").read_bytes()


def test_calib_bx_from_p_rect(tmp_path):
    p = tmp_path / "calib.txt"
    p.write_text("P_rect: 700 0 600 -70 0 700 180 0 0 0 1 0\nTr_lidar_to_cam: 1 0 0 0 0 1 0 0 0 0 1 0\n")
    intr, extr = load_calib(p)
    assert intr.bx == pytest.approx(0.1)
    assert np.array_equal(extr.lidar_to_camera.matrix, np.eye(4))


def test_calib_missing_key(tmp_path):
    p = tmp_path / "calib.txt"
    p.write_text("Tr_lidar_to_cam: 1 0 0 0 0 1 0 0 0 0 1 0\n")
    with pytest.raises(CalibFormatError):
        load_calib(p)


def test_calib_round_trip(tmp_path):
    intr = CameraIntrinsics(721.5, 721.5, 609.6, 172.9, 0.06, 1242, 375)
    extr = Extrinsics(PoseSE3.from_xyz_rpy(0.1, -0.2, 0.3, 0.01, 0.02, 0.03))
    write_calib(tmp_path / "c.txt", intr, extr)
    i2, e2 = load_calib(tmp_path / "c.txt")
    assert i2 == intr
    assert np.allclose(e2.lidar_to_camera.matrix, extr.lidar_to_camera.matrix, atol=1e-12)
