import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from viewfuse.geometry import (
    CameraModel, Pose, apply_pose, apply_pose_noise, camera_in_frame,
    clip_convex, compose, invert, normalize_angle, polygon_area,
    project_points, project_to_view, rect_corners, rects_overlap,
    relative_pose, unproject_feature_to_optical, optical_to_local,
)

finite = st.floats(min_value=-50.0, max_value=50.0, allow_nan=False)
angles = st.floats(min_value=-10.0, max_value=10.0, allow_nan=False)


def poses():
    return st.builds(Pose, finite, finite, finite, angles)


def matrix_of(p: Pose) -> np.ndarray:
    """Independent homogeneous-matrix oracle, built from scratch."""
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    m = np.array([
        [c, -s, 0.0, p.x],
        [s, c, 0.0, p.y],
        [0.0, 0.0, 1.0, p.z],
        [0.0, 0.0, 0.0, 1.0],
    ])
    return m


def test_identity_roundtrip():
    p = Pose(1.0, -2.0, 0.5, 0.7)
    q = compose(p, invert(p))
    assert abs(q.x) < 1e-12 and abs(q.y) < 1e-12 and abs(q.z) < 1e-12
    assert abs(q.yaw) < 1e-12


@given(poses(), poses())
@settings(max_examples=200, deadline=None)
def test_compose_matches_matrix_oracle(a, b):
    got = compose(a, b)
    want = matrix_of(a) @ matrix_of(b)
    np.testing.assert_allclose(matrix_of(got)[:3, 3], want[:3, 3], atol=1e-9)
    np.testing.assert_allclose(matrix_of(got)[:3, :3], want[:3, :3], atol=1e-9)


@given(poses(), poses(), poses())
@settings(max_examples=100, deadline=None)
def test_compose_associative(a, b, c):
    lhs = compose(compose(a, b), c)
    rhs = compose(a, compose(b, c))
    np.testing.assert_allclose([lhs.x, lhs.y, lhs.z], [rhs.x, rhs.y, rhs.z], atol=1e-8)
    assert abs(normalize_angle(lhs.yaw - rhs.yaw)) < 1e-9


@given(poses(), st.lists(finite, min_size=3, max_size=3))
@settings(max_examples=200, deadline=None)
def test_apply_invert_roundtrip(p, pt):
    pt = np.array(pt)
    back = apply_pose(invert(p), apply_pose(p, pt))
    np.testing.assert_allclose(back, pt, atol=1e-8)


def test_translate_then_rotate_hand_case():
    # translation (1,0,0) applied after a yaw of pi/2
    p = compose(Pose(1.0, 0.0, 0.0, 0.0), Pose(0.0, 0.0, 0.0, math.pi / 2))
    got = apply_pose(p, np.array([2.0, 0.0, 0.0]))
    want = (matrix_of(p) @ np.array([2.0, 0.0, 0.0, 1.0]))[:3]
    np.testing.assert_allclose(got, want, atol=1e-12)
    np.testing.assert_allclose(got, [1.0, 2.0, 0.0], atol=1e-12)


def test_yaw_normalized_into_half_open_interval():
    assert Pose(yaw=3 * math.pi).yaw == pytest.approx(math.pi)
    assert Pose(yaw=-math.pi).yaw == pytest.approx(math.pi)
    q = compose(Pose(yaw=2.5), Pose(yaw=2.5))
    assert -math.pi < q.yaw <= math.pi


@given(poses(), poses())
@settings(max_examples=100, deadline=None)
def test_relative_pose_matches_compose_invert(a, b):
    got = relative_pose(a, b)
    want = compose(invert(a), b)
    np.testing.assert_allclose([got.x, got.y, got.z], [want.x, want.y, want.z], atol=1e-8)
    assert abs(normalize_angle(got.yaw - want.yaw)) < 1e-9


def test_relative_pose_exact_under_world_shift():
    # coordinates on a 2^-20 lattice, integer world offset: bit-identical result
    snap = 2.0 ** -20
    a = Pose(12345 * snap * 7, -99991 * snap, 3 * snap, 0.25)
    b = Pose(54321 * snap, 77777 * snap, -5 * snap, -1.5)
    for off in [(128.0, -512.0, 64.0), (3072.0, 1.0, -2048.0)]:
        t = Pose(*off, 0.0)
        r0 = relative_pose(a, b)
        r1 = relative_pose(compose(t, a), compose(t, b))
        assert (r0.x, r0.y, r0.z, r0.yaw) == (r1.x, r1.y, r1.z, r1.yaw)


# ---- noise ----

def test_pose_noise_zero_sigma_identical():
    p = Pose(1.0, 2.0, 0.0, 0.5)
    q = apply_pose_noise(p, 0.0, 0.0, np.random.default_rng(0))
    assert (q.x, q.y, q.z, q.yaw) == (p.x, p.y, p.z, p.yaw)


def test_pose_noise_statistics():
    rng = np.random.default_rng(42)
    n = 100_000
    xs = np.array([apply_pose_noise(Pose(), 0.5, 0.02, rng).x for _ in range(n)])
    assert abs(xs.mean()) < 0.01
    assert abs(xs.std() - 0.5) < 0.01


def test_pose_noise_rejects_negative_sigma():
    with pytest.raises(ValueError):
        apply_pose_noise(Pose(), -0.1, 0.0, np.random.default_rng(0))


# ---- camera ----

def make_cam(yaw=0.0, z=1.4) -> CameraModel:
    return CameraModel(fx=160.0, fy=160.0, cx=160.0, cy=100.0,
                       pix_w=320, pix_h=200, feat_w=32, feat_h=20,
                       pose=Pose(0.0, 0.0, z, yaw))


def test_camera_stride_validation():
    with pytest.raises(ValueError):
        CameraModel(100, 100, 50, 50, pix_w=321, pix_h=200, feat_w=32, feat_h=20)
    with pytest.raises(ValueError):
        CameraModel(100, 100, 50, 50, pix_w=320, pix_h=200, feat_w=32, feat_h=10)


def test_optical_axis_point_hits_principal_point():
    cam = make_cam()
    u, v, ok = project_to_view(np.array([5.0, 0.0, 1.4]), cam, Pose())
    assert ok
    assert u == pytest.approx(cam.cx / cam.stride)
    assert v == pytest.approx(cam.cy / cam.stride)


def test_point_behind_camera_invalid():
    cam = make_cam()
    _, _, ok = project_to_view(np.array([-5.0, 0.0, 1.4]), cam, Pose())
    assert not ok


def test_point_outside_frustum_invalid():
    cam = make_cam()
    # 90 degree horizontal FOV: lateral offset beyond +-depth falls outside
    _, _, ok = project_to_view(np.array([5.0, 5.1, 1.4]), cam, Pose())
    assert not ok
    _, _, ok2 = project_to_view(np.array([5.0, 4.9, 1.4]), cam, Pose())
    assert ok2


def projection_matrix_oracle(cam: CameraModel, cam_world: Pose) -> np.ndarray:
    """Independent 3x4 projection matrix: K @ axis-swap @ world-to-camera."""
    k = np.array([[cam.fx, 0.0, cam.cx], [0.0, cam.fy, cam.cy], [0.0, 0.0, 1.0]])
    swap = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    c, s = math.cos(cam_world.yaw), math.sin(cam_world.yaw)
    r_inv = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    t = np.array([cam_world.x, cam_world.y, cam_world.z])
    world_to_cam = np.hstack([r_inv, (-r_inv @ t)[:, None]])
    return k @ swap @ world_to_cam


@given(st.lists(finite, min_size=3, max_size=3), angles, angles)
@settings(max_examples=200, deadline=None)
def test_projection_matches_matrix_oracle(pt, agent_yaw, cam_yaw):
    cam = make_cam(yaw=cam_yaw)
    agent = Pose(1.0, -2.0, 0.0, agent_yaw)
    pt = np.array(pt)
    uv, depth, valid = project_points(pt[None, :], cam, agent)
    p = projection_matrix_oracle(cam, camera_in_frame(cam, agent))
    proj = p @ np.append(pt, 1.0)
    if abs(proj[2]) < 1e-6:
        return
    np.testing.assert_allclose(depth[0], proj[2], atol=1e-9)
    if proj[2] > 0.1:
        np.testing.assert_allclose(uv[0] * cam.stride, proj[:2] / proj[2], atol=1e-6)


def test_projection_equivariance_across_frames():
    cam = make_cam(yaw=0.3)
    agent_in_ego = Pose(2.0, 1.0, 0.0, 0.7)
    pt_ego = np.array([6.0, 2.0, 1.0])
    u1, v1, ok1 = project_to_view(pt_ego, cam, agent_in_ego)

    shift = Pose(-3.0, 5.0, 0.0, 1.1)
    agent_in_other = compose(shift, agent_in_ego)
    pt_other = apply_pose(shift, pt_ego)
    u2, v2, ok2 = project_to_view(pt_other, cam, agent_in_other)
    assert ok1 == ok2
    assert u1 == pytest.approx(u2, abs=1e-9)
    assert v1 == pytest.approx(v2, abs=1e-9)


def test_unproject_roundtrip():
    cam = make_cam()
    opt = unproject_feature_to_optical(cam, 10.0, 5.0, depth=1.0)
    np.testing.assert_allclose(opt[2], 1.0)
    local = optical_to_local(opt)
    world = apply_pose(camera_in_frame(cam, Pose()), local)
    u, v, ok = project_to_view(world, cam, Pose())
    assert ok
    assert u == pytest.approx(10.0, abs=1e-9)
    assert v == pytest.approx(5.0, abs=1e-9)


# ---- polygons ----

def test_polygon_area_unit_square():
    sq = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    assert polygon_area(sq) == pytest.approx(1.0)


def test_clip_offset_squares():
    a = rect_corners(0.0, 0.0, 2.0, 2.0, 0.0)
    b = rect_corners(1.0, 1.0, 2.0, 2.0, 0.0)
    inter = clip_convex(a, b)
    assert polygon_area(inter) == pytest.approx(1.0)


def test_clip_disjoint_is_empty():
    a = rect_corners(0.0, 0.0, 1.0, 1.0, 0.0)
    b = rect_corners(5.0, 5.0, 1.0, 1.0, 0.0)
    assert polygon_area(clip_convex(a, b)) == pytest.approx(0.0)


def test_rect_corners_length_along_heading():
    c = rect_corners(0.0, 0.0, 2.0, 6.0, 0.0)
    assert c[:, 0].max() == pytest.approx(3.0)
    assert c[:, 1].max() == pytest.approx(1.0)
    assert polygon_area(c) == pytest.approx(12.0)
    r = rect_corners(0.0, 0.0, 2.0, 6.0, math.pi / 2)
    assert r[:, 1].max() == pytest.approx(3.0)


def test_rects_overlap():
    a = rect_corners(0.0, 0.0, 2.0, 4.0, 0.2)
    assert rects_overlap(a, rect_corners(0.5, 0.5, 2.0, 4.0, -0.4))
    assert not rects_overlap(a, rect_corners(10.0, 0.0, 2.0, 4.0, 0.0))
