import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sphersplat.errors import (
    BehindCameraError,
    DegenerateGeometryError,
    OutOfRangeError,
)
from sphersplat.geometry import (
    CameraModel,
    GridSpec,
    IcpConfig,
    Sim3Transform,
    camera_to_robot,
    from_spherical,
    icp_refine,
    linearize_index,
    matrix_to_quat,
    projection_matrix,
    quat_multiply,
    quat_normalize,
    quat_to_matrix,
    spherical_bin_volume,
    to_spherical,
    umeyama_align,
    voxel_index,
    voxel_indices,
    voxel_volume,
)


def rot_z(deg):
    a = math.radians(deg)
    return np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1.0]])


def make_camera(rotation=None, translation=(0, 0, 0), fx=100.0, fy=120.0, cx=64.0, cy=48.0):
    return CameraModel(
        fx=fx,
        fy=fy,
        cx=cx,
        cy=cy,
        rotation=np.eye(3) if rotation is None else rotation,
        translation=np.asarray(translation, dtype=float),
        width=128,
        height=96,
    )


# ---------------------------------------------------------------------------
# Spherical conversion
# ---------------------------------------------------------------------------


def test_to_spherical_axis_cases():
    np.testing.assert_allclose(to_spherical([1, 0, 0]), [1.0, 0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(to_spherical([0, 1, 0]), [1.0, math.pi / 2, 0.0], atol=1e-12)


def test_to_spherical_hand_case():
    # r = sqrt(3), theta = pi/4, phi = atan2(1, sqrt(2)) with the guard off
    r, theta, phi = to_spherical([1, 1, 1], epsilon=0.0)
    assert r == pytest.approx(math.sqrt(3), abs=1e-15)
    assert theta == pytest.approx(math.pi / 4, abs=1e-15)
    assert phi == pytest.approx(0.6154797086703873, abs=1e-12)


def test_theta_normalized_into_half_open_range():
    sph = to_spherical([[-1, 0, 0], [-1, -1e-12, 0]])
    assert np.all(sph[:, 1] >= -math.pi)
    assert np.all(sph[:, 1] < math.pi)


@settings(max_examples=200, deadline=None)
@given(
    r=st.floats(1e-3, 1e3),
    theta=st.floats(-math.pi, math.pi - 1e-9),
    phi=st.floats(-math.pi / 2 + 1e-3, math.pi / 2 - 1e-3),
)
def test_spherical_round_trip(r, theta, phi):
    p = from_spherical([r, theta, phi])
    back = to_spherical(p, epsilon=0.0)
    np.testing.assert_allclose(from_spherical(back), p, rtol=1e-9, atol=1e-9)


# ---------------------------------------------------------------------------
# Voxel binning
# ---------------------------------------------------------------------------


def small_grid():
    return GridSpec(r_min=0.0, r_max=4.0, delta_r=1.0, n_theta=4, delta_phi=math.pi / 4)


def test_voxel_index_lower_bound():
    g = small_grid()
    np.testing.assert_array_equal(voxel_index([g.r_min, g.theta_0, g.phi_0], g), [0, 0, 0])


def test_voxel_index_hand_case():
    g = small_grid()
    np.testing.assert_array_equal(voxel_index([2.5, 0.0, 0.0], g), [2, 2, 2])


def test_voxel_index_out_of_range_and_clamp():
    g = GridSpec(r_min=0.5, r_max=4.0, delta_r=1.0, n_theta=4, delta_phi=math.pi / 4)
    with pytest.raises(OutOfRangeError):
        voxel_index([0.25, 0.0, 0.0], g)
    # far content folds into the last radial shell
    idx = voxel_index([1e6, 0.0, 0.0], g)
    assert idx[0] == g.n_r - 1


def test_voxel_index_top_phi_boundary_clamps():
    g = small_grid()
    idx = voxel_index([1.0, 0.0, math.pi / 2], g)
    assert idx[2] == g.n_phi - 1


def bin_scan_oracle(sph, spec):
    """Independent binning via edge arrays + searchsorted."""
    r_edges = spec.r_min + spec.delta_r * np.arange(spec.n_r + 1)
    t_edges = spec.theta_0 + spec.delta_theta * np.arange(spec.n_theta + 1)
    p_edges = spec.phi_0 + spec.delta_phi * np.arange(spec.n_phi + 1)
    r, theta, phi = sph[:, 0], sph[:, 1], sph[:, 2]
    i_r = np.searchsorted(r_edges, r, side="right") - 1
    i_r = np.minimum(i_r, spec.n_r - 1)
    i_t = np.searchsorted(t_edges, theta, side="right") - 1
    i_p = np.searchsorted(p_edges, phi, side="right") - 1
    valid = (r >= spec.r_min) & (i_p >= 0) & (i_p < spec.n_phi)
    return np.stack([i_r, i_t, i_p], axis=-1), valid


def away_from_edges(v, edges, tol=1e-9):
    return np.abs(v[:, None] - edges[None, :]).min(axis=1) > tol


def test_voxel_index_matches_bin_scan_oracle():
    spec = GridSpec()
    rs = np.random.default_rng(7)
    n = 10_000
    sph = np.stack(
        [
            rs.uniform(0.0, spec.r_max * 1.1, n),
            rs.uniform(-math.pi, math.pi, n),
            rs.uniform(-math.pi / 2, math.pi / 2, n),
        ],
        axis=-1,
    )
    r_edges = spec.r_min + spec.delta_r * np.arange(spec.n_r + 1)
    t_edges = spec.theta_0 + spec.delta_theta * np.arange(spec.n_theta + 1)
    p_edges = spec.phi_0 + spec.delta_phi * np.arange(spec.n_phi + 1)
    keep = (
        away_from_edges(sph[:, 0], r_edges)
        & away_from_edges(sph[:, 1], t_edges)
        & away_from_edges(sph[:, 2], p_edges)
    )
    sph = sph[keep]
    got, got_valid = voxel_indices(sph, spec)
    want, want_valid = bin_scan_oracle(sph, spec)
    np.testing.assert_array_equal(got_valid, want_valid)
    np.testing.assert_array_equal(got[got_valid], want[want_valid])


def test_voxelize_permutation_of_linear_index():
    spec = small_grid()
    idx = np.array([[0, 1, 2], [3, 3, 3], [1, 0, 0]])
    lin = linearize_index(idx, spec)
    assert len(np.unique(lin)) == 3


# ---------------------------------------------------------------------------
# Voxel volume
# ---------------------------------------------------------------------------


def test_bin_volume_arithmetic():
    assert spherical_bin_volume(1.0, 0.0, 1.0, 0.1, 0.1) == pytest.approx(0.01, rel=1e-15)


def test_bin_volume_quadratic_growth():
    v1 = spherical_bin_volume(1.0, 0.0, 0.5, 0.1, 0.1)
    v2 = spherical_bin_volume(2.0, 0.0, 0.5, 0.1, 0.1)
    assert v2 / v1 == pytest.approx(4.0, rel=1e-12)


def test_bin_volume_vanishes_at_pole():
    assert spherical_bin_volume(1.0, math.pi / 2, 0.5, 0.1, 0.1) == pytest.approx(0.0, abs=1e-15)


def test_voxel_volume_shell_ratio_approaches_four():
    spec = GridSpec(r_min=0.0, r_max=2000.0, delta_r=1.0, n_theta=360, delta_phi=math.pi / 180)
    ratios = []
    for k in (10, 100, 900):
        v_2k = voxel_volume([2 * k, 0, spec.n_phi // 2], spec)
        v_k = voxel_volume([k, 0, spec.n_phi // 2], spec)
        ratios.append(v_2k / v_k)
    assert abs(ratios[-1] - 4.0) < abs(ratios[0] - 4.0)
    assert ratios[-1] == pytest.approx(4.0, rel=2e-3)


# ---------------------------------------------------------------------------
# Camera model
# ---------------------------------------------------------------------------


def test_project_optical_axis():
    cam = make_camera()
    uv, z = cam.project([0, 0, 1.0])
    np.testing.assert_allclose(uv, [cam.cx, cam.cy], atol=1e-12)
    assert z == pytest.approx(1.0)


def test_project_behind_camera():
    cam = make_camera()
    with pytest.raises(BehindCameraError):
        cam.project([0, 0, -1.0])


def test_project_unproject_round_trip():
    cam = make_camera(rotation=rot_z(30.0), translation=(0.5, -0.2, 1.0))
    rs = np.random.default_rng(3)
    pts = rs.uniform(-1, 1, (50, 3)) + [0, 0, 5.0]
    uv, z, ok = cam.project_many(pts)
    assert ok.all()
    back = cam.unproject(uv, z)
    np.testing.assert_allclose(back, pts, atol=1e-9)


def test_project_matches_matrix_oracle():
    cam = make_camera(rotation=rot_z(-45.0), translation=(1.0, 2.0, 3.0))
    p_mat = projection_matrix(cam)
    rs = np.random.default_rng(11)
    pts = rs.uniform(-2, 2, (100, 3)) + [0, 0, 8.0]
    uv, z, ok = cam.project_many(pts)
    homo = p_mat @ np.hstack([pts, np.ones((100, 1))]).T
    np.testing.assert_allclose(uv[ok, 0], homo[0, ok] / homo[2, ok], atol=1e-9)
    np.testing.assert_allclose(uv[ok, 1], homo[1, ok] / homo[2, ok], atol=1e-9)
    np.testing.assert_allclose(z[ok], homo[2, ok], atol=1e-9)


def test_camera_to_robot_identity_and_translation():
    cam = make_camera()
    p = np.array([1.0, 2.0, 3.0])
    np.testing.assert_allclose(camera_to_robot(cam, p), p, atol=1e-15)
    cam_t = make_camera(translation=(1.0, -2.0, 0.5))
    np.testing.assert_allclose(camera_to_robot(cam_t, np.zeros(3)), [-1.0, 2.0, -0.5], atol=1e-15)


def test_camera_round_trip():
    cam = make_camera(rotation=rot_z(77.0), translation=(0.3, 0.1, -0.7))
    rs = np.random.default_rng(5)
    pts = rs.normal(size=(20, 3))
    np.testing.assert_allclose(cam.camera_to_world(cam.world_to_camera(pts)), pts, atol=1e-12)


# ---------------------------------------------------------------------------
# Quaternions
# ---------------------------------------------------------------------------


def test_quat_matrix_round_trip():
    rs = np.random.default_rng(2)
    for _ in range(20):
        q = quat_normalize(rs.normal(size=4))
        if q[0] < 0:
            q = -q
        np.testing.assert_allclose(matrix_to_quat(quat_to_matrix(q)), q, atol=1e-12)


def test_quat_multiply_matches_matrix_product():
    rs = np.random.default_rng(4)
    a = quat_normalize(rs.normal(size=4))
    b = quat_normalize(rs.normal(size=4))
    np.testing.assert_allclose(
        quat_to_matrix(quat_multiply(a, b)), quat_to_matrix(a) @ quat_to_matrix(b), atol=1e-12
    )


# ---------------------------------------------------------------------------
# Umeyama + ICP
# ---------------------------------------------------------------------------


def general_cloud(n=30, seed=0):
    return np.random.default_rng(seed).normal(size=(n, 3))


def test_umeyama_self_alignment():
    pts = general_cloud()
    t = umeyama_align(pts, pts)
    assert t.scale == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(t.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(t.translation, np.zeros(3), atol=1e-12)


def test_umeyama_recovers_known_sim3():
    pts = general_cloud(seed=1)
    want = Sim3Transform(scale=2.0, quat=matrix_to_quat(rot_z(30.0)), translation=[1.0, 2.0, 3.0])
    est = umeyama_align(pts, want.apply(pts))
    assert est.scale == pytest.approx(2.0, abs=1e-9)
    np.testing.assert_allclose(est.rotation, want.rotation, atol=1e-9)
    np.testing.assert_allclose(est.translation, want.translation, atol=1e-9)


def test_umeyama_collinear_degenerate():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
    with pytest.raises(DegenerateGeometryError):
        umeyama_align(pts, pts + 1.0)


@settings(max_examples=50, deadline=None)
@given(
    scale=st.floats(0.1, 10.0),
    angle=st.floats(-179.0, 179.0),
    seed=st.integers(0, 1000),
)
def test_umeyama_scale_sweep(scale, angle, seed):
    pts = general_cloud(n=8, seed=seed)
    want = Sim3Transform(
        scale=scale, quat=matrix_to_quat(rot_z(angle)), translation=[0.1, -0.4, 2.0]
    )
    est = umeyama_align(pts, want.apply(pts))
    np.testing.assert_allclose(est.apply(pts), want.apply(pts), rtol=1e-9, atol=1e-9)


def test_icp_fixed_point():
    pts = general_cloud(n=100, seed=6)
    res = icp_refine(pts, pts, Sim3Transform.identity())
    assert res.transform.scale == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(res.transform.rotation, np.eye(3), atol=1e-9)
    np.testing.assert_allclose(res.transform.translation, np.zeros(3), atol=1e-9)


def test_icp_recovers_small_motion():
    pts = general_cloud(n=300, seed=8) * 2.0
    motion = Sim3Transform(
        scale=1.0, quat=matrix_to_quat(rot_z(3.0)), translation=[0.02, -0.01, 0.03]
    )
    target = motion.apply(pts)
    res = icp_refine(pts, target, Sim3Transform.identity(), IcpConfig(max_iters=100, tol=1e-12))
    np.testing.assert_allclose(res.transform.apply(pts), target, atol=1e-4)


def test_icp_rms_non_increasing():
    rs = np.random.default_rng(9)
    for trial in range(5):
        src = rs.normal(size=(80, 3))
        tgt = rs.normal(size=(120, 3))
        res = icp_refine(src, tgt, Sim3Transform.identity())
        hist = np.asarray(res.rms_history)
        assert np.all(np.diff(hist) <= 1e-12)


def test_icp_empty_degenerate():
    with pytest.raises(DegenerateGeometryError):
        icp_refine(np.zeros((0, 3)), np.zeros((5, 3)), Sim3Transform.identity())
