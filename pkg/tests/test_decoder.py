import math

import numpy as np
import pytest

from sphersplat.decoder import (
    SH_C0,
    DecoderConfig,
    DecoderHeads,
    GaussianSet,
    build_covariance,
    decode_appearance,
    decode_center,
    decode_grid,
    decode_opacity,
    decode_shape,
    default_gamma,
    distance_scale_factor,
    rgb_to_sh,
    sh_to_rgb,
    sigmoid,
)
from sphersplat.geometry import GridSpec, matrix_to_quat
from sphersplat.grid import SparseSphericalGrid


def rot_z(deg):
    a = math.radians(deg)
    return np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1.0]])


def make_grid(n_cells=5, feature_dim=8, seed=0, spec=None):
    spec = spec or GridSpec(r_min=0.0, r_max=8.0, delta_r=1.0, n_theta=8, delta_phi=math.pi / 4)
    rs = np.random.default_rng(seed)
    lin = np.sort(rs.choice(spec.n_r * spec.n_theta * spec.n_phi, n_cells, replace=False))
    from sphersplat.geometry import delinearize_index

    idx = delinearize_index(lin, spec)
    centers = spec.bin_center(idx)[:, [0]] * np.array([[1.0, 0, 0]])  # on +x axis at bin radius
    g = SparseSphericalGrid(spec, idx, centers, np.ones(n_cells, np.int64))
    g.colors = rs.uniform(0, 1, (n_cells, 3))
    g.features = rs.normal(size=(n_cells, feature_dim))
    g.refined = rs.normal(size=(n_cells, feature_dim))
    return g


# ---------------------------------------------------------------------------
# parameter formulas
# ---------------------------------------------------------------------------


def test_center_zero_offset():
    mu = decode_center([[1.0, 2.0, 3.0]], [[0.0, 0.0, 0.0]], gamma=0.7)
    np.testing.assert_array_equal(mu, [[1.0, 2.0, 3.0]])


def test_center_saturates_at_gamma():
    mu = decode_center([[0.0, 0.0, 0.0]], [[1e3, 1e3, 1e3]], gamma=0.5)
    np.testing.assert_allclose(mu, [[0.5, 0.5, 0.5]], atol=1e-12)


def test_center_bound_sweep():
    rs = np.random.default_rng(0)
    raw = rs.normal(scale=30.0, size=(1000, 3))
    anchors = rs.normal(size=(1000, 3))
    gamma = 0.25
    mu = decode_center(anchors, raw, gamma)
    assert np.abs(mu - anchors).max() <= gamma + 1e-12


def test_opacity_values():
    assert decode_opacity(0.0) == pytest.approx(0.5)
    assert decode_opacity(10.0) == pytest.approx(0.9999546021312976, rel=1e-12)
    # strict open interval holds wherever doubles can represent it (|logit| < ~36)
    raw = np.random.default_rng(1).normal(scale=8.0, size=500)
    a = decode_opacity(raw)
    assert np.all((a > 0) & (a < 1))


def test_shape_midpoint_scale():
    cfg = DecoderConfig()
    log_s, _ = decode_shape(np.zeros((1, 3)), [[1.0, 0, 0, 0]], anchor_radius=[0.5], cfg=cfg)
    want = (cfg.log_scale_min + cfg.log_scale_max) / 2
    np.testing.assert_allclose(log_s, want, atol=1e-12)


def test_shape_scale_grows_with_radius():
    cfg = DecoderConfig(r_ref=1.0)
    raw = np.array([[0.3, -0.1, 0.7]])
    near, _ = decode_shape(raw, [[1.0, 0, 0, 0]], anchor_radius=[1.0], cfg=cfg)
    far, _ = decode_shape(raw, [[1.0, 0, 0, 0]], anchor_radius=[10.0], cfg=cfg)
    np.testing.assert_allclose(np.exp(far) / np.exp(near), 10.0, rtol=1e-12)


def test_shape_quaternion_normalized():
    _, q = decode_shape(np.zeros((1, 3)), [[2.0, 0, 0, 0]], anchor_radius=[1.0], cfg=DecoderConfig())
    np.testing.assert_allclose(q, [[1.0, 0, 0, 0]], atol=1e-12)


def test_shape_zero_quaternion_falls_back_to_identity(caplog):
    import logging

    with caplog.at_level(logging.WARNING):
        _, q = decode_shape(
            np.zeros((1, 3)), [[0.0, 0, 0, 0]], anchor_radius=[1.0], cfg=DecoderConfig()
        )
    np.testing.assert_allclose(q, [[1.0, 0, 0, 0]], atol=1e-12)
    assert any("zero-norm" in r.message for r in caplog.records)


def test_kappa_clamps_below_reference():
    np.testing.assert_allclose(distance_scale_factor([0.1, 0.5, 1.0, 3.0]), [1, 1, 1, 3])


def test_covariance_identity_rotation():
    cov = build_covariance([2.0, 3.0, 4.0], [1.0, 0, 0, 0])
    np.testing.assert_allclose(cov, np.diag([4.0, 9.0, 16.0]), atol=1e-12)


def test_covariance_axis_swap_by_rotation():
    q = matrix_to_quat(rot_z(90.0))
    cov = build_covariance([2.0, 3.0, 4.0], q)
    np.testing.assert_allclose(cov, np.diag([9.0, 4.0, 16.0]), atol=1e-10)


def test_covariance_psd_and_eigenvalues():
    rs = np.random.default_rng(2)
    for _ in range(20):
        s = rs.uniform(0.1, 2.0, 3)
        q = rs.normal(size=4)
        q /= np.linalg.norm(q)
        cov = build_covariance(s, q)
        np.testing.assert_allclose(cov, cov.T, atol=1e-10)
        eig = np.linalg.eigvalsh(cov)
        assert eig.min() > -1e-10
        np.testing.assert_allclose(np.sort(np.sqrt(eig)), np.sort(s), atol=1e-9)


def test_appearance_gray_maps_to_zero():
    dc, _ = decode_appearance([[0.5, 0.5, 0.5]], np.zeros((1, 3)), np.zeros((1, 9)), sh_degree=1)
    np.testing.assert_allclose(dc, 0.0, atol=1e-12)


def test_appearance_white_dc_value():
    dc, _ = decode_appearance([[1.0, 1.0, 1.0]], np.zeros((1, 3)), np.zeros((1, 9)), sh_degree=1)
    np.testing.assert_allclose(dc, 0.5 / SH_C0, rtol=1e-12)
    assert dc[0, 0] == pytest.approx(1.7724538509055159, rel=1e-9)


def test_appearance_round_trip():
    rgb = np.array([[0.2, 0.7, 0.9]])
    dc, _ = decode_appearance(rgb, np.zeros((1, 3)), np.zeros((1, 9)), sh_degree=1)
    np.testing.assert_allclose(sh_to_rgb(dc), rgb, atol=1e-12)


def test_rgb_sh_inverse_pair():
    rs = np.random.default_rng(3)
    c = rs.uniform(0, 1, (10, 3))
    np.testing.assert_allclose(sh_to_rgb(rgb_to_sh(c)), c, atol=1e-12)


# ---------------------------------------------------------------------------
# decode_grid
# ---------------------------------------------------------------------------


def test_decode_empty_grid():
    spec = GridSpec(r_min=0.0, r_max=8.0, delta_r=1.0, n_theta=8, delta_phi=math.pi / 4)
    g = SparseSphericalGrid(spec, np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))
    g.colors = np.zeros((0, 3))
    g.features = np.zeros((0, 8))
    g.refined = np.zeros((0, 8))
    cfg = DecoderConfig()
    heads = DecoderHeads.seeded(8, cfg, seed=0)
    out = decode_grid(g, cfg, heads)
    assert len(out) == 0


def test_decode_count_law():
    g = make_grid(n_cells=5)
    cfg = DecoderConfig(k=2)
    heads = DecoderHeads.seeded(8, cfg, seed=1)
    out = decode_grid(g, cfg, heads)
    assert len(out) == 10
    cfg3 = DecoderConfig(k=3)
    heads3 = DecoderHeads.seeded(8, cfg3, seed=1)
    assert len(decode_grid(g, cfg3, heads3)) == 15


def test_decode_deterministic_bitwise():
    g = make_grid(n_cells=7, seed=4)
    cfg = DecoderConfig()
    heads = DecoderHeads.seeded(8, cfg, seed=2)
    a = decode_grid(g, cfg, heads)
    b = decode_grid(g, cfg, heads)
    for f in ("mu", "log_scale", "rot", "opacity_logit", "sh_dc", "sh_rest"):
        assert np.array_equal(getattr(a, f), getattr(b, f))


def test_decode_offsets_bounded_by_gamma():
    g = make_grid(n_cells=20, seed=5)
    cfg = DecoderConfig(gamma=0.1)
    heads = DecoderHeads.seeded(8, cfg, seed=3)
    out = decode_grid(g, cfg, heads)
    anchors = np.repeat(g.centers, cfg.k, axis=0)
    assert np.abs(out.mu - anchors.astype(np.float32)).max() <= 0.1 + 1e-6


def test_decode_default_gamma_is_half_voxel_diagonal():
    g = make_grid(n_cells=3, seed=6)
    gamma = default_gamma(g)
    spec = g.spec
    r_c = spec.bin_center(g.indices)[:, 0]
    want = 0.5 * np.sqrt(
        spec.delta_r**2 + (r_c * spec.delta_theta) ** 2 + (r_c * spec.delta_phi) ** 2
    )
    np.testing.assert_allclose(gamma, want, rtol=1e-12)


def test_decode_scale_within_bounds():
    g = make_grid(n_cells=20, seed=7)
    cfg = DecoderConfig()
    heads = DecoderHeads.seeded(8, cfg, seed=5)
    out = decode_grid(g, cfg, heads)
    radius = np.repeat(np.linalg.norm(g.centers, axis=1), cfg.k)
    kappa = distance_scale_factor(radius, cfg.r_ref)
    lo = np.exp(cfg.log_scale_min) * kappa
    hi = np.exp(cfg.log_scale_max) * kappa
    s = out.scales
    assert np.all(s >= lo[:, None] * (1 - 1e-6))
    assert np.all(s <= hi[:, None] * (1 + 1e-6))


def test_decode_unit_quaternions_and_open_opacity():
    g = make_grid(n_cells=10, seed=8)
    cfg = DecoderConfig()
    heads = DecoderHeads.seeded(8, cfg, seed=6)
    out = decode_grid(g, cfg, heads)
    np.testing.assert_allclose(np.linalg.norm(out.rot, axis=1), 1.0, atol=1e-6)
    a = out.opacities
    assert np.all((a > 0) & (a < 1))


def test_gaussian_density_decreases_with_radius():
    # uniform cloud -> constant K per occupied cell while shell volume grows ~r^2
    from sphersplat.grid import voxelize
    from tests.test_grid import make_samples

    rs = np.random.default_rng(13)
    n = 150_000
    r = (rs.uniform(1.0**3, 5.0**3, n)) ** (1 / 3)
    u = rs.uniform(-1, 1, n)
    th = rs.uniform(-math.pi, math.pi, n)
    xy = np.sqrt(1 - u * u)
    pts = np.stack([r * xy * np.cos(th), r * xy * np.sin(th), r * u], axis=-1)
    spec = GridSpec(r_min=1.0, r_max=5.0, delta_r=1.0, n_theta=24, delta_phi=math.pi / 12)
    grid, _ = voxelize(make_samples(pts, seed=13), spec)
    k = 2
    density = []
    for shell in range(spec.n_r):
        r_lo = spec.r_min + shell * spec.delta_r
        r_hi = r_lo + spec.delta_r
        shell_volume = 4.0 / 3.0 * math.pi * (r_hi**3 - r_lo**3)
        n_cells = int((grid.indices[:, 0] == shell).sum())
        density.append(k * n_cells / shell_volume)
    assert all(b < a for a, b in zip(density, density[1:]))


def test_heads_npz_round_trip(tmp_path):
    cfg = DecoderConfig()
    heads = DecoderHeads.seeded(8, cfg, seed=9)
    path = tmp_path / "heads.npz"
    heads.save_npz(path)
    loaded = DecoderHeads.load_npz(path)
    for name in ("center", "opacity", "scale", "quat", "sh_dc", "sh_rest"):
        a = getattr(heads, name)
        b = getattr(loaded, name)
        np.testing.assert_array_equal(a.flat_parameters(), b.flat_parameters())


def test_sh_degree_zero_has_no_rest_head():
    cfg = DecoderConfig(sh_degree=0)
    heads = DecoderHeads.seeded(8, cfg, seed=10)
    assert heads.sh_rest is None
    g = make_grid(n_cells=4, seed=11)
    out = decode_grid(g, cfg, heads)
    assert out.sh_rest.shape == (8, 3, 0)
    assert out.sh_degree == 0
