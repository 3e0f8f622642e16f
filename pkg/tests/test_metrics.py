import math

import numpy as np
import pytest

from sphersplat.errors import (
    DimensionMismatchError,
    EmptyCloudError,
    EmptyMaskError,
    EmptyTargetsError,
)
from sphersplat.geometry import Sim3Transform, matrix_to_quat
from sphersplat.metrics import (
    ChamferResult,
    LidarTargets,
    LossWeights,
    NormalMap,
    chamfer_metrics,
    format_metrics,
    normal_loss,
    normals_from_pointmap,
    point_loss,
    psnr,
    solve_scale,
    ssim,
    total_loss,
)


def rot_z(deg):
    a = math.radians(deg)
    return np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1.0]])


def random_targets(n=50, seed=0):
    rs = np.random.default_rng(seed)
    pts = rs.uniform(-2, 2, (n, 3)) + [0, 0, 4.0]
    return LidarTargets(points=pts, depths=pts[:, 2])


# ---------------------------------------------------------------------------
# point loss / scale
# ---------------------------------------------------------------------------


def test_point_loss_zero_on_match():
    t = random_targets()
    assert point_loss(t.points, t, scale=1.0) == pytest.approx(0.0, abs=1e-15)


def test_point_loss_scale_absorption():
    t = random_targets(seed=1)
    assert point_loss(2.0 * t.points, t, scale=0.5) == pytest.approx(0.0, abs=1e-12)


def test_point_loss_single_point_arithmetic():
    t = LidarTargets(points=[[0.1, 0.1, 2.1]], depths=[2.0])
    # |s*pred - target|_1 = 0.3 at depth 2 -> 0.15
    loss = point_loss([[0.0, 0.0, 2.0]], t, scale=1.0, eps=0.0)
    assert loss == pytest.approx(0.15, rel=1e-12)


def test_point_loss_empty_targets():
    with pytest.raises(EmptyTargetsError):
        point_loss(np.zeros((0, 3)), LidarTargets(np.zeros((0, 3)), np.zeros(0)))


def test_solve_scale_identity():
    t = random_targets(seed=2)
    assert solve_scale(t.points, t) == pytest.approx(1.0, abs=1e-4)


def test_solve_scale_inverse():
    t = random_targets(seed=3)
    assert solve_scale(t.points / 3.0, t) == pytest.approx(3.0, abs=1e-3)


def test_solve_scale_matches_grid_search_oracle():
    rs = np.random.default_rng(4)
    for trial in range(3):
        t = random_targets(n=30, seed=10 + trial)
        pred = t.points * rs.uniform(0.3, 3.0) + rs.normal(scale=0.01, size=t.points.shape)
        s_hat = solve_scale(pred, t)
        grid = np.linspace(1e-3, 10.0, 10_000)
        oracle = min(point_loss(pred, t, s) for s in grid)
        assert point_loss(pred, t, s_hat) <= oracle + 1e-6


# ---------------------------------------------------------------------------
# normals
# ---------------------------------------------------------------------------


def plane_pointmap(h, w, fz):
    r, c = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    x = c * 0.1
    y = r * 0.1
    return np.stack([x, y, fz(x, y)], axis=-1)


def test_normals_flat_plane():
    nm = normals_from_pointmap(plane_pointmap(6, 5, lambda x, y: np.full_like(x, 2.0)))
    assert nm.valid[:-1, :-1].all()
    assert not nm.valid[-1].any() and not nm.valid[:, -1].any()
    got = nm.normals[nm.valid]
    np.testing.assert_allclose(np.abs(got[:, 2]), 1.0, atol=1e-12)


def test_normals_tilted_plane():
    nm = normals_from_pointmap(plane_pointmap(6, 5, lambda x, y: x))
    want = np.array([-1.0, 0.0, 1.0]) / math.sqrt(2)
    np.testing.assert_allclose(nm.normals[nm.valid], np.tile(want, (nm.valid.sum(), 1)), atol=1e-12)


def test_normals_degenerate_pixels_invalid():
    pm = plane_pointmap(4, 4, lambda x, y: np.zeros_like(x))
    pm[1, 2] = pm[1, 1]  # coincident neighbor kills the cross product
    nm = normals_from_pointmap(pm)
    assert not nm.valid[1, 1]


def test_normal_loss_identities():
    nm = normals_from_pointmap(plane_pointmap(5, 5, lambda x, y: np.full_like(x, 1.0)))
    assert normal_loss(nm, nm) == pytest.approx(0.0, abs=1e-12)
    flipped = NormalMap(-nm.normals, nm.valid)
    assert normal_loss(nm, flipped) == pytest.approx(math.pi, rel=1e-12)
    ortho = NormalMap(np.roll(nm.normals, 1, axis=-1), nm.valid)  # (0,0,1) -> (1,0,0)
    assert normal_loss(nm, ortho) == pytest.approx(math.pi / 2, rel=1e-12)


def test_normal_loss_empty_mask():
    nm = normals_from_pointmap(plane_pointmap(4, 4, lambda x, y: np.full_like(x, 1.0)))
    empty = NormalMap(nm.normals, np.zeros_like(nm.valid))
    with pytest.raises(EmptyMaskError):
        normal_loss(nm, empty)


def test_normal_loss_range():
    rs = np.random.default_rng(5)
    n = rs.normal(size=(8, 8, 3))
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    m = rs.normal(size=(8, 8, 3))
    m /= np.linalg.norm(m, axis=-1, keepdims=True)
    valid = np.ones((8, 8), bool)
    loss = normal_loss(NormalMap(n, valid), NormalMap(m, valid))
    assert 0.0 <= loss <= math.pi


# ---------------------------------------------------------------------------
# total loss
# ---------------------------------------------------------------------------


def test_total_loss_zero_components():
    assert total_loss(0.0, 0.0, 0.0) == 0.0


def test_total_loss_unit_weights_sum():
    w = LossWeights(mse=1.0, lpips=1.0, points=1.0, normal=1.0)
    assert total_loss(1.0, 2.0, 3.0, weights=w, lpips=0.0) == pytest.approx(6.0)


def test_total_loss_zero_weights():
    w = LossWeights(mse=0.0, lpips=0.0, points=0.0, normal=0.0)
    assert total_loss(9.0, 4.0, 7.0, weights=w, lpips=3.0) == 0.0


def test_total_loss_rejects_negative_weights():
    with pytest.raises(ValueError):
        LossWeights(mse=-1.0)


# ---------------------------------------------------------------------------
# chamfer
# ---------------------------------------------------------------------------


def test_chamfer_identical_clouds():
    pts = np.random.default_rng(6).normal(size=(40, 3))
    res = chamfer_metrics(pts, pts)
    assert (res.accuracy, res.completeness, res.overall) == (0.0, 0.0, 0.0)


def test_chamfer_unit_offset():
    res = chamfer_metrics(np.zeros((1, 3)), np.array([[1.0, 0, 0]]))
    assert res == ChamferResult(1.0, 1.0, 1.0, None)


def test_chamfer_against_bruteforce_oracle():
    rs = np.random.default_rng(7)
    for trial in range(20):
        a = rs.normal(size=(20, 3))
        b = rs.normal(size=(20, 3))
        res = chamfer_metrics(a, b)
        d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
        acc = d.min(axis=1).mean()
        comp = d.min(axis=0).mean()
        assert abs(res.accuracy - acc) < 1e-12
        assert abs(res.completeness - comp) < 1e-12
        assert abs(res.overall - (acc + comp) / 2) < 1e-12


def test_chamfer_symmetry():
    rs = np.random.default_rng(8)
    a = rs.normal(size=(25, 3))
    b = rs.normal(size=(35, 3))
    ab = chamfer_metrics(a, b)
    ba = chamfer_metrics(b, a)
    assert ab.accuracy == pytest.approx(ba.completeness)
    assert ab.completeness == pytest.approx(ba.accuracy)
    assert ab.overall == pytest.approx(ba.overall)


def test_chamfer_alignment_improves_overall():
    rs = np.random.default_rng(9)
    gt = rs.normal(size=(200, 3))
    warp = Sim3Transform(scale=1.4, quat=matrix_to_quat(rot_z(20.0)), translation=[0.5, -0.2, 0.8])
    pred = warp.apply(gt)
    raw = chamfer_metrics(pred, gt, align=False)
    aligned = chamfer_metrics(pred, gt, align=True)
    assert aligned.overall <= raw.overall
    assert aligned.overall < 1e-9


def test_chamfer_empty_cloud():
    with pytest.raises(EmptyCloudError):
        chamfer_metrics(np.zeros((0, 3)), np.ones((3, 3)))


# ---------------------------------------------------------------------------
# psnr / ssim
# ---------------------------------------------------------------------------


def test_psnr_identical_is_infinite():
    img = np.random.default_rng(10).uniform(0, 1, (16, 16, 3))
    assert psnr(img, img) == math.inf


def test_psnr_black_vs_white():
    assert psnr(np.zeros((8, 8)), np.ones((8, 8))) == pytest.approx(0.0, abs=1e-12)


def test_psnr_matches_direct_formula():
    rs = np.random.default_rng(11)
    for _ in range(10):
        a = rs.uniform(0, 1, (12, 9, 3))
        b = rs.uniform(0, 1, (12, 9, 3))
        want = 10 * math.log10(1.0 / np.mean((a - b) ** 2))
        assert psnr(a, b) == pytest.approx(want, abs=1e-9)


def test_psnr_shape_mismatch():
    with pytest.raises(DimensionMismatchError):
        psnr(np.zeros((4, 4)), np.zeros((5, 4)))


def test_ssim_identical_is_one():
    img = np.random.default_rng(12).uniform(0, 1, (24, 24, 3))
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)


def test_ssim_range_and_sensitivity():
    rs = np.random.default_rng(13)
    a = rs.uniform(0, 1, (32, 32))
    b = rs.uniform(0, 1, (32, 32))
    v = ssim(a, b)
    assert -1.0 <= v <= 1.0
    assert v < 1.0
    slightly = np.clip(a + 0.01 * rs.normal(size=a.shape), 0, 1)
    assert ssim(a, slightly) > v


def test_format_metrics_lines():
    text = format_metrics({"psnr": 24.5, "cells": 17})
    assert text.splitlines() == ["psnr=24.5", "cells=17"]
