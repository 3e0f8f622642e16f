"""Evaluation utilities: geometric losses, Chamfer protocol, PSNR/SSIM.

The scale-aware point loss treats the alignment scale as a free scalar;
here it is solved per evaluation by golden-section search (the loss is
convex in s). Chamfer accuracy/completeness follow the usual protocol:
optional Sim(3) alignment (Umeyama init + ICP refinement) and mean
nearest-neighbor distances in both directions. The perceptual term of the
total loss is accepted as an externally supplied number (or zero); no
learned metric is computed here.

All distances are unit-preserving (meters in, meters out).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve
from scipy.spatial import cKDTree

from .errors import (
    DimensionMismatchError,
    EmptyCloudError,
    EmptyMaskError,
    EmptyTargetsError,
)
from .geometry import IcpConfig, Sim3Transform, icp_refine, umeyama_align


@dataclass
class LidarTargets:
    """Sparse metric supervision: one 3D target + depth per supervised pixel."""

    points: np.ndarray  # (N, 3) camera frame, meters
    depths: np.ndarray  # (N,) > 0
    pixels: np.ndarray | None = None  # (N, 2) optional (row, col) bookkeeping

    def __post_init__(self):
        self.points = np.asarray(self.points, np.float64).reshape(-1, 3)
        self.depths = np.asarray(self.depths, np.float64).reshape(-1)
        if self.depths.shape[0] != self.points.shape[0]:
            raise DimensionMismatchError("depths and points must pair up")
        if np.any(self.depths <= 0):
            raise ValueError("lidar depths must be positive")

    def __len__(self):
        return self.points.shape[0]


def point_loss(pred_points, targets: LidarTargets, scale: float = 1.0, eps: float = 1e-6) -> float:
    """Depth-weighted L1: mean over pixels of |s*pred - target|_1 / (depth + eps)."""
    if len(targets) == 0:
        raise EmptyTargetsError("no supervised pixels")
    pred = np.asarray(pred_points, np.float64).reshape(-1, 3)
    if pred.shape != targets.points.shape:
        raise DimensionMismatchError("prediction/target count mismatch")
    l1 = np.abs(scale * pred - targets.points).sum(axis=1)
    return float(np.mean(l1 / (targets.depths + eps)))


def solve_scale(
    pred_points,
    targets: LidarTargets,
    eps: float = 1e-6,
    bracket=(1e-3, 1e3),
    tol: float = 1e-6,
) -> float:
    """Golden-section minimizer of :func:`point_loss` over the scale bracket."""
    if len(targets) == 0:
        raise EmptyTargetsError("no supervised pixels")
    pred = np.asarray(pred_points, np.float64).reshape(-1, 3)

    def f(s):
        return point_loss(pred, targets, s, eps)

    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    lo, hi = bracket
    a, b = hi - inv_phi * (hi - lo), lo + inv_phi * (hi - lo)
    fa, fb = f(a), f(b)
    while hi - lo > tol:
        if fa <= fb:
            hi, b, fb = b, a, fa
            a = hi - inv_phi * (hi - lo)
            fa = f(a)
        else:
            lo, a, fa = a, b, fb
            b = lo + inv_phi * (hi - lo)
            fb = f(b)
    return float((lo + hi) / 2.0)


@dataclass
class NormalMap:
    normals: np.ndarray  # (H, W, 3), unit where valid
    valid: np.ndarray  # (H, W) bool


def normals_from_pointmap(points, degenerate_eps: float = 1e-12) -> NormalMap:
    """Per-pixel normals from cross products of the image-grid neighbors.

    n(r, c) = normalize((X[r, c+1] - X[r, c]) x (X[r+1, c] - X[r, c]));
    the last row/column and near-zero cross products are invalid.
    """
    x = np.asarray(points, np.float64)
    h, w = x.shape[:2]
    if h < 2 or w < 2:
        raise DimensionMismatchError("point map must be at least 2x2")
    dc = x[:-1, 1:] - x[:-1, :-1]
    dr = x[1:, :-1] - x[:-1, :-1]
    cross = np.cross(dc, dr)
    norm = np.linalg.norm(cross, axis=-1)
    ok = norm > degenerate_eps
    normals = np.zeros((h, w, 3))
    valid = np.zeros((h, w), bool)
    normals[:-1, :-1][ok] = cross[ok] / norm[ok][:, None]
    valid[:-1, :-1] = ok
    return NormalMap(normals, valid)


def normal_loss(pred: NormalMap, target: NormalMap) -> float:
    """Mean angular error arccos(n_hat . n) over jointly valid pixels."""
    both = pred.valid & target.valid
    if not both.any():
        raise EmptyMaskError("no jointly valid pixels")
    dots = np.sum(pred.normals[both] * target.normals[both], axis=-1)
    return float(np.mean(np.arccos(np.clip(dots, -1.0, 1.0))))


@dataclass(frozen=True)
class LossWeights:
    mse: float = 1.0
    lpips: float = 0.0
    points: float = 1.0
    normal: float = 1.0

    def __post_init__(self):
        if min(self.mse, self.lpips, self.points, self.normal) < 0:
            raise ValueError("loss weights must be non-negative")


def total_loss(
    mse: float,
    points: float,
    normal: float,
    weights: LossWeights = LossWeights(),
    lpips: float = 0.0,
) -> float:
    """Weighted sum of the four objectives; the perceptual term is supplied
    externally (or left at zero)."""
    return (
        weights.mse * mse
        + weights.lpips * lpips
        + weights.points * points
        + weights.normal * normal
    )


@dataclass(frozen=True)
class ChamferResult:
    accuracy: float  # mean pred -> gt nearest distance
    completeness: float  # mean gt -> pred nearest distance
    overall: float  # arithmetic mean of the two
    alignment: Sim3Transform | None = None


def chamfer_metrics(pred_cloud, gt_cloud, align: bool = False) -> ChamferResult:
    """Accuracy / Completeness / Overall with optional Sim(3) pre-alignment.

    With `align`, equal-cardinality clouds get an index-paired Umeyama
    initialization; otherwise ICP starts from identity. Nearest neighbors
    are exact (KD-tree).
    """
    pred = np.asarray(pred_cloud, np.float64).reshape(-1, 3)
    gt = np.asarray(gt_cloud, np.float64).reshape(-1, 3)
    if pred.shape[0] == 0 or gt.shape[0] == 0:
        raise EmptyCloudError("chamfer_metrics needs two non-empty clouds")

    transform = None
    if align:
        init = Sim3Transform.identity()
        if pred.shape[0] == gt.shape[0]:
            try:
                init = umeyama_align(pred, gt)
            except Exception:
                init = Sim3Transform.identity()
        transform = icp_refine(pred, gt, init, IcpConfig()).transform
        pred = transform.apply(pred)

    acc = float(np.mean(cKDTree(gt).query(pred)[0]))
    comp = float(np.mean(cKDTree(pred).query(gt)[0]))
    return ChamferResult(acc, comp, (acc + comp) / 2.0, transform)


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for [0, 1] images; +inf for identical inputs."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    g = np.exp(-0.5 * ((np.arange(size) - half) / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a, b, window: int = 11, sigma: float = 1.5, c1: float = 0.01**2, c2: float = 0.03**2):
    """Mean structural similarity with a Gaussian window, data range [0, 1]."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if a.shape[0] < window or a.shape[1] < window:
        raise DimensionMismatchError("image smaller than the SSIM window")
    kernel = _gaussian_window(window, sigma)

    def filt(img):
        return fftconvolve(img, kernel, mode="valid")

    values = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mu_x, mu_y = filt(x), filt(y)
        xx = filt(x * x) - mu_x * mu_x
        yy = filt(y * y) - mu_y * mu_y
        xy = filt(x * y) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
        values.append(np.mean(num / den))
    return float(np.mean(values))


def format_metrics(metrics: dict) -> str:
    """Render metrics as machine-parseable `name=value` lines."""
    lines = []
    for key, value in metrics.items():
        if isinstance(value, float):
            lines.append(f"{key}={value:.10g}")
        else:
            lines.append(f"{key}={value}")
    return "\n".join(lines)
