"""Forward-only CPU rasterizer for Gaussian sets.

Each primitive is projected to a 2D Gaussian through the perspective-affine
(EWA) approximation: Sigma2D = J R Sigma R^T J^T with J the Jacobian of the
pinhole projection at the primitive center. Primitives are splatted
front-to-back in view-space depth order (stable, ties by primitive index)
with per-pixel alpha compositing; contributions below `alpha_cutoff` are
skipped and a pixel stops compositing once its transmittance drops under
`transmittance_min`. Rendered depth is the alpha-weighted mean of the
contributing view-space depths.

Rows are rasterized independently (numba prange), so output is identical
for any thread count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .decoder import GaussianSet, build_covariance
from .geometry import CameraModel

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)


@dataclass(frozen=True)
class RenderConfig:
    alpha_cutoff: float = 1.0 / 255.0
    transmittance_min: float = 1e-4
    cov_regularization: float = 1e-6
    sigma_cull: float = 3.0  # bounding box half-extent in splat sigmas


@dataclass
class RenderedImage:
    color: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) meters, 0 where empty
    alpha: np.ndarray  # (H, W) accumulated opacity


def set_thread_count(n: int):
    """Cap the rasterizer's worker threads (output is thread-count invariant).

    Requests beyond the machine's launchable maximum clamp down to it.
    """
    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


def evaluate_sh(sh_dc, sh_rest, view_dir) -> np.ndarray:
    """Evaluate the real SH basis (degree <= 2) and map to [0, 1] rgb.

    Follows the splatting convention: rgb = clamp(SH(dir) + 0.5).
    """
    dc = np.atleast_2d(np.asarray(sh_dc, np.float64))
    rest = np.asarray(sh_rest, np.float64)
    if rest.ndim == 2:
        rest = rest[None]
    d = np.atleast_2d(np.asarray(view_dir, np.float64))
    x, y, z = d[:, 0], d[:, 1], d[:, 2]

    rgb = SH_C0 * dc
    n_rest = rest.shape[2]
    if n_rest >= 3:
        rgb = rgb + SH_C1 * (
            -y[:, None] * rest[:, :, 0] + z[:, None] * rest[:, :, 1] - x[:, None] * rest[:, :, 2]
        )
    if n_rest >= 8:
        xx, yy, zz = x * x, y * y, z * z
        basis = np.stack(
            [
                SH_C2[0] * x * y,
                SH_C2[1] * y * z,
                SH_C2[2] * (2.0 * zz - xx - yy),
                SH_C2[3] * x * z,
                SH_C2[4] * (xx - yy),
            ],
            axis=1,
        )
        rgb = rgb + np.einsum("nk,nck->nc", basis, rest[:, :, 3:8])
    out = np.clip(rgb + 0.5, 0.0, 1.0)
    return out[0] if np.ndim(sh_dc) == 1 else out


@numba.njit(cache=True)
def _bin_rows(order, y_lo, y_hi, height):
    counts = np.zeros(height + 1, np.int64)
    for k in range(order.shape[0]):
        s = order[k]
        for r in range(y_lo[s], y_hi[s] + 1):
            counts[r + 1] += 1
    starts = np.cumsum(counts)
    entries = np.empty(starts[-1], np.int64)
    cursor = starts[:-1].copy()
    for k in range(order.shape[0]):  # depth order -> per-row lists stay depth sorted
        s = order[k]
        for r in range(y_lo[s], y_hi[s] + 1):
            entries[cursor[r]] = s
            cursor[r] += 1
    return starts, entries


@numba.njit(cache=True, parallel=True)
def _composite(
    height,
    width,
    starts,
    entries,
    centers,
    conics,
    alphas,
    colors,
    depths,
    x_lo,
    x_hi,
    alpha_cutoff,
    t_min,
    background,
    want_color,
    out_color,
    out_depth,
    out_alpha,
):
    for row in numba.prange(height):
        t_row = np.ones(width)
        c_acc = np.zeros((width, 3))
        d_acc = np.zeros(width)
        w_acc = np.zeros(width)
        for e in range(starts[row], starts[row + 1]):
            s = entries[e]
            dy = centers[s, 1] - (row + 0.5)
            qa = conics[s, 0]
            qb = conics[s, 1]
            qc = conics[s, 2]
            a_s = alphas[s]
            for col in range(x_lo[s], x_hi[s] + 1):
                t = t_row[col]
                if t < t_min:
                    continue
                dx = centers[s, 0] - (col + 0.5)
                power = -0.5 * (qa * dx * dx + qc * dy * dy) - qb * dx * dy
                if power > 0.0:
                    continue
                a_pix = a_s * math.exp(power)
                if a_pix < alpha_cutoff:
                    continue
                w = a_pix * t
                if want_color:
                    c_acc[col, 0] += w * colors[s, 0]
                    c_acc[col, 1] += w * colors[s, 1]
                    c_acc[col, 2] += w * colors[s, 2]
                d_acc[col] += w * depths[s]
                w_acc[col] += w
                t_row[col] = t * (1.0 - a_pix)
        for col in range(width):
            t = t_row[col]
            out_alpha[row, col] = 1.0 - t
            if want_color:
                out_color[row, col, 0] = c_acc[col, 0] + t * background[0]
                out_color[row, col, 1] = c_acc[col, 1] + t * background[1]
                out_color[row, col, 2] = c_acc[col, 2] + t * background[2]
            if w_acc[col] > 0.0:
                out_depth[row, col] = d_acc[col] / w_acc[col]


def _project_splats(gset: GaussianSet, cam: CameraModel, cfg: RenderConfig):
    """EWA projection of every primitive; returns splat arrays + depth order."""
    n = len(gset)
    if n == 0:
        return None
    mu = gset.mu.astype(np.float64)
    p_cam = mu @ cam.rotation.T + cam.translation
    z = p_cam[:, 2]
    keep = z > 1e-8
    if not keep.any():
        return None

    idx = np.nonzero(keep)[0]
    p = p_cam[idx]
    z = z[idx]
    u = cam.fx * p[:, 0] / z + cam.cx
    v = cam.fy * p[:, 1] / z + cam.cy

    sigma = build_covariance(gset.scales[idx], gset.rot[idx].astype(np.float64))
    sigma_cam = np.einsum("ij,njk,lk->nil", cam.rotation, sigma, cam.rotation)
    j = np.zeros((idx.size, 2, 3))
    j[:, 0, 0] = cam.fx / z
    j[:, 0, 2] = -cam.fx * p[:, 0] / (z * z)
    j[:, 1, 1] = cam.fy / z
    j[:, 1, 2] = -cam.fy * p[:, 1] / (z * z)
    cov2 = np.einsum("nab,nbc,ndc->nad", j, sigma_cam, j)
    cov2[:, 0, 0] += cfg.cov_regularization
    cov2[:, 1, 1] += cfg.cov_regularization

    det = cov2[:, 0, 0] * cov2[:, 1, 1] - cov2[:, 0, 1] * cov2[:, 0, 1]
    ok = det > 0
    mid = 0.5 * (cov2[:, 0, 0] + cov2[:, 1, 1])
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = cfg.sigma_cull * np.sqrt(lam_max)

    x_lo = np.ceil(u - radius - 0.5).astype(np.int64)
    x_hi = np.floor(u + radius - 0.5).astype(np.int64)
    y_lo = np.ceil(v - radius - 0.5).astype(np.int64)
    y_hi = np.floor(v + radius - 0.5).astype(np.int64)
    np.clip(x_lo, 0, cam.width - 1, out=x_lo)
    np.clip(x_hi, 0, cam.width - 1, out=x_hi)
    np.clip(y_lo, 0, cam.height - 1, out=y_lo)
    np.clip(y_hi, 0, cam.height - 1, out=y_hi)
    on_screen = (
        ok
        & (u + radius >= 0)
        & (u - radius <= cam.width)
        & (v + radius >= 0)
        & (v - radius <= cam.height)
        & (x_lo <= x_hi)
        & (y_lo <= y_hi)
    )
    if not on_screen.any():
        return None

    sel = np.nonzero(on_screen)[0]
    inv_det = 1.0 / det[sel]
    conics = np.stack(
        [cov2[sel, 1, 1] * inv_det, -cov2[sel, 0, 1] * inv_det, cov2[sel, 0, 0] * inv_det],
        axis=1,
    )
    order = np.argsort(z[sel], kind="stable")
    return {
        "source_rows": idx[sel],
        "centers": np.stack([u[sel], v[sel]], axis=1),
        "conics": conics,
        "depths": z[sel],
        "x_lo": x_lo[sel],
        "x_hi": x_hi[sel],
        "y_lo": y_lo[sel],
        "y_hi": y_hi[sel],
        "order": order,
    }


def _run_kernel(gset, cam, background, cfg, want_color):
    h, w = cam.height, cam.width
    out_color = np.zeros((h, w, 3))
    out_depth = np.zeros((h, w))
    out_alpha = np.zeros((h, w))
    bg = np.asarray(background, np.float64)
    splats = _project_splats(gset, cam, cfg)
    if splats is None:
        if want_color:
            out_color[:] = bg
        return RenderedImage(out_color, out_depth, out_alpha)

    rows = splats["source_rows"]
    if want_color:
        dirs = gset.mu[rows].astype(np.float64) - cam.center
        norms = np.linalg.norm(dirs, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        colors = evaluate_sh(
            gset.sh_dc[rows].astype(np.float64), gset.sh_rest[rows].astype(np.float64), dirs / norms
        )
    else:
        colors = np.zeros((rows.size, 3))

    starts, entries = _bin_rows(splats["order"], splats["y_lo"], splats["y_hi"], h)
    _composite(
        h,
        w,
        starts,
        entries,
        splats["centers"],
        splats["conics"],
        gset.opacities[rows],
        colors,
        splats["depths"],
        splats["x_lo"],
        splats["x_hi"],
        cfg.alpha_cutoff,
        cfg.transmittance_min,
        bg,
        want_color,
        out_color,
        out_depth,
        out_alpha,
    )
    return RenderedImage(out_color, out_depth, out_alpha)


def render(
    gset: GaussianSet,
    cam: CameraModel,
    background=(0.0, 0.0, 0.0),
    cfg: RenderConfig = RenderConfig(),
) -> RenderedImage:
    """Rasterize a Gaussian set into color, depth and alpha images."""
    return _run_kernel(gset, cam, background, cfg, want_color=True)


def render_coverage(
    gset: GaussianSet, cam: CameraModel, cfg: RenderConfig = RenderConfig()
) -> np.ndarray:
    """Alpha map only; identical compositing path with the color math skipped."""
    return _run_kernel(gset, cam, (0.0, 0.0, 0.0), cfg, want_color=False).alpha
