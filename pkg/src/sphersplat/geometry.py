"""Coordinate transforms, spherical binning, cameras and alignment primitives.

Conventions used throughout the package:

* Robot (world) frame: right-handed, x forward, y left, z up, meters.
* Camera frame: x right, y down, z forward (standard CV pinhole).
* Spherical coordinates: ``r = |p|``, ``theta = atan2(y, x)`` in [-pi, pi),
  ``phi = atan2(z, sqrt(x^2 + y^2 + eps))`` in [-pi/2, pi/2].
* Rotations are kept as unit quaternions ``(w, x, y, z)`` and expanded to
  matrices on demand.

All functions are pure and accept either a single point ``(3,)`` or a batch
``(N, 3)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import BehindCameraError, DegenerateGeometryError, OutOfRangeError

TWO_PI = 2.0 * math.pi


def normalize_angle(theta):
    """Wrap angles into [-pi, pi)."""
    return (np.asarray(theta) + math.pi) % TWO_PI - math.pi


def to_spherical(points, epsilon: float = 1e-8) -> np.ndarray:
    """Convert cartesian points to spherical (r, theta, phi) columns.

    ``epsilon`` guards the pole singularity inside the sqrt of the
    elevation term; theta is normalized into [-pi, pi).
    """
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    r = np.sqrt(x * x + y * y + z * z)
    theta = normalize_angle(np.arctan2(y, x))
    phi = np.arctan2(z, np.sqrt(x * x + y * y + epsilon))
    out = np.stack([r, theta, phi], axis=-1)
    return out[0] if single else out


def from_spherical(sph) -> np.ndarray:
    """Inverse of :func:`to_spherical` (exact for epsilon = 0)."""
    s = np.asarray(sph, dtype=np.float64)
    single = s.ndim == 1
    s = np.atleast_2d(s)
    r, theta, phi = s[:, 0], s[:, 1], s[:, 2]
    cp = np.cos(phi)
    out = np.stack([r * cp * np.cos(theta), r * cp * np.sin(theta), r * np.sin(phi)], axis=-1)
    return out[0] if single else out


@dataclass(frozen=True)
class GridSpec:
    """Spherical voxel grid: radial shells x azimuth bins x elevation bins.

    Bins are half-open [lo, hi); points on a boundary belong to the upper
    bin. Points with r >= r_max are clamped into the last radial shell so
    that far content stays representable; r < r_min is out of range. The
    elevation span [phi_0, phi_0 + pi] must be covered by a whole number
    of bins.
    """

    r_min: float = 0.2
    r_max: float = 50.0
    delta_r: float = 0.5
    n_theta: int = 180
    delta_phi: float = math.radians(2.0)
    theta_0: float = -math.pi
    phi_0: float = -math.pi / 2
    epsilon: float = 1e-8

    def __post_init__(self):
        if not (0.0 <= self.r_min < self.r_max):
            raise ValueError(f"need 0 <= r_min < r_max, got [{self.r_min}, {self.r_max})")
        if self.delta_r <= 0 or self.delta_phi <= 0:
            raise ValueError("bin sizes must be positive")
        if self.n_theta < 1:
            raise ValueError("n_theta must be >= 1")
        n_phi = round(math.pi / self.delta_phi)
        if n_phi < 1 or abs(n_phi * self.delta_phi - math.pi) > 1e-9:
            raise ValueError("phi range must be an integer number of delta_phi bins")

    @property
    def delta_theta(self) -> float:
        return TWO_PI / self.n_theta

    @property
    def n_r(self) -> int:
        return int(math.ceil((self.r_max - self.r_min) / self.delta_r))

    @property
    def n_phi(self) -> int:
        return round(math.pi / self.delta_phi)

    def bin_center(self, index) -> np.ndarray:
        """Spherical coordinates (r, theta, phi) of a voxel's center."""
        idx = np.asarray(index, dtype=np.float64)
        single = idx.ndim == 1
        idx = np.atleast_2d(idx)
        r = self.r_min + (idx[:, 0] + 0.5) * self.delta_r
        theta = self.theta_0 + (idx[:, 1] + 0.5) * self.delta_theta
        phi = self.phi_0 + (idx[:, 2] + 0.5) * self.delta_phi
        out = np.stack([r, theta, phi], axis=-1)
        return out[0] if single else out


def voxel_indices(sph, spec: GridSpec):
    """Vectorized binning: returns ((N, 3) int64 indices, (N,) valid mask).

    Invalid rows (r < r_min or phi outside bounds) carry index -1. The
    exact upper elevation boundary phi = phi_0 + pi is inside the range
    and clamps into the top bin.
    """
    s = np.atleast_2d(np.asarray(sph, dtype=np.float64))
    r, theta, phi = s[:, 0], s[:, 1], s[:, 2]

    i_r = np.floor((r - spec.r_min) / spec.delta_r).astype(np.int64)
    np.clip(i_r, None, spec.n_r - 1, out=i_r)  # far content folds into last shell

    frac = ((theta - spec.theta_0) % TWO_PI) / TWO_PI
    i_theta = np.floor(frac * spec.n_theta).astype(np.int64)
    np.clip(i_theta, 0, spec.n_theta - 1, out=i_theta)

    i_phi = np.floor((phi - spec.phi_0) / spec.delta_phi).astype(np.int64)
    # the exact top boundary (and fp overshoot of it) belongs to the last bin
    top = (i_phi == spec.n_phi) & (phi <= spec.phi_0 + math.pi + 1e-12)
    i_phi[top] = spec.n_phi - 1

    valid = (r >= spec.r_min) & (i_phi >= 0) & (i_phi < spec.n_phi)
    idx = np.stack([i_r, i_theta, i_phi], axis=-1)
    idx[~valid] = -1
    return idx, valid


def voxel_index(sph, spec: GridSpec) -> np.ndarray:
    """Bin one spherical coordinate; raises OutOfRangeError when invalid."""
    idx, valid = voxel_indices(np.asarray(sph, dtype=np.float64)[None, :], spec)
    if not valid[0]:
        raise OutOfRangeError(f"point {tuple(np.asarray(sph))} outside grid bounds")
    return idx[0]


def linearize_index(idx, spec: GridSpec) -> np.ndarray:
    """Flatten (i_r, i_theta, i_phi) to a single sortable int64 key."""
    idx = np.atleast_2d(np.asarray(idx, dtype=np.int64))
    return (idx[:, 0] * spec.n_theta + idx[:, 1]) * spec.n_phi + idx[:, 2]


def delinearize_index(lin, spec: GridSpec) -> np.ndarray:
    lin = np.asarray(lin, dtype=np.int64)
    i_phi = lin % spec.n_phi
    rest = lin // spec.n_phi
    return np.stack([rest // spec.n_theta, rest % spec.n_theta, i_phi], axis=-1)


def spherical_bin_volume(r_c, phi_c, delta_r, delta_theta, delta_phi):
    """Volume of a spherical bin evaluated at its center: r^2 cos(phi) dr dtheta dphi."""
    r_c = np.asarray(r_c, dtype=np.float64)
    return r_c * r_c * np.cos(phi_c) * delta_r * delta_theta * delta_phi


def voxel_volume(index, spec: GridSpec):
    """Approximate volume (m^3) of one or more voxels, bin-center evaluation."""
    center = spec.bin_center(index)
    c = np.atleast_2d(center)
    vol = spherical_bin_volume(c[:, 0], c[:, 2], spec.delta_r, spec.delta_theta, spec.delta_phi)
    return float(vol[0]) if np.asarray(index).ndim == 1 else vol


# ---------------------------------------------------------------------------
# Quaternions (w, x, y, z)
# ---------------------------------------------------------------------------


def quat_normalize(q, eps: float = 1e-12) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < eps):
        raise DegenerateGeometryError("zero-norm quaternion")
    return q / n


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix for unit quaternion(s); batched over leading axes."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product a * b, batched."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w1, x1, y1, z1 = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    w2, x2, y2, z2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def matrix_to_quat(m) -> np.ndarray:
    """Unit quaternion for a single orthonormal rotation matrix (Shepperd)."""
    m = np.asarray(m, dtype=np.float64)
    t = np.trace(m)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] >= m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


# ---------------------------------------------------------------------------
# Cameras
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: p_cam = R @ p_world + t, u = fx x/z + cx, v = fy y/z + cy."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3, 3) world -> camera
    translation: np.ndarray  # (3,)
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))
        r = self.rotation
        if r.shape != (3, 3) or np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9:
            raise ValueError("rotation must be orthonormal (3, 3)")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def center(self) -> np.ndarray:
        """Camera optical center in the world frame."""
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def camera_to_world(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return (p - self.translation) @ self.rotation

    def project_many(self, points_world):
        """Batched projection: ((N, 2) pixels, (N,) depth, (N,) in-front mask)."""
        p_cam = np.atleast_2d(self.world_to_camera(points_world))
        z = p_cam[:, 2]
        in_front = z > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * p_cam[:, 0] / z + self.cx
            v = self.fy * p_cam[:, 1] / z + self.cy
        return np.stack([u, v], axis=-1), z, in_front

    def project(self, point_world):
        """Project one point; raises BehindCameraError for z <= 0."""
        uv, z, ok = self.project_many(np.asarray(point_world, dtype=np.float64)[None, :])
        if not ok[0]:
            raise BehindCameraError(f"depth {z[0]:.6g} <= 0")
        return uv[0], float(z[0])

    def unproject(self, uv, depth) -> np.ndarray:
        """Pixel + camera-frame depth back to world coordinates."""
        uv = np.asarray(uv, dtype=np.float64)
        z = np.asarray(depth, dtype=np.float64)
        x = (uv[..., 0] - self.cx) * z / self.fx
        y = (uv[..., 1] - self.cy) * z / self.fy
        return self.camera_to_world(np.stack([x, y, z], axis=-1))


def camera_to_robot(cam: CameraModel, points_cam) -> np.ndarray:
    """Apply the inverse camera extrinsics to camera-frame points."""
    return cam.camera_to_world(points_cam)


def projection_matrix(cam: CameraModel) -> np.ndarray:
    """3x4 matrix K [R | t]."""
    k = np.array([[cam.fx, 0, cam.cx], [0, cam.fy, cam.cy], [0, 0, 1.0]])
    return k @ np.hstack([cam.rotation, cam.translation[:, None]])


# ---------------------------------------------------------------------------
# Sim(3) alignment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Sim3Transform:
    """Similarity transform p -> scale * R(quat) @ p + translation."""

    scale: float = 1.0
    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "quat", quat_normalize(self.quat))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError("scale must be finite and positive")

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return self.scale * (p @ self.rotation.T) + self.translation

    def compose(self, other: "Sim3Transform") -> "Sim3Transform":
        """self after other: (self o other)(p) = self(other(p))."""
        r = self.rotation
        return Sim3Transform(
            scale=self.scale * other.scale,
            quat=quat_multiply(self.quat, other.quat),
            translation=self.scale * (r @ other.translation) + self.translation,
        )

    @staticmethod
    def identity() -> "Sim3Transform":
        return Sim3Transform()


def umeyama_align(source, target) -> Sim3Transform:
    """Least-squares Sim(3) minimizing ||s R src + t - tgt||^2 (Umeyama 1991).

    Requires >= 3 index-paired correspondences in general position.
    """
    src = np.asarray(source, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    if src.shape != tgt.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("source and target must both be (N, 3)")
    n = src.shape[0]
    if n < 3:
        raise DegenerateGeometryError(f"need >= 3 correspondences, got {n}")

    mu_s = src.mean(axis=0)
    mu_t = tgt.mean(axis=0)
    ds = src - mu_s
    dt = tgt - mu_t

    var_s = (ds * ds).sum() / n
    cov = dt.T @ ds / n
    u, d, vt = np.linalg.svd(cov)

    # Collinear or coincident sources leave the similarity under-determined.
    src_sv = np.linalg.svd(ds, compute_uv=False)
    if src_sv[1] <= 1e-9 * max(src_sv[0], 1e-300) or var_s <= 0:
        raise DegenerateGeometryError("source points are collinear or coincident")

    s_fix = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s_fix[2, 2] = -1.0
    rot = u @ s_fix @ vt
    scale = float(np.trace(np.diag(d) @ s_fix) / var_s)
    if scale <= 0:
        raise DegenerateGeometryError("non-positive optimal scale")
    t = mu_t - scale * rot @ mu_s
    return Sim3Transform(scale=scale, quat=matrix_to_quat(rot), translation=t)


@dataclass(frozen=True)
class IcpConfig:
    max_iters: int = 50
    tol: float = 1e-6  # relative RMS change for convergence


@dataclass(frozen=True)
class IcpResult:
    transform: Sim3Transform
    rms_history: tuple
    iterations: int
    converged: bool


def icp_refine(source, target, init: Sim3Transform, cfg: IcpConfig = IcpConfig()) -> IcpResult:
    """Point-to-point similarity ICP with nearest-neighbor correspondences.

    Each iteration re-fits Umeyama on the current NN pairing, which makes
    the correspondence RMS non-increasing; steps that raise it (numerical
    edge cases) are rejected and terminate the loop.
    """
    src = np.asarray(source, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    if src.size == 0 or tgt.size == 0:
        raise DegenerateGeometryError("empty correspondence set")

    tree = cKDTree(tgt)
    transform = init
    moved = transform.apply(src)
    dist, nn = tree.query(moved)
    rms = float(np.sqrt(np.mean(dist * dist)))
    history = [rms]
    converged = False
    iterations = 0

    for _ in range(cfg.max_iters):
        iterations += 1
        try:
            candidate = umeyama_align(src, tgt[nn])
        except DegenerateGeometryError:
            break
        cand_moved = candidate.apply(src)
        cand_dist, cand_nn = tree.query(cand_moved)
        cand_rms = float(np.sqrt(np.mean(cand_dist * cand_dist)))
        if cand_rms > rms:
            break
        improved = rms - cand_rms
        transform, nn = candidate, cand_nn
        history.append(cand_rms)
        prev, rms = rms, cand_rms
        if improved <= cfg.tol * max(prev, 1e-12):
            converged = True
            break

    return IcpResult(transform, tuple(history), iterations, converged)
