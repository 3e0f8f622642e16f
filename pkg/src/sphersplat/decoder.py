"""Decode anchor cells into a fixed number of Gaussian primitives per voxel.

Six small heads map each cell's refined feature (plus a slot one-hot, so K
slots share one parameter set) to the parameter groups: bounded center
offset, opacity, per-axis scale + rotation quaternion, and SH appearance.
Because every occupied voxel emits exactly K primitives, the primitive
count tracks cell occupancy rather than pixel count; that is the whole
compaction mechanism.

Storage note: scales live in log domain and opacities in logit domain
(the serialized forms); linear values are exposed as properties.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError
from .grid import SparseSphericalGrid
from .mlp import TinyMLP
from . import rng

log = logging.getLogger(__name__)

SH_C0 = 0.28209479177387814  # 1 / (2 sqrt(pi))


def sigmoid(x):
    arr = np.atleast_1d(np.asarray(x, dtype=np.float64))
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    e = np.exp(arr[~pos])
    out[~pos] = e / (1.0 + e)
    return float(out[0]) if np.ndim(x) == 0 else out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def rgb_to_sh(rgb):
    """DC coefficient for a view-independent color."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def sh_to_rgb(sh_dc):
    return np.asarray(sh_dc, dtype=np.float64) * SH_C0 + 0.5


def sh_basis_size(degree: int) -> int:
    return (degree + 1) ** 2


@dataclass(frozen=True)
class DecoderConfig:
    k: int = 2  # Gaussians per voxel
    gamma: float | None = None  # max center offset; None = half voxel diagonal
    log_scale_min: float = math.log(0.005)
    log_scale_max: float = math.log(1.0)
    r_ref: float = 1.0  # radius where the distance factor starts growing
    sh_degree: int = 1
    head_hidden: int = 32
    weight_scale: float = 0.01
    opacity_bias: float = 2.5
    scale_bias: float = 0.0
    radius_cue: bool = True  # append anchor radius to the scale head input

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.log_scale_min >= self.log_scale_max:
            raise ValueError("log_scale_min must be < log_scale_max")
        if self.gamma is not None and self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if not 0 <= self.sh_degree <= 2:
            raise ValueError("sh_degree must be in {0, 1, 2}")


def distance_scale_factor(radius, r_ref: float = 1.0):
    """kappa(r) = max(1, r / r_ref): far voxels get proportionally larger Gaussians."""
    return np.maximum(1.0, np.asarray(radius, dtype=np.float64) / r_ref)


class GaussianSet:
    """Flat struct-of-arrays of Gaussian primitives (float32 storage)."""

    def __init__(self, mu, log_scale, rot, opacity_logit, sh_dc, sh_rest, source="", frame_id=-1):
        self.mu = np.asarray(mu, np.float32).reshape(-1, 3)
        n = self.mu.shape[0]
        self.log_scale = np.asarray(log_scale, np.float32).reshape(n, 3)
        self.rot = np.asarray(rot, np.float32).reshape(n, 4)
        self.opacity_logit = np.asarray(opacity_logit, np.float32).reshape(n)
        self.sh_dc = np.asarray(sh_dc, np.float32).reshape(n, 3)
        rest = np.asarray(sh_rest, np.float32)
        if rest.ndim == 3:
            self.sh_rest = rest.reshape(n, 3, rest.shape[2])
        elif n > 0:
            self.sh_rest = rest.reshape(n, 3, -1)
        else:
            self.sh_rest = rest.reshape(0, 3, 0)
        self.source = source
        self.frame_id = int(frame_id)

    @classmethod
    def empty(cls, sh_degree: int = 1, source: str = "", frame_id: int = -1) -> "GaussianSet":
        rest = sh_basis_size(sh_degree) - 1
        return cls(
            np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0),
            np.zeros((0, 3)), np.zeros((0, 3, rest)), source=source, frame_id=frame_id,
        )

    def __len__(self) -> int:
        return self.mu.shape[0]

    @property
    def sh_degree(self) -> int:
        return int(round(math.sqrt(self.sh_rest.shape[2] + 1))) - 1

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scale.astype(np.float64))

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logit)

    def take(self, index) -> "GaussianSet":
        return GaussianSet(
            self.mu[index], self.log_scale[index], self.rot[index],
            self.opacity_logit[index], self.sh_dc[index], self.sh_rest[index],
            source=self.source, frame_id=self.frame_id,
        )

    def copy(self) -> "GaussianSet":
        return self.take(slice(None))

    @staticmethod
    def concat(sets, source="", frame_id=-1) -> "GaussianSet":
        sets = [s for s in sets]
        if not sets:
            raise ValueError("need at least one set")
        degrees = {s.sh_degree for s in sets}
        if len(degrees) != 1:
            raise DimensionMismatchError(f"mixed SH degrees {degrees}")
        return GaussianSet(
            np.concatenate([s.mu for s in sets]),
            np.concatenate([s.log_scale for s in sets]),
            np.concatenate([s.rot for s in sets]),
            np.concatenate([s.opacity_logit for s in sets]),
            np.concatenate([s.sh_dc for s in sets]),
            np.concatenate([s.sh_rest for s in sets]),
            source=source,
            frame_id=frame_id,
        )

    def allclose(self, other: "GaussianSet", atol=0.0) -> bool:
        return (
            len(self) == len(other)
            and np.allclose(self.mu, other.mu, atol=atol)
            and np.allclose(self.log_scale, other.log_scale, atol=atol)
            and np.allclose(self.rot, other.rot, atol=atol)
            and np.allclose(self.opacity_logit, other.opacity_logit, atol=atol)
            and np.allclose(self.sh_dc, other.sh_dc, atol=atol)
            and np.allclose(self.sh_rest, other.sh_rest, atol=atol)
        )


# ---------------------------------------------------------------------------
# Parameter-group formulas (raw head outputs -> Gaussian parameters)
# ---------------------------------------------------------------------------


def decode_center(anchor_centers, raw_offset, gamma) -> np.ndarray:
    """mu = anchor + gamma * (2 sigmoid(raw) - 1); offset is sup-norm bounded by gamma."""
    anchors = np.atleast_2d(np.asarray(anchor_centers, np.float64))
    g = np.asarray(gamma, np.float64).reshape(-1, 1) if np.ndim(gamma) else float(gamma)
    return anchors + g * (2.0 * sigmoid(np.atleast_2d(raw_offset)) - 1.0)


def decode_opacity(raw) -> np.ndarray:
    """Opacity in (0, 1); the raw head output is exactly the stored logit."""
    return sigmoid(raw)


def decode_shape(raw_scale, raw_quat, anchor_radius, cfg: DecoderConfig):
    """Returns (log_scale, unit quaternion).

    log s = log kappa(r) + l_min + (l_max - l_min) sigmoid(raw); zero-norm
    raw quaternions fall back to identity (logged).
    """
    raw_scale = np.atleast_2d(np.asarray(raw_scale, np.float64))
    raw_quat = np.atleast_2d(np.asarray(raw_quat, np.float64))
    kappa = distance_scale_factor(anchor_radius, cfg.r_ref)
    log_s = (
        np.log(kappa)[..., None]
        + cfg.log_scale_min
        + (cfg.log_scale_max - cfg.log_scale_min) * sigmoid(raw_scale)
    )
    norms = np.linalg.norm(raw_quat, axis=-1)
    bad = norms < 1e-12
    if bad.any():
        log.warning("%d zero-norm quaternion heads, falling back to identity", int(bad.sum()))
        raw_quat = raw_quat.copy()
        raw_quat[bad] = [1.0, 0.0, 0.0, 0.0]
        norms = np.linalg.norm(raw_quat, axis=-1)
    return log_s, raw_quat / norms[..., None]


def build_covariance(scales, quats) -> np.ndarray:
    """Sigma = R diag(s)^2 R^T, batched; symmetric PSD by construction."""
    from .geometry import quat_to_matrix

    s = np.atleast_2d(np.asarray(scales, np.float64))
    r = quat_to_matrix(np.atleast_2d(np.asarray(quats, np.float64)))
    m = r * s[:, None, :]
    cov = m @ np.swapaxes(m, -1, -2)
    return cov[0] if np.ndim(scales) == 1 else cov


def decode_appearance(fused_rgb, raw_dc, raw_rest, sh_degree: int):
    """sh_dc anchored at the fused color, higher orders regressed directly."""
    rest = sh_basis_size(sh_degree) - 1
    dc = rgb_to_sh(np.atleast_2d(fused_rgb)) + np.atleast_2d(raw_dc)
    n = dc.shape[0]
    sh_rest = np.asarray(raw_rest, np.float64).reshape(n, 3, rest)
    return dc, sh_rest


# ---------------------------------------------------------------------------
# Heads
# ---------------------------------------------------------------------------

_HEAD_NAMES = ("center", "opacity", "scale", "quat", "sh_dc", "sh_rest")


@dataclass
class DecoderHeads:
    """The six per-parameter-group MLP heads."""

    center: TinyMLP
    opacity: TinyMLP
    scale: TinyMLP
    quat: TinyMLP
    sh_dc: TinyMLP
    sh_rest: TinyMLP | None  # None when sh_degree == 0

    @staticmethod
    def head_sizes(feature_dim: int, cfg: DecoderConfig) -> dict:
        base = feature_dim + cfg.k
        rest = 3 * (sh_basis_size(cfg.sh_degree) - 1)
        return {
            "center": ([base, cfg.head_hidden, 3], None),
            "opacity": ([base, cfg.head_hidden, 1], np.array([cfg.opacity_bias])),
            "scale": (
                [base + (1 if cfg.radius_cue else 0), cfg.head_hidden, 3],
                np.full(3, cfg.scale_bias),
            ),
            "quat": ([base, cfg.head_hidden, 4], np.array([1.0, 0.0, 0.0, 0.0])),
            "sh_dc": ([base, cfg.head_hidden, 3], None),
            "sh_rest": ([base, cfg.head_hidden, rest], None) if rest else None,
        }

    @classmethod
    def seeded(cls, feature_dim: int, cfg: DecoderConfig, seed: int) -> "DecoderHeads":
        heads = {}
        for name, spec in cls.head_sizes(feature_dim, cfg).items():
            if spec is None:
                heads[name] = None
                continue
            sizes, bias = spec
            heads[name] = TinyMLP.seeded(
                sizes, rng.derive_seed(seed, f"head.{name}"), cfg.weight_scale, out_bias=bias
            )
        return cls(**heads)

    def save_npz(self, path):
        arrays = {}
        for name in _HEAD_NAMES:
            head = getattr(self, name)
            if head is None:
                continue
            arrays[f"{name}.sizes"] = np.asarray(head.sizes, np.int64)
            arrays[f"{name}.flat"] = head.flat_parameters()
        np.savez(path, **arrays)

    @classmethod
    def load_npz(cls, path) -> "DecoderHeads":
        data = np.load(path)
        heads = {}
        for name in _HEAD_NAMES:
            if f"{name}.sizes" not in data:
                heads[name] = None
                continue
            heads[name] = TinyMLP.from_flat(
                [int(s) for s in data[f"{name}.sizes"]], data[f"{name}.flat"]
            )
        return cls(**heads)


def default_gamma(grid: SparseSphericalGrid) -> np.ndarray:
    """Half the voxel diagonal evaluated at each cell's bin-center radius."""
    spec = grid.spec
    centers = spec.bin_center(grid.indices)
    r_c = np.atleast_2d(centers)[:, 0]
    diag = np.sqrt(
        spec.delta_r**2 + (r_c * spec.delta_theta) ** 2 + (r_c * spec.delta_phi) ** 2
    )
    return 0.5 * diag


def decode_grid(
    grid: SparseSphericalGrid,
    cfg: DecoderConfig,
    heads: DecoderHeads,
    source: str = "decoded",
    frame_id: int = -1,
) -> GaussianSet:
    """Decode every occupied cell into K primitives.

    Output order is deterministic: cells sorted by linearized voxel index,
    slots contiguous within a cell.
    """
    if len(grid) == 0:
        return GaussianSet.empty(cfg.sh_degree, source=source, frame_id=frame_id)
    if grid.refined is None:
        raise DimensionMismatchError("grid has no refined features; run sparse_conv first")

    m = len(grid)
    k = cfg.k
    z = grid.refined
    radius = np.linalg.norm(grid.centers, axis=1)
    gamma = default_gamma(grid) if cfg.gamma is None else np.full(m, cfg.gamma)

    mu = np.empty((m, k, 3))
    logit_a = np.empty((m, k))
    log_s = np.empty((m, k, 3))
    quat = np.empty((m, k, 4))
    dc = np.empty((m, k, 3))
    rest_cols = 3 * (sh_basis_size(cfg.sh_degree) - 1)
    rest = np.zeros((m, k, rest_cols))

    for slot in range(k):
        onehot = np.zeros((m, k))
        onehot[:, slot] = 1.0
        x = np.concatenate([z, onehot], axis=1)
        x_scale = np.concatenate([x, radius[:, None]], axis=1) if cfg.radius_cue else x

        mu[:, slot] = decode_center(grid.centers, heads.center.forward(x), gamma)
        logit_a[:, slot] = heads.opacity.forward(x)[:, 0]
        log_s[:, slot], quat[:, slot] = decode_shape(
            heads.scale.forward(x_scale), heads.quat.forward(x), radius, cfg
        )
        raw_rest = heads.sh_rest.forward(x) if heads.sh_rest is not None else np.zeros((m, 0))
        dc[:, slot], rest_slot = decode_appearance(
            grid.colors, heads.sh_dc.forward(x), raw_rest, cfg.sh_degree
        )
        rest[:, slot] = rest_slot.reshape(m, rest_cols)

    return GaussianSet(
        mu.reshape(-1, 3),
        log_s.reshape(-1, 3),
        quat.reshape(-1, 4),
        logit_a.reshape(-1),
        dc.reshape(-1, 3),
        rest.reshape(m * k, 3, rest_cols // 3),
        source=source,
        frame_id=frame_id,
    )
