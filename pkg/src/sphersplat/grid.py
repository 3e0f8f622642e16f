"""Sparse spherical voxel grid: point assembly, anchor fusion, context conv.

The flow is: per-view point maps -> robot-frame point samples with
attributes -> voxel assignment -> per-cell anchor centers (mean position)
-> inverse-distance-weighted attribute pooling through a tiny MLP ->
one sparse 3x3x3 convolution that propagates context between occupied
neighbors (azimuth wraps, radius and elevation are zero-padded).

Determinism contract: samples are sorted by (pixel row, col, view id)
before any reduction, and all segment sums run in that canonical order,
so grids are bit-identical under any input permutation or worker split.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatchError, EmptyFrameError
from .geometry import CameraModel, GridSpec, linearize_index, to_spherical, voxel_indices
from .mlp import TinyMLP


@dataclass
class ViewRecord:
    """One camera's observations for a single time step.

    image: (H, W, 3) in [0, 1]; points: (H, W, 3) camera-frame meters;
    confidence: (H, W) in [0, 1]; features: (H, W, C); mask: optional
    (H, W) bool flagging dynamic pixels.
    """

    camera: CameraModel
    image: np.ndarray
    points: np.ndarray
    confidence: np.ndarray
    features: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        h, w = self.confidence.shape
        for name in ("image", "points", "features"):
            arr = getattr(self, name)
            if arr.shape[:2] != (h, w):
                raise DimensionMismatchError(f"{name} shape {arr.shape} != ({h}, {w}, ...)")
        if self.mask is not None and self.mask.shape != (h, w):
            raise DimensionMismatchError("mask shape mismatch")

    @property
    def shape(self):
        return self.confidence.shape


@dataclass
class FramePacket:
    """All views of one time step."""

    frame_id: int
    views: list[ViewRecord]

    @property
    def feature_dim(self) -> int:
        return self.views[0].features.shape[2]


@dataclass
class PointSamples:
    """Struct-of-arrays bag of robot-frame point samples.

    positions are float64 (geometry-critical); appearance channels stay
    float32. (view, row, col) triplets identify the source pixel and feed
    the canonical reduction order.
    """

    positions: np.ndarray  # (N, 3) float64, robot frame
    rgb: np.ndarray  # (N, 3) float32
    view_dirs: np.ndarray  # (N, 3) float32, unit
    features: np.ndarray  # (N, C) float32
    confidence: np.ndarray  # (N,) float32
    views: np.ndarray  # (N,) int32
    rows: np.ndarray  # (N,) int32
    cols: np.ndarray  # (N,) int32

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def attributes(self) -> np.ndarray:
        """Per-point attribute vector [position | rgb | view_dir | feature]."""
        return np.concatenate(
            [
                self.positions.astype(np.float32),
                self.rgb,
                self.view_dirs,
                self.features,
            ],
            axis=1,
        )

    def take(self, index) -> "PointSamples":
        return PointSamples(
            self.positions[index],
            self.rgb[index],
            self.view_dirs[index],
            self.features[index],
            self.confidence[index],
            self.views[index],
            self.rows[index],
            self.cols[index],
        )


def assemble_point_samples(frame: FramePacket, conf_threshold: float = 0.5) -> PointSamples:
    """Lift every pixel with confidence >= threshold into the robot frame."""
    chunks = []
    for view_id, view in enumerate(frame.views):
        h, w = view.shape
        keep = view.confidence >= conf_threshold
        if not keep.any():
            continue
        rows, cols = np.nonzero(keep)
        p_cam = view.points[rows, cols].astype(np.float64)
        positions = view.camera.camera_to_world(p_cam)
        norms = np.linalg.norm(p_cam, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        dirs = (p_cam / norms) @ view.camera.rotation  # rotate into robot frame
        chunks.append(
            PointSamples(
                positions=positions,
                rgb=view.image[rows, cols].astype(np.float32),
                view_dirs=dirs.astype(np.float32),
                features=view.features[rows, cols].astype(np.float32),
                confidence=view.confidence[rows, cols].astype(np.float32),
                views=np.full(rows.shape, view_id, np.int32),
                rows=rows.astype(np.int32),
                cols=cols.astype(np.int32),
            )
        )
    if not chunks:
        raise EmptyFrameError(f"frame {frame.frame_id}: no pixel above confidence threshold")
    return PointSamples(
        *[np.concatenate([getattr(c, f) for c in chunks]) for f in PointSamples.__dataclass_fields__]
    )


@dataclass
class AnchorCell:
    """View of one occupied voxel."""

    index: np.ndarray  # (3,) int64
    center: np.ndarray  # (3,) float64
    count: int
    color: np.ndarray | None = None  # (3,) fused rgb
    feature: np.ndarray | None = None  # (D,) pooled
    refined: np.ndarray | None = None  # (D,) after sparse conv


@dataclass
class VoxelAssignment:
    """Canonical sample->cell mapping produced by :func:`voxelize`.

    order sorts kept samples by (cell, row, col, view); starts[k]:starts[k+1]
    slices `order` into the members of cell k.
    """

    order: np.ndarray  # (M,) indices into the input samples
    starts: np.ndarray  # (n_cells + 1,) segment offsets
    cell_of_sample: np.ndarray  # (M,) cell row per ordered sample


class SparseSphericalGrid:
    """Occupied spherical voxels, sorted by linearized index."""

    def __init__(self, spec: GridSpec, indices, centers, counts, dropped: int = 0):
        self.spec = spec
        self.indices = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
        self.centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        self.counts = np.asarray(counts, dtype=np.int64).reshape(-1)
        self.dropped = int(dropped)
        self.linear = linearize_index(self.indices, spec) if len(self.indices) else np.zeros(0, np.int64)
        self.colors: np.ndarray | None = None  # (M, 3)
        self.features: np.ndarray | None = None  # (M, D)
        self.refined: np.ndarray | None = None  # (M, D)

    def __len__(self) -> int:
        return self.indices.shape[0]

    def cell(self, index) -> AnchorCell:
        """Associative lookup by (i_r, i_theta, i_phi)."""
        lin = int(linearize_index(np.asarray(index, np.int64)[None, :], self.spec)[0])
        row = int(np.searchsorted(self.linear, lin))
        if row >= len(self) or self.linear[row] != lin:
            raise KeyError(f"voxel {tuple(index)} is not occupied")
        return AnchorCell(
            index=self.indices[row],
            center=self.centers[row],
            count=int(self.counts[row]),
            color=None if self.colors is None else self.colors[row],
            feature=None if self.features is None else self.features[row],
            refined=None if self.refined is None else self.refined[row],
        )

    def __contains__(self, index) -> bool:
        try:
            self.cell(index)
            return True
        except KeyError:
            return False


def voxelize(samples: PointSamples, spec: GridSpec):
    """Assign samples to voxels; returns (grid, assignment).

    Out-of-range samples are dropped and counted on the grid. Anchor
    centers are the mean of member positions, accumulated in canonical
    (row, col, view) order for bit reproducibility.
    """
    sph = to_spherical(samples.positions, spec.epsilon)
    idx, valid = voxel_indices(sph, spec)
    dropped = int((~valid).sum())

    kept = np.nonzero(valid)[0]
    if kept.size == 0:
        grid = SparseSphericalGrid(spec, np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), dropped)
        return grid, VoxelAssignment(kept, np.zeros(1, np.int64), np.zeros(0, np.int64))

    lin = linearize_index(idx[kept], spec)
    order_kept = np.lexsort(
        (samples.views[kept], samples.cols[kept], samples.rows[kept], lin)
    )
    order = kept[order_kept]
    lin_sorted = lin[order_kept]

    uniq, starts_idx, counts = np.unique(lin_sorted, return_index=True, return_counts=True)
    starts = np.concatenate([starts_idx, [lin_sorted.size]]).astype(np.int64)

    pos_sorted = samples.positions[order]
    sums = np.add.reduceat(pos_sorted, starts[:-1], axis=0)
    centers = sums / counts[:, None]

    from .geometry import delinearize_index

    grid = SparseSphericalGrid(spec, delinearize_index(uniq, spec), centers, counts, dropped)
    cell_of_sample = np.repeat(np.arange(uniq.size, dtype=np.int64), counts)
    return grid, VoxelAssignment(order, starts, cell_of_sample)


def inv_dist_weights(positions, center, epsilon: float = 1e-8) -> np.ndarray:
    """Normalized inverse-distance weights of members around their anchor."""
    d = np.linalg.norm(np.asarray(positions, np.float64) - np.asarray(center, np.float64), axis=-1)
    inv = 1.0 / (d + epsilon)
    return inv / inv.sum()


def pool_anchor(members: PointSamples, center, mlp: TinyMLP, epsilon: float = 1e-8):
    """Fuse one cell: returns (pooled feature a_bar, fused color c_bar).

    Members are pre-sorted by (row, col, view) so the weighted sums are
    order-independent bit for bit.
    """
    order = np.lexsort((members.views, members.cols, members.rows))
    members = members.take(order)
    attrs = members.attributes
    if mlp.in_dim != attrs.shape[1] + 3:
        raise DimensionMismatchError(
            f"pooling MLP input {mlp.in_dim} != attribute dim {attrs.shape[1]} + 3"
        )
    rel = (members.positions - np.asarray(center, np.float64)).astype(np.float32)
    transformed = mlp.forward(np.concatenate([attrs, rel], axis=1))
    w = inv_dist_weights(members.positions, center, epsilon)
    return (w[:, None] * transformed).sum(axis=0), (w[:, None] * members.rgb.astype(np.float64)).sum(axis=0)


def pool_grid(
    grid: SparseSphericalGrid,
    samples: PointSamples,
    assignment: VoxelAssignment,
    mlp: TinyMLP,
    epsilon: float = 1e-8,
) -> SparseSphericalGrid:
    """Vectorized :func:`pool_anchor` over every occupied cell; fills
    grid.features and grid.colors in place and returns the grid."""
    if len(grid) == 0:
        grid.features = np.zeros((0, mlp.out_dim))
        grid.colors = np.zeros((0, 3))
        return grid
    ordered = samples.take(assignment.order)
    centers = grid.centers[assignment.cell_of_sample]
    attrs = ordered.attributes
    if mlp.in_dim != attrs.shape[1] + 3:
        raise DimensionMismatchError(
            f"pooling MLP input {mlp.in_dim} != attribute dim {attrs.shape[1]} + 3"
        )
    rel = (ordered.positions - centers).astype(np.float32)

    starts = assignment.starts
    dist = np.linalg.norm(ordered.positions - centers, axis=1)
    inv = 1.0 / (dist + epsilon)
    denom = np.add.reduceat(inv, starts[:-1])
    w = inv / denom[assignment.cell_of_sample]

    transformed = np.empty((len(ordered), mlp.out_dim), dtype=np.float64)
    block = 1 << 18
    for lo in range(0, len(ordered), block):
        hi = min(lo + block, len(ordered))
        transformed[lo:hi] = mlp.forward(np.concatenate([attrs[lo:hi], rel[lo:hi]], axis=1))

    grid.features = np.add.reduceat(w[:, None] * transformed, starts[:-1], axis=0)
    grid.colors = np.add.reduceat(
        w[:, None] * ordered.rgb.astype(np.float64), starts[:-1], axis=0
    )
    return grid


def seeded_conv_kernel(dim: int, seed: int, noise: float = 0.01) -> np.ndarray:
    """3x3x3 context kernel: identity center tap plus small seeded mixing."""
    from . import rng

    k = rng.symmetric(rng.derive_seed(seed, "sparse_conv"), (3, 3, 3, dim, dim), noise / dim)
    k[1, 1, 1] += np.eye(dim)
    return k


def sparse_conv(grid: SparseSphericalGrid, kernel: np.ndarray) -> SparseSphericalGrid:
    """One sparse 3x3x3 convolution over occupied cells.

    z_v = sum over offsets o of kernel[o] @ a_bar[v + o] for occupied
    neighbors; azimuth wraps modulo n_theta, radius and elevation are
    zero-padded. Fills grid.refined and returns the grid.
    """
    if grid.features is None:
        raise DimensionMismatchError("grid has no pooled features; run pool_grid first")
    d = grid.features.shape[1] if len(grid) else kernel.shape[3]
    if kernel.shape != (3, 3, 3, d, d):
        raise DimensionMismatchError(f"kernel shape {kernel.shape} != (3, 3, 3, {d}, {d})")
    if len(grid) == 0:
        grid.refined = np.zeros((0, d))
        return grid

    spec = grid.spec
    refined = np.zeros_like(grid.features)
    for dr in (-1, 0, 1):
        for dt in (-1, 0, 1):
            for dp in (-1, 0, 1):
                nbr = grid.indices + np.array([dr, dt, dp])
                nbr[:, 1] %= spec.n_theta  # azimuth wraps
                ok = (
                    (nbr[:, 0] >= 0)
                    & (nbr[:, 0] < spec.n_r)
                    & (nbr[:, 2] >= 0)
                    & (nbr[:, 2] < spec.n_phi)
                )
                lin = linearize_index(nbr, spec)
                rows = np.searchsorted(grid.linear, lin)
                rows[rows >= len(grid)] = 0
                hit = ok & (grid.linear[rows] == lin)
                if not hit.any():
                    continue
                w = kernel[dr + 1, dt + 1, dp + 1]
                refined[hit] += grid.features[rows[hit]] @ w.T
    grid.refined = refined
    return grid


def build_grid(
    samples: PointSamples,
    spec: GridSpec,
    pool_mlp: TinyMLP,
    conv_kernel: np.ndarray,
    epsilon: float | None = None,
) -> SparseSphericalGrid:
    """Full aggregation stage: voxelize, pool, sparse-convolve."""
    eps = spec.epsilon if epsilon is None else epsilon
    grid, assignment = voxelize(samples, spec)
    pool_grid(grid, samples, assignment, pool_mlp, eps)
    return sparse_conv(grid, conv_kernel)
