"""Streaming fusion: shared static Gaussians + per-frame dynamic deltas.

Scene state over a sequence is one frame-shared Gaussian set, a per-frame
dynamic set, and a per-frame residual-refiner MLP. Per-view dynamic masks
are lifted to 3D and unioned in a panoramic range image so a detection in
any camera flags the region everywhere; primitives inside the (dilated)
flagged region are re-decoded every frame, while static content is only
extended where coverage rendering finds holes. The refiner predicts small
parameter deltas for shared primitives from encoded position + color and
is fitted per frame against the current frame's decoded primitives in
parameter space (the rasterizer here is forward-only, so the photometric
objective is replaced by this parameter-space L2).

Binary container ("RPGS"): little-endian, 8-byte magic, header, packed
float32 primitive records, then per-frame dynamic records + refiner
parameters. Scale is stored in log domain and opacity as a logit, matching
the in-memory layout, so round trips are bit-exact.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .config import StreamingSection
from .decoder import GaussianSet, sh_to_rgb
from .errors import (
    BadMagicError,
    DimensionMismatchError,
    NoCorrespondencesError,
    TruncatedStreamError,
    VersionMismatchError,
)
from .geometry import quat_multiply, to_spherical
from .grid import FramePacket, PointSamples
from .mlp import TinyMLP
from .pipeline import ReconPipeline

MAGIC = b"RPGS\x00\x01\x00\x00"
VERSION = 1

REFINER_OUT_DIM = 14  # dpos 3 | dlog_scale 3 | dquat 4 | dopacity_logit 1 | dsh_dc 3


# ---------------------------------------------------------------------------
# Range-image fusion of dynamic masks
# ---------------------------------------------------------------------------


@dataclass
class RangeImage:
    """Panoramic (theta, phi) grid of minimum ranges and dynamic flags."""

    ranges: np.ndarray  # (n_theta, n_phi), +inf where empty
    flags: np.ndarray  # (n_theta, n_phi) bool

    @property
    def resolution(self):
        return self.ranges.shape

    @classmethod
    def empty(cls, n_theta: int, n_phi: int) -> "RangeImage":
        return cls(np.full((n_theta, n_phi), np.inf), np.zeros((n_theta, n_phi), bool))


def _sphere_pixels(positions, n_theta: int, n_phi: int):
    sph = to_spherical(np.atleast_2d(positions))
    i_t = np.floor((sph[:, 1] + math.pi) / (2 * math.pi) * n_theta).astype(np.int64)
    i_p = np.floor((sph[:, 2] + math.pi / 2) / math.pi * n_phi).astype(np.int64)
    np.clip(i_t, 0, n_theta - 1, out=i_t)
    np.clip(i_p, 0, n_phi - 1, out=i_p)
    return i_t, i_p, sph[:, 0]


def fuse_dynamic_masks(views, n_theta: int = 360, n_phi: int = 180) -> RangeImage:
    """Union of per-view dynamic masks in the panoramic range-image domain.

    Masked pixels are lifted to 3D with the view's point map, converted to
    robot-frame spherical coordinates and rasterized; flags are OR-ed
    across views and ranges keep the per-pixel minimum, so a detection in
    any single camera survives into the fused mask.
    """
    fused = RangeImage.empty(n_theta, n_phi)
    for view in views:
        if view.mask is None or not view.mask.any():
            continue
        rows, cols = np.nonzero(view.mask)
        p_cam = view.points[rows, cols].astype(np.float64)
        positions = view.camera.camera_to_world(p_cam)
        i_t, i_p, r = _sphere_pixels(positions, n_theta, n_phi)
        fused.flags[i_t, i_p] = True
        np.minimum.at(fused.ranges, (i_t, i_p), r)
    return fused


def dilate_flags(flags: np.ndarray, margin: int) -> np.ndarray:
    """Binary dilation on the panorama: azimuth wraps, elevation clips."""
    out = flags.copy()
    for _ in range(margin):
        grown = out.copy()
        grown |= np.roll(out, 1, axis=0) | np.roll(out, -1, axis=0)
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        out = grown
    return out


def split_dynamic(gset: GaussianSet, fused: RangeImage, margin: int = 1):
    """Partition primitives by the fused dynamic region (exhaustive, disjoint)."""
    if len(gset) == 0:
        return gset.take(np.zeros(0, np.int64)), gset.take(np.zeros(0, np.int64))
    n_theta, n_phi = fused.resolution
    flags = dilate_flags(fused.flags, margin) if margin > 0 else fused.flags
    i_t, i_p, _ = _sphere_pixels(gset.mu.astype(np.float64), n_theta, n_phi)
    dynamic = flags[i_t, i_p]
    return gset.take(~dynamic), gset.take(dynamic)


def _samples_in_region(samples: PointSamples, fused: RangeImage, margin: int) -> np.ndarray:
    n_theta, n_phi = fused.resolution
    flags = dilate_flags(fused.flags, margin) if margin > 0 else fused.flags
    i_t, i_p, _ = _sphere_pixels(samples.positions, n_theta, n_phi)
    return flags[i_t, i_p]


# ---------------------------------------------------------------------------
# Residual refiner
# ---------------------------------------------------------------------------


def refiner_input_dim(freqs: int) -> int:
    return 6 * freqs + 3  # sin/cos per axis per band, plus rgb


def encode_refiner_inputs(gset: GaussianSet, freqs: int = 4) -> np.ndarray:
    """Sinusoidal position encoding (bands 2^0 .. 2^(freqs-1)) plus DC color."""
    mu = gset.mu.astype(np.float64)
    bands = 2.0 ** np.arange(freqs)
    ang = mu[:, None, :] * bands[None, :, None]
    enc = np.concatenate([np.sin(ang), np.cos(ang)], axis=2).reshape(len(gset), 6 * freqs)
    rgb = np.clip(sh_to_rgb(gset.sh_dc.astype(np.float64)), 0.0, 1.0)
    return np.concatenate([enc, rgb], axis=1)


def zero_refiner(freqs: int = 4, hidden=(32, 32), seed: int = 0) -> TinyMLP:
    """Identity refiner: seeded hidden layers, zero output layer."""
    sizes = [refiner_input_dim(freqs)] + list(hidden) + [REFINER_OUT_DIM]
    mlp = TinyMLP.seeded(sizes, seed, scale=0.5)
    mlp.weights[-1] = np.zeros_like(mlp.weights[-1])
    mlp.biases[-1] = np.zeros_like(mlp.biases[-1])
    return mlp


_IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def _compose(gset: GaussianSet, delta: np.ndarray):
    """Apply the 14-dim residual to every primitive; returns field arrays."""
    mu = gset.mu.astype(np.float64) + delta[:, 0:3]
    log_s = gset.log_scale.astype(np.float64) + delta[:, 3:6]
    u = _IDENTITY_QUAT[None, :] + delta[:, 6:10]
    u_norm = np.linalg.norm(u, axis=1, keepdims=True)
    dq = u / u_norm
    q_raw = quat_multiply(dq, gset.rot.astype(np.float64))
    q = q_raw / np.linalg.norm(q_raw, axis=1, keepdims=True)
    logit = gset.opacity_logit.astype(np.float64) + delta[:, 10]
    dc = gset.sh_dc.astype(np.float64) + delta[:, 11:14]
    return mu, log_s, q, logit, dc


def apply_refiner(gset: GaussianSet, refiner: TinyMLP, freqs: int = 4) -> GaussianSet:
    """Residual-refined copy; the input set is left untouched.

    Composition: position/log-scale/opacity-logit/sh_dc additive, rotation
    by (normalized) delta-quaternion product then renormalization.
    """
    if refiner.in_dim != refiner_input_dim(freqs):
        raise DimensionMismatchError(
            f"refiner input {refiner.in_dim} != encoding dim {refiner_input_dim(freqs)}"
        )
    if refiner.out_dim != REFINER_OUT_DIM:
        raise DimensionMismatchError(f"refiner output {refiner.out_dim} != {REFINER_OUT_DIM}")
    if len(gset) == 0:
        return gset.copy()
    delta = refiner.forward(encode_refiner_inputs(gset, freqs))
    mu, log_s, q, logit, dc = _compose(gset, delta)
    return GaussianSet(
        mu, log_s, q, logit, dc, gset.sh_rest.copy(), source=gset.source, frame_id=gset.frame_id
    )


def match_by_voxel(shared: GaussianSet, decoded: GaussianSet, spec) -> tuple:
    """Pair each shared primitive with the nearest decoded primitive whose
    center falls in the same voxel; returns (shared_idx, decoded_idx)."""
    from .geometry import linearize_index, voxel_indices

    if len(shared) == 0 or len(decoded) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    idx_s, ok_s = voxel_indices(to_spherical(shared.mu.astype(np.float64), spec.epsilon), spec)
    idx_d, ok_d = voxel_indices(to_spherical(decoded.mu.astype(np.float64), spec.epsilon), spec)
    lin_s = linearize_index(idx_s, spec)
    lin_d = linearize_index(idx_d, spec)
    lin_s[~ok_s] = -1
    lin_d[~ok_d] = -2  # never matches

    order_d = np.argsort(lin_d, kind="stable")
    lin_d_sorted = lin_d[order_d]
    lo = np.searchsorted(lin_d_sorted, lin_s, side="left")
    hi = np.searchsorted(lin_d_sorted, lin_s, side="right")
    group = hi - lo
    has = (group > 0) & ok_s
    if not has.any():
        return np.zeros(0, np.int64), np.zeros(0, np.int64)

    g_max = int(group[has].max())
    cand = lo[has, None] + np.arange(g_max)[None, :]
    valid = cand < hi[has, None]
    cand_rows = order_d[np.minimum(cand, len(decoded) - 1)]
    d2 = np.sum(
        (decoded.mu[cand_rows].astype(np.float64) - shared.mu[has][:, None, :].astype(np.float64))
        ** 2,
        axis=2,
    )
    d2[~valid] = np.inf
    best = np.argmin(d2, axis=1)
    shared_idx = np.nonzero(has)[0]
    target_idx = cand_rows[np.arange(len(best)), best]
    return shared_idx, target_idx


def _refiner_loss_and_grad(gset: GaussianSet, target: GaussianSet, refiner: TinyMLP, freqs: int):
    """Parameter-space L2 between apply_refiner(gset) and target, with the
    analytic gradient w.r.t. the refiner parameters."""
    n = len(gset)
    x = encode_refiner_inputs(gset, freqs)
    delta, cache = refiner.forward_cached(x)
    mu, log_s, q, logit, dc = _compose(gset, delta)

    t_mu = target.mu.astype(np.float64)
    t_log_s = target.log_scale.astype(np.float64)
    t_q = target.rot.astype(np.float64)
    t_logit = target.opacity_logit.astype(np.float64)
    t_dc = target.sh_dc.astype(np.float64)

    # sign-align target quaternions (q and -q are the same rotation)
    sign = np.where(np.sum(q * t_q, axis=1) < 0, -1.0, 1.0)
    t_q = t_q * sign[:, None]

    res_mu = mu - t_mu
    res_ls = log_s - t_log_s
    res_q = q - t_q
    res_lg = logit - t_logit
    res_dc = dc - t_dc
    loss = (
        np.sum(res_mu**2)
        + np.sum(res_ls**2)
        + np.sum(res_q**2)
        + np.sum(res_lg**2)
        + np.sum(res_dc**2)
    ) / n

    upstream = np.empty((n, REFINER_OUT_DIM))
    upstream[:, 0:3] = 2.0 * res_mu / n
    upstream[:, 3:6] = 2.0 * res_ls / n
    upstream[:, 10] = 2.0 * res_lg / n
    upstream[:, 11:14] = 2.0 * res_dc / n

    # quaternion chain: delta[6:10] -> u = e + d -> dq = u/|u| ->
    # q_raw = dq x q0 -> q = q_raw/|q_raw|
    u = _IDENTITY_QUAT[None, :] + delta[:, 6:10]
    u_norm = np.linalg.norm(u, axis=1, keepdims=True)
    dq = u / u_norm
    q0 = gset.rot.astype(np.float64)
    q_raw = quat_multiply(dq, q0)
    q_raw_norm = np.linalg.norm(q_raw, axis=1, keepdims=True)

    g_q = 2.0 * res_q / n
    # through y = x/|x|: dL/dx = (g - y (y.g)) / |x|
    dot = np.sum(q * g_q, axis=1, keepdims=True)
    g_raw = (g_q - q * dot) / q_raw_norm
    # through the Hamilton product q_raw = M(q0) dq (linear in dq)
    w, xq, yq, zq = q0[:, 0], q0[:, 1], q0[:, 2], q0[:, 3]
    # rows of M(q0): product components as linear functions of dq
    g_dq = np.empty_like(g_raw)
    g_dq[:, 0] = g_raw[:, 0] * w + g_raw[:, 1] * xq + g_raw[:, 2] * yq + g_raw[:, 3] * zq
    g_dq[:, 1] = -g_raw[:, 0] * xq + g_raw[:, 1] * w - g_raw[:, 2] * zq + g_raw[:, 3] * yq
    g_dq[:, 2] = -g_raw[:, 0] * yq + g_raw[:, 1] * zq + g_raw[:, 2] * w - g_raw[:, 3] * xq
    g_dq[:, 3] = -g_raw[:, 0] * zq - g_raw[:, 1] * yq + g_raw[:, 2] * xq + g_raw[:, 3] * w
    dot_u = np.sum(dq * g_dq, axis=1, keepdims=True)
    upstream[:, 6:10] = (g_dq - dq * dot_u) / u_norm

    (d_w, d_b), _ = refiner.grad(x, upstream, cache=cache)
    return loss, (d_w, d_b)


def fit_refiner(
    shared: GaussianSet,
    target: GaussianSet,
    steps: int = 20,
    lr: float = 0.01,
    freqs: int = 4,
    hidden=(32, 32),
    seed: int = 0,
):
    """Fit the per-frame residual MLP by full-batch gradient descent.

    `shared` and `target` are index-paired correspondences. Steps that
    would raise the loss are backtracked (halved rate) and dropped, so the
    recorded loss history is non-increasing. Returns (refiner, history).
    """
    if len(shared) == 0 or len(shared) != len(target):
        raise NoCorrespondencesError(f"{len(shared)} shared vs {len(target)} targets")
    refiner = zero_refiner(freqs, hidden, seed)
    loss, grads = _refiner_loss_and_grad(shared, target, refiner, freqs)
    history = [loss]
    rate = lr
    for _ in range(steps):
        d_w, d_b = grads
        trial = None
        for _attempt in range(12):
            candidate = refiner.copy()
            for i in range(len(candidate.weights)):
                candidate.weights[i] = (
                    candidate.weights[i].astype(np.float64) - rate * d_w[i]
                ).astype(np.float32)
                candidate.biases[i] = (
                    candidate.biases[i].astype(np.float64) - rate * d_b[i]
                ).astype(np.float32)
            cand_loss, cand_grads = _refiner_loss_and_grad(shared, target, candidate, freqs)
            if cand_loss <= loss:
                trial = (candidate, cand_loss, cand_grads)
                break
            rate *= 0.5
        if trial is None:
            break
        refiner, loss, grads = trial
        history.append(loss)
    return refiner, history


# ---------------------------------------------------------------------------
# Scene state + ingest
# ---------------------------------------------------------------------------


@dataclass
class SceneState:
    shared: GaussianSet
    dynamic: dict = field(default_factory=dict)  # frame id -> GaussianSet
    refiners: dict = field(default_factory=dict)  # frame id -> TinyMLP
    frame_count: int = 0
    sh_degree: int = 1
    k: int = 2
    refiner_freqs: int = 4

    @classmethod
    def fresh(cls, sh_degree: int = 1, k: int = 2, refiner_freqs: int = 4) -> "SceneState":
        return cls(
            shared=GaussianSet.empty(sh_degree, source="shared"),
            sh_degree=sh_degree,
            k=k,
            refiner_freqs=refiner_freqs,
        )

    def reconstruct(self, frame_id: int):
        """(refined shared, dynamic) pair for one stored frame."""
        if frame_id not in self.refiners:
            raise KeyError(f"frame {frame_id} not stored")
        refined = apply_refiner(self.shared, self.refiners[frame_id], self.refiner_freqs)
        return refined, self.dynamic[frame_id]

    def reconstruct_combined(self, frame_id: int) -> GaussianSet:
        refined, dyn = self.reconstruct(frame_id)
        if len(dyn) == 0:
            return refined
        return GaussianSet.concat([refined, dyn], source="reconstructed", frame_id=frame_id)


def detect_holes(
    state: SceneState,
    frame: FramePacket,
    pipeline: ReconPipeline,
    current_dynamic: GaussianSet | None = None,
    alpha_threshold: float = 0.5,
):
    """Per-view hole masks: confident pixels that accumulated coverage
    (shared plus the frame's dynamic set) fails to explain."""
    conf_threshold = pipeline.cfg.grid.conf_threshold
    sets = [state.shared]
    if current_dynamic is not None and len(current_dynamic):
        sets.append(current_dynamic)
    combined = sets[0] if len(sets) == 1 else GaussianSet.concat(sets)
    masks = []
    for view in frame.views:
        if len(combined) == 0:
            coverage = np.zeros(view.shape)
        else:
            coverage = pipeline.coverage(combined, view.camera)
        masks.append((coverage < alpha_threshold) & (view.confidence >= conf_threshold))
    return masks


def ingest_frame(state: SceneState, frame: FramePacket, pipeline: ReconPipeline) -> SceneState:
    """Advance the stream by one frame.

    Frame 0 initializes the shared set from the static split of a full
    decode. Later frames only instantiate primitives from (i) the fused
    dynamic region, re-decoded every frame, and (ii) hole pixels the
    current state cannot explain, which are appended to the shared set;
    the per-frame refiner is fitted against the frame's static decode.
    """
    scfg: StreamingSection = pipeline.cfg.streaming
    fid = frame.frame_id
    fused = fuse_dynamic_masks(frame.views, scfg.range_n_theta, scfg.range_n_phi)
    samples = pipeline.assemble(frame)

    if state.frame_count == 0:
        full = pipeline.decode_samples(samples, source="decoded", frame_id=fid)
        static_set, dyn_set = split_dynamic(full, fused, scfg.dilate_px)
        static_set.source, static_set.frame_id = "shared", -1
        dyn_set.source, dyn_set.frame_id = "dynamic", fid
        state.shared = static_set
        state.dynamic[fid] = dyn_set
        state.refiners[fid] = zero_refiner(
            scfg.refiner_freqs, scfg.refiner_hidden, rng.derive_seed(pipeline.cfg.seed, "refiner")
        )
        state.frame_count = 1
        return state

    in_dynamic = _samples_in_region(samples, fused, scfg.dilate_px)
    dyn_samples = samples.take(np.nonzero(in_dynamic)[0])
    static_samples = samples.take(np.nonzero(~in_dynamic)[0])

    if len(dyn_samples):
        dyn_set = pipeline.decode_samples(dyn_samples, source="dynamic", frame_id=fid)
    else:
        dyn_set = GaussianSet.empty(state.sh_degree, source="dynamic", frame_id=fid)

    if len(static_samples):
        static_decode = pipeline.decode_samples(static_samples, source="decoded", frame_id=fid)
    else:
        static_decode = GaussianSet.empty(state.sh_degree)

    hole_masks = detect_holes(state, frame, pipeline, dyn_set, scfg.hole_alpha)
    hole_lookup = [m for m in hole_masks]
    is_hole = np.zeros(len(static_samples), bool)
    for view_id, mask in enumerate(hole_lookup):
        sel = static_samples.views == view_id
        is_hole[sel] = mask[static_samples.rows[sel], static_samples.cols[sel]]
    hole_samples = static_samples.take(np.nonzero(is_hole)[0])
    if len(hole_samples):
        additions = pipeline.decode_samples(hole_samples, source="shared", frame_id=-1)
    else:
        additions = GaussianSet.empty(state.sh_degree, source="shared")

    refiner_seed = rng.derive_seed(pipeline.cfg.seed, f"refiner:{fid}")
    shared_idx, target_idx = match_by_voxel(state.shared, static_decode, pipeline.grid_spec)
    if shared_idx.size and scfg.match_cap and shared_idx.size > scfg.match_cap:
        stride = int(math.ceil(shared_idx.size / scfg.match_cap))
        shared_idx, target_idx = shared_idx[::stride], target_idx[::stride]
    if shared_idx.size:
        refiner, _history = fit_refiner(
            state.shared.take(shared_idx),
            static_decode.take(target_idx),
            steps=scfg.fit_steps,
            lr=scfg.fit_lr,
            freqs=scfg.refiner_freqs,
            hidden=scfg.refiner_hidden,
            seed=refiner_seed,
        )
    else:
        refiner = zero_refiner(scfg.refiner_freqs, scfg.refiner_hidden, refiner_seed)

    if len(additions):
        state.shared = GaussianSet.concat([state.shared, additions], source="shared")
    state.dynamic[fid] = dyn_set
    state.refiners[fid] = refiner
    state.frame_count += 1
    return state


def run_stream(packets, pipeline: ReconPipeline) -> SceneState:
    """Fold a whole sequence through :func:`ingest_frame`."""
    state = SceneState.fresh(
        sh_degree=pipeline.decoder_cfg.sh_degree,
        k=pipeline.decoder_cfg.k,
        refiner_freqs=pipeline.cfg.streaming.refiner_freqs,
    )
    for packet in packets:
        ingest_frame(state, packet, pipeline)
    return state


# ---------------------------------------------------------------------------
# Serialization ("RPGS")
# ---------------------------------------------------------------------------


def _record_width(sh_degree: int) -> int:
    return 14 + 3 * ((sh_degree + 1) ** 2 - 1)


def _pack_records(gset: GaussianSet) -> bytes:
    n = len(gset)
    rest = gset.sh_rest.reshape(n, -1)
    table = np.concatenate(
        [
            gset.mu,
            gset.log_scale,
            gset.rot,
            gset.opacity_logit[:, None],
            gset.sh_dc,
            rest,
        ],
        axis=1,
    ).astype("<f4")
    return table.tobytes()


def _unpack_records(buf: bytes, count: int, sh_degree: int, source: str, frame_id: int):
    width = _record_width(sh_degree)
    table = np.frombuffer(buf, dtype="<f4", count=count * width).reshape(count, width).copy()
    rest_cols = 3 * ((sh_degree + 1) ** 2 - 1)
    return GaussianSet(
        mu=table[:, 0:3],
        log_scale=table[:, 3:6],
        rot=table[:, 6:10],
        opacity_logit=table[:, 10],
        sh_dc=table[:, 11:14],
        sh_rest=table[:, 14 : 14 + rest_cols].reshape(count, 3, rest_cols // 3)
        if rest_cols
        else np.zeros((count, 3, 0), np.float32),
        source=source,
        frame_id=frame_id,
    )


def serialize_state(state: SceneState) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(
        struct.pack(
            "<IIQBB6x",
            VERSION,
            state.frame_count,
            len(state.shared),
            state.sh_degree,
            state.k,
        )
    )
    out.write(_pack_records(state.shared))
    for fid in sorted(state.refiners):
        dyn = state.dynamic.get(fid)
        if dyn is None:
            dyn = GaussianSet.empty(state.sh_degree)
        refiner = state.refiners[fid]
        out.write(struct.pack("<IQ", fid, len(dyn)))
        out.write(_pack_records(dyn))
        out.write(struct.pack("<I", len(refiner.sizes)))
        out.write(np.asarray(refiner.sizes, "<u4").tobytes())
        out.write(refiner.flat_parameters().astype("<f4").tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedStreamError(
                f"needed {n} bytes at offset {self.pos}, only {len(self.data) - self.pos} left"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out


def deserialize_state(data: bytes) -> SceneState:
    reader = _Reader(data)
    if reader.take(len(MAGIC)) != MAGIC:
        raise BadMagicError("not an RPGS stream")
    version, frame_count, shared_count, sh_degree, k = struct.unpack(
        "<IIQBB6x", reader.take(24)
    )
    if version != VERSION:
        raise VersionMismatchError(f"stream version {version}, expected {VERSION}")
    width = _record_width(sh_degree)
    shared = _unpack_records(
        reader.take(shared_count * width * 4), shared_count, sh_degree, "shared", -1
    )
    state = SceneState(shared=shared, frame_count=frame_count, sh_degree=sh_degree, k=k)
    for _ in range(frame_count):
        fid, dyn_count = struct.unpack("<IQ", reader.take(12))
        state.dynamic[fid] = _unpack_records(
            reader.take(dyn_count * width * 4), dyn_count, sh_degree, "dynamic", fid
        )
        (n_sizes,) = struct.unpack("<I", reader.take(4))
        if not 2 <= n_sizes <= 64:
            raise TruncatedStreamError(f"implausible refiner layer count {n_sizes}")
        sizes = np.frombuffer(reader.take(4 * n_sizes), "<u4").astype(np.int64)
        n_params = int(sum(sizes[i + 1] * sizes[i] + sizes[i + 1] for i in range(n_sizes - 1)))
        flat = np.frombuffer(reader.take(4 * n_params), "<f4").copy()
        state.refiners[fid] = TinyMLP.from_flat([int(s) for s in sizes], flat)
    if reader.pos != len(data):
        raise TruncatedStreamError(f"{len(data) - reader.pos} trailing bytes")
    state.refiner_freqs = (state.refiners[min(state.refiners)].in_dim - 3) // 6 if state.refiners else 4
    return state
