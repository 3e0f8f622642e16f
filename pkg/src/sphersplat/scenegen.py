"""Deterministic synthetic scenes and the six-camera ring rig.

Scenes are axis-aligned colored boxes (solid, or interior-faced room
shells) plus axis-aligned rectangles with optional checker texture, lit by
one fixed directional light with Lambertian flat shading and no shadows.
Every pixel gets an exact first-hit point (camera frame), confidence 1 on
hit / 0 on miss, a per-face hash-color feature vector, and a dynamic flag
when the hit belongs to the moving box. Identical seeds give byte-identical
sequences.

The default rig reproduces the surround ring: six cameras at an 89 mm
radius, yaws 0/+-60/+-120/180 degrees, 118 x 92 degree FOV, 518 x 406
images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .geometry import CameraModel
from .grid import FramePacket, ViewRecord

_AMBIENT = 0.35
_DIFFUSE = 0.65
_LIGHT_DIR = np.array([0.3, 0.2, 0.9]) / np.linalg.norm([0.3, 0.2, 0.9])
_MISS_COLOR = np.array([0.5, 0.5, 0.5])
_EPS = 1e-9


@dataclass
class Box:
    """Axis-aligned box; `interior` shells are hit from inside (room walls)."""

    lo: np.ndarray
    hi: np.ndarray
    face_colors: np.ndarray  # (6, 3) for -x,+x,-y,+y,-z,+z
    interior: bool = False

    def __post_init__(self):
        self.lo = np.asarray(self.lo, np.float64)
        self.hi = np.asarray(self.hi, np.float64)
        self.face_colors = np.asarray(self.face_colors, np.float64).reshape(6, 3)
        if not np.all(self.hi > self.lo):
            raise ValueError("degenerate box extents")


@dataclass
class Rect:
    """Axis-aligned rectangle with flat or checker coloring."""

    axis: int  # normal axis
    level: float  # plane coordinate along `axis`
    lo: np.ndarray  # (2,) extents over the remaining axes (sorted order)
    hi: np.ndarray
    color_a: np.ndarray
    color_b: np.ndarray | None = None  # enables checkering when set
    checker: float = 0.5  # tile edge, meters

    def __post_init__(self):
        self.lo = np.asarray(self.lo, np.float64)
        self.hi = np.asarray(self.hi, np.float64)
        self.color_a = np.asarray(self.color_a, np.float64)
        if self.color_b is not None:
            self.color_b = np.asarray(self.color_b, np.float64)
        if not np.all(self.hi > self.lo):
            raise ValueError("degenerate rect extents")


@dataclass
class SyntheticScene:
    boxes: list[Box] = field(default_factory=list)
    rects: list[Rect] = field(default_factory=list)
    mover: Box | None = None
    mover_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bounds: tuple[float, float] = (-25.0, 25.0)  # world AABB guard, all axes

    def mover_at(self, time_s: float) -> Box | None:
        if self.mover is None:
            return None
        offset = np.asarray(self.mover_velocity, np.float64) * time_s
        lo = self.mover.lo + offset
        hi = self.mover.hi + offset
        if lo.min() < self.bounds[0] or hi.max() > self.bounds[1]:
            raise ValueError("mover trajectory leaves the scene bounds")
        return Box(lo, hi, self.mover.face_colors)


@dataclass(frozen=True)
class RigSpec:
    """Six-camera outward ring plus capture settings."""

    camera_count: int = 6
    ring_radius: float = 0.089
    yaw_degrees: tuple = (0.0, 60.0, -60.0, 120.0, -120.0, 180.0)
    hfov_degrees: float = 118.0
    vfov_degrees: float = 92.0
    width: int = 518
    height: int = 406
    fps: float = 10.0
    velocity: tuple = (0.0, 0.0, 0.0)  # rig base linear motion, m/s

    def __post_init__(self):
        if len(self.yaw_degrees) != self.camera_count:
            raise ValueError("one yaw per camera required")
        if len(set(self.yaw_degrees)) != self.camera_count:
            raise ValueError("yaw angles must be distinct")
        if not (0.0 < self.hfov_degrees < 180.0 and 0.0 < self.vfov_degrees < 180.0):
            raise ValueError("FOV must be in (0, 180) degrees")

    @property
    def fx(self) -> float:
        return self.width / (2.0 * math.tan(math.radians(self.hfov_degrees) / 2.0))

    @property
    def fy(self) -> float:
        return self.height / (2.0 * math.tan(math.radians(self.vfov_degrees) / 2.0))


def rig_cameras(rig: RigSpec, base_position=(0.0, 0.0, 0.0)) -> list[CameraModel]:
    """World->camera extrinsics for every ring camera at the given base pose."""
    base = np.asarray(base_position, np.float64)
    cams = []
    for yaw_deg in rig.yaw_degrees:
        yaw = math.radians(yaw_deg)
        forward = np.array([math.cos(yaw), math.sin(yaw), 0.0])
        right = np.array([math.sin(yaw), -math.cos(yaw), 0.0])
        down = np.array([0.0, 0.0, -1.0])
        center = base + rig.ring_radius * forward
        rot = np.stack([right, down, forward])  # rows: camera axes in world
        cams.append(
            CameraModel(
                fx=rig.fx,
                fy=rig.fy,
                cx=rig.width / 2.0,
                cy=rig.height / 2.0,
                rotation=rot,
                translation=-rot @ center,
                width=rig.width,
                height=rig.height,
            )
        )
    return cams


# ---------------------------------------------------------------------------
# Ray casting
# ---------------------------------------------------------------------------


def _ray_box(origin, dirs, box: Box):
    """Slab intersection; returns (t, face_id) with t = +inf on miss."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (box.lo[None, :] - origin[None, :]) * inv
        t2 = (box.hi[None, :] - origin[None, :]) * inv
    t_lo = np.fmin(t1, t2)
    t_hi = np.fmax(t1, t2)
    near_ax = np.argmax(t_lo, axis=1)
    far_ax = np.argmin(t_hi, axis=1)
    t_near = t_lo[np.arange(len(dirs)), near_ax]
    t_far = t_hi[np.arange(len(dirs)), far_ax]
    if box.interior:
        hit = (t_near <= t_far) & (t_near < _EPS) & (t_far > _EPS)
        t = np.where(hit, t_far, np.inf)
        axis = far_ax
    else:
        hit = (t_near <= t_far) & (t_near > _EPS)
        t = np.where(hit, t_near, np.inf)
        axis = near_ax
    # face 2*axis for the lo side, 2*axis+1 for the hi side
    d_axis = dirs[np.arange(len(dirs)), axis]
    if box.interior:
        side = (d_axis > 0).astype(np.int64)
    else:
        side = (d_axis < 0).astype(np.int64)
    return t, axis * 2 + side


def _ray_rect(origin, dirs, rect: Rect):
    ax = rect.axis
    others = [i for i in range(3) if i != ax]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (rect.level - origin[ax]) / dirs[:, ax]
    p = origin[None, :] + t[:, None] * dirs
    inside = (
        (t > _EPS)
        & (p[:, others[0]] >= rect.lo[0])
        & (p[:, others[0]] <= rect.hi[0])
        & (p[:, others[1]] >= rect.lo[1])
        & (p[:, others[1]] <= rect.hi[1])
    )
    return np.where(inside & np.isfinite(t), t, np.inf)


_FACE_NORMALS = np.array(
    [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]], np.float64
)


def _shade(base_color, normals):
    lambert = _AMBIENT + _DIFFUSE * np.maximum(0.0, normals @ _LIGHT_DIR)
    return np.clip(base_color * lambert[:, None], 0.0, 1.0)


def _quantize(img):
    """Snap to the 8-bit grid so PPM round trips are bitwise."""
    return (np.round(img * 255.0) / 255.0).astype(np.float32)


def _face_feature_table(n_objects: int, feature_dim: int, seed: int) -> np.ndarray:
    """(n_objects, 6, C) deterministic hash colors, flat index = obj * 6 + face."""
    table = np.empty((n_objects, 6, feature_dim), np.float32)
    for obj in range(n_objects):
        for face in range(6):
            sub = rng.derive_seed(seed, f"face:{obj}:{face}")
            table[obj, face] = rng.uniform(sub, feature_dim).astype(np.float32)
    return table


def render_view(scene: SyntheticScene, cam: CameraModel, time_s: float, feature_table, rgb_noise=None):
    """Ray-cast one camera; returns the ViewRecord array bundle."""
    h, w = cam.height, cam.width
    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    d_cam = np.stack(
        [
            (cols.ravel() + 0.5 - cam.cx) / cam.fx,
            (rows.ravel() + 0.5 - cam.cy) / cam.fy,
            np.ones(h * w),
        ],
        axis=1,
    )
    d_world = d_cam @ cam.rotation  # R^T d
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origin = cam.center

    mover = scene.mover_at(time_s)
    primitives: list = list(scene.boxes) + list(scene.rects)
    mover_id = None
    if mover is not None:
        mover_id = len(primitives)
        primitives.append(mover)

    n = h * w
    best_t = np.full(n, np.inf)
    best_obj = np.full(n, -1, np.int64)
    best_face = np.zeros(n, np.int64)
    for oid, prim in enumerate(primitives):
        if isinstance(prim, Box):
            t, face = _ray_box(origin, d_world, prim)
        else:
            t = _ray_rect(origin, d_world, prim)
            face = np.full(n, prim.axis * 2, np.int64)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_obj[closer] = oid
        best_face[closer] = face[closer]

    hit = np.isfinite(best_t)
    points_world = origin[None, :] + np.where(hit, best_t, 0.0)[:, None] * d_world

    # base color per hit
    base = np.tile(_MISS_COLOR, (n, 1))
    normals = np.zeros((n, 3))
    for oid, prim in enumerate(primitives):
        sel = hit & (best_obj == oid)
        if not sel.any():
            continue
        if isinstance(prim, Box):
            base[sel] = prim.face_colors[best_face[sel]]
            normals[sel] = _FACE_NORMALS[best_face[sel]]
            # normal faces the viewer for both exterior and interior hits
            flip = (normals[sel] * d_world[sel]).sum(axis=1) > 0
            rows_sel = np.nonzero(sel)[0]
            normals[rows_sel[flip]] *= -1.0
        else:
            others = [i for i in range(3) if i != prim.axis]
            if prim.color_b is None:
                base[sel] = prim.color_a
            else:
                u = np.floor(points_world[sel][:, others[0]] / prim.checker)
                v = np.floor(points_world[sel][:, others[1]] / prim.checker)
                parity = ((u + v) % 2).astype(bool)
                base[sel] = np.where(parity[:, None], prim.color_b, prim.color_a)
            nrm = np.zeros(3)
            nrm[prim.axis] = 1.0
            sign = np.where(d_world[sel][:, prim.axis] > 0, -1.0, 1.0)
            normals[sel] = sign[:, None] * nrm[None, :]

    image = np.tile(_MISS_COLOR, (n, 1))
    image[hit] = _shade(base[hit], normals[hit])
    if rgb_noise is not None:
        image = np.clip(image + rgb_noise.reshape(n, 3), 0.0, 1.0)
    image = _quantize(image).reshape(h, w, 3)

    p_cam = points_world @ cam.rotation.T + cam.translation
    p_cam[~hit] = 0.0
    features = np.zeros((n, feature_table.shape[2]), np.float32)
    features[hit] = feature_table[best_obj[hit], best_face[hit]]
    mask = hit & (best_obj == mover_id) if mover_id is not None else np.zeros(n, bool)

    return ViewRecord(
        camera=cam,
        image=image,
        points=p_cam.astype(np.float32).reshape(h, w, 3),
        confidence=hit.astype(np.float32).reshape(h, w),
        features=features.reshape(h, w, -1),
        mask=mask.reshape(h, w),
    )


def generate_sequence(
    scene: SyntheticScene,
    rig: RigSpec,
    frames: int,
    seed: int,
    feature_dim: int = 16,
    depth_jitter: float = 0.0,
):
    """Ray-cast `frames` time steps; returns (packets, labels).

    labels carry the mover bounds per frame and the dynamic pixel fraction,
    the ground truth used by the static/dynamic split tests.
    """
    n_objects = len(scene.boxes) + len(scene.rects) + (1 if scene.mover is not None else 0)
    feature_table = _face_feature_table(n_objects, feature_dim, rng.derive_seed(seed, "features"))
    jitter_rng = np.random.default_rng(rng.derive_seed(seed, "jitter") % 2**32)

    packets = []
    labels = {"mover_bounds": [], "dynamic_fraction": []}
    for f in range(frames):
        t = f / rig.fps
        base = np.asarray(rig.velocity, np.float64) * t
        views = []
        for cam in rig_cameras(rig, base):
            view = render_view(scene, cam, t, feature_table)
            if depth_jitter > 0:
                noise = jitter_rng.normal(scale=depth_jitter, size=view.points.shape[:2])
                scale = 1.0 + noise / np.maximum(np.linalg.norm(view.points, axis=2), 1e-6)
                view.points = (view.points * scale[..., None].astype(np.float32)).astype(np.float32)
            views.append(view)
        packets.append(FramePacket(frame_id=f, views=views))
        mover = scene.mover_at(t)
        labels["mover_bounds"].append(None if mover is None else (mover.lo.copy(), mover.hi.copy()))
        dyn = sum(int(v.mask.sum()) for v in views)
        total = sum(v.mask.size for v in views)
        labels["dynamic_fraction"].append(dyn / total)
    return packets, labels


def ground_truth_cloud(scene: SyntheticScene, density: float, seed: int = 0) -> np.ndarray:
    """Stratified uniform sampling of all static surfaces.

    Exactly round(area * density) points per face, jittered inside their
    strata; the mover is excluded.
    """
    if density <= 0:
        raise ValueError("density must be positive")
    rs = np.random.default_rng(rng.derive_seed(seed, "gt_cloud") % 2**32)
    points = []

    def sample_face(corner, edge_u, edge_v):
        area = np.linalg.norm(edge_u) * np.linalg.norm(edge_v)
        count = int(round(area * density))
        if count == 0:
            return
        aspect = np.linalg.norm(edge_u) / np.linalg.norm(edge_v)
        n_u = max(1, int(round(math.sqrt(count * aspect))))
        n_v = max(1, math.ceil(count / n_u))
        cells = [(i, j) for j in range(n_v) for i in range(n_u)][:count]
        ij = np.asarray(cells, np.float64)
        u = (ij[:, 0] + rs.uniform(size=count)) / n_u
        v = (ij[:, 1] + rs.uniform(size=count)) / n_v
        points.append(corner[None, :] + u[:, None] * edge_u[None, :] + v[:, None] * edge_v[None, :])

    for box in scene.boxes:
        lo, hi = box.lo, box.hi
        ext = hi - lo
        for ax in range(3):
            o1, o2 = [i for i in range(3) if i != ax]
            for level in (lo[ax], hi[ax]):
                corner = lo.copy()
                corner[ax] = level
                e_u = np.zeros(3)
                e_u[o1] = ext[o1]
                e_v = np.zeros(3)
                e_v[o2] = ext[o2]
                sample_face(corner, e_u, e_v)
    for rect in scene.rects:
        others = [i for i in range(3) if i != rect.axis]
        corner = np.zeros(3)
        corner[rect.axis] = rect.level
        corner[others[0]] = rect.lo[0]
        corner[others[1]] = rect.lo[1]
        e_u = np.zeros(3)
        e_u[others[0]] = rect.hi[0] - rect.lo[0]
        e_v = np.zeros(3)
        e_v[others[1]] = rect.hi[1] - rect.lo[1]
        sample_face(corner, e_u, e_v)

    if not points:
        return np.zeros((0, 3))
    return np.concatenate(points, axis=0)


# ---------------------------------------------------------------------------
# Scene presets
# ---------------------------------------------------------------------------

DEFAULT_SUITE = ("room", "boxes", "corridor")

_PALETTE = np.array(
    [
        [0.85, 0.30, 0.25],
        [0.25, 0.60, 0.85],
        [0.30, 0.75, 0.35],
        [0.90, 0.75, 0.25],
        [0.60, 0.35, 0.75],
        [0.85, 0.55, 0.30],
        [0.35, 0.70, 0.70],
        [0.75, 0.40, 0.55],
    ]
)


def _face_palette(rs, tint=0.0):
    base = _PALETTE[rs.integers(0, len(_PALETTE))]
    jitter = rs.uniform(-0.08, 0.08, (6, 3))
    return np.clip(base[None, :] + jitter + tint, 0.05, 0.95)


def _scatter_boxes(rs, count, r_lo, r_hi, floor_z, size_lo=0.3, size_hi=0.9):
    boxes = []
    for _ in range(count):
        ang = rs.uniform(-math.pi, math.pi)
        dist = rs.uniform(r_lo, r_hi)
        cx, cy = dist * math.cos(ang), dist * math.sin(ang)
        sx, sy = rs.uniform(size_lo, size_hi, 2)
        sz = rs.uniform(0.4, 1.6)
        lo = np.array([cx - sx / 2, cy - sy / 2, floor_z])
        hi = np.array([cx + sx / 2, cy + sy / 2, floor_z + sz])
        boxes.append(Box(lo, hi, _face_palette(rs)))
    return boxes


def build_scene(name: str, seed: int = 0, with_mover: bool = False) -> SyntheticScene:
    """Named scene presets; `seed` jitters colors and placement."""
    rs = np.random.default_rng(rng.derive_seed(seed, f"scene:{name}") % 2**32)
    floor_z = -1.5
    if name == "room":
        half_x, half_y, top = 5.0, 4.0, 1.6
        room = Box(
            [-half_x, -half_y, floor_z],
            [half_x, half_y, top],
            _face_palette(rs, tint=0.1),
            interior=True,
        )
        floor = Rect(
            axis=2,
            level=floor_z + 1e-3,
            lo=[-half_x, -half_y],
            hi=[half_x, half_y],
            color_a=[0.75, 0.73, 0.70],
            color_b=[0.35, 0.33, 0.32],
            checker=1.0,
        )
        boxes = [room] + _scatter_boxes(rs, 6, 1.2, 3.5, floor_z)
        scene = SyntheticScene(boxes=boxes, rects=[floor], bounds=(-8.0, 8.0))
    elif name == "boxes":
        ground = Rect(
            axis=2,
            level=floor_z,
            lo=[-20.0, -20.0],
            hi=[20.0, 20.0],
            color_a=[0.55, 0.52, 0.48],
            color_b=[0.30, 0.29, 0.27],
            checker=2.0,
        )
        boxes = _scatter_boxes(rs, 10, 1.5, 9.0, floor_z, size_lo=0.4, size_hi=1.4)
        scene = SyntheticScene(boxes=boxes, rects=[ground], bounds=(-25.0, 25.0))
    elif name == "corridor":
        hall = Box(
            [-12.0, -2.0, floor_z], [12.0, 2.0, 1.6], _face_palette(rs, tint=0.05), interior=True
        )
        floor = Rect(
            axis=2,
            level=floor_z + 1e-3,
            lo=[-12.0, -2.0],
            hi=[12.0, 2.0],
            color_a=[0.70, 0.68, 0.66],
            color_b=[0.32, 0.31, 0.30],
            checker=0.75,
        )
        boxes = [hall]
        for k in range(5):
            x = -9.0 + 4.2 * k + rs.uniform(-0.4, 0.4)
            side = 1 if k % 2 == 0 else -1
            sx, sz = rs.uniform(0.4, 0.8), rs.uniform(0.5, 1.4)
            lo = np.array([x - sx / 2, side * 1.2 - 0.3, floor_z])
            hi = np.array([x + sx / 2, side * 1.2 + 0.3, floor_z + sz])
            boxes.append(Box(lo, hi, _face_palette(rs)))
        scene = SyntheticScene(boxes=boxes, rects=[floor], bounds=(-15.0, 15.0))
    else:
        raise ValueError(f"unknown scene preset {name!r}")

    if with_mover:
        scene.mover = Box([1.8, -0.6, floor_z], [2.4, 0.0, floor_z + 0.7], _face_palette(rs))
        scene.mover_velocity = np.array([0.0, 0.22, 0.0])
    return scene
