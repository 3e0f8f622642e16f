"""Run configuration: one nested document controls every pipeline stage.

Configs load from JSON; unknown keys are rejected so typos fail loudly.
Angles are given in degrees and scales in meters for readability, and are
converted where the math wants radians / log domain.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

from .geometry import GridSpec


def _from_dict(cls, data: dict, path: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config key(s) {sorted(unknown)} under '{path}'")
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if hasattr(f.type, "__dataclass_fields__") or f.name in _SECTION_TYPES:
            section_cls = _SECTION_TYPES[f.name]
            if not isinstance(value, dict):
                raise ValueError(f"config section '{path}.{f.name}' must be an object")
            value = _from_dict(section_cls, value, f"{path}.{f.name}")
        kwargs[f.name] = value
    return cls(**kwargs)


@dataclass(frozen=True)
class GridSection:
    r_min: float = 0.2
    r_max: float = 50.0
    delta_r: float = 0.5
    n_theta: int = 180
    delta_phi_deg: float = 2.0
    epsilon: float = 1e-8
    conf_threshold: float = 0.5
    feature_dim: int = 16  # per-pixel feature channels (C)
    anchor_dim: int = 32  # pooled anchor feature width (D)
    pool_scale: float = 0.5  # pooling-MLP seeded weight scale
    conv_noise: float = 0.01  # off-center sparse-conv kernel magnitude

    def to_grid_spec(self) -> GridSpec:
        return GridSpec(
            r_min=self.r_min,
            r_max=self.r_max,
            delta_r=self.delta_r,
            n_theta=self.n_theta,
            delta_phi=math.radians(self.delta_phi_deg),
            epsilon=self.epsilon,
        )


@dataclass(frozen=True)
class DecoderSection:
    k: int = 2
    gamma: float | None = None  # None = half voxel diagonal at the cell radius
    scale_min: float = 0.005  # meters, before the distance factor
    scale_max: float = 1.0
    r_ref: float = 1.0
    sh_degree: int = 1
    head_hidden: int = 32
    weight_scale: float = 0.01
    opacity_bias: float = 2.5
    scale_bias: float = 0.0
    radius_cue: bool = True


@dataclass(frozen=True)
class RendererSection:
    alpha_cutoff: float = 1.0 / 255.0
    transmittance_min: float = 1e-4
    background: tuple = (0.5, 0.5, 0.5)


@dataclass(frozen=True)
class StreamingSection:
    range_n_theta: int = 360  # 1-degree azimuth bins
    range_n_phi: int = 180
    dilate_px: int = 1
    hole_alpha: float = 0.5
    refiner_hidden: tuple = (32, 32)
    refiner_freqs: int = 4
    fit_steps: int = 20
    fit_lr: float = 0.01
    match_cap: int = 4096  # deterministic stride-subsample of correspondences


@dataclass(frozen=True)
class LossSection:
    lambda_mse: float = 1.0
    lambda_lpips: float = 0.0
    lambda_points: float = 1.0
    lambda_normal: float = 1.0


_SECTION_TYPES = {
    "grid": GridSection,
    "decoder": DecoderSection,
    "renderer": RendererSection,
    "streaming": StreamingSection,
    "loss": LossSection,
}


@dataclass(frozen=True)
class RunConfig:
    grid: GridSection = field(default_factory=GridSection)
    decoder: DecoderSection = field(default_factory=DecoderSection)
    renderer: RendererSection = field(default_factory=RendererSection)
    streaming: StreamingSection = field(default_factory=StreamingSection)
    loss: LossSection = field(default_factory=LossSection)
    seed: int = 0
    weights_file: str | None = None  # npz with pool/conv/head parameters

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _from_dict(cls, data, "config")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
