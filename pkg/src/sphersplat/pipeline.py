"""Wiring: config + seed -> the full point-maps-to-Gaussians pipeline.

All learnable-shaped parameters (pooling MLP, conv kernel, decoder heads)
come either from a weights npz or from the documented splitmix64 streams,
so two pipelines built from the same (config, seed) are interchangeable
bit for bit.
"""

from __future__ import annotations

import math

import numpy as np

from . import rng
from .config import RunConfig
from .decoder import DecoderConfig, DecoderHeads, GaussianSet, decode_grid
from .grid import (
    FramePacket,
    PointSamples,
    SparseSphericalGrid,
    assemble_point_samples,
    build_grid,
    seeded_conv_kernel,
)
from .mlp import TinyMLP
from .renderer import RenderConfig, RenderedImage, render, render_coverage


class ReconPipeline:
    def __init__(self, cfg: RunConfig | None = None):
        self.cfg = cfg or RunConfig()
        g = self.cfg.grid
        d = self.cfg.decoder
        self.grid_spec = g.to_grid_spec()
        self.decoder_cfg = DecoderConfig(
            k=d.k,
            gamma=d.gamma,
            log_scale_min=math.log(d.scale_min),
            log_scale_max=math.log(d.scale_max),
            r_ref=d.r_ref,
            sh_degree=d.sh_degree,
            head_hidden=d.head_hidden,
            weight_scale=d.weight_scale,
            opacity_bias=d.opacity_bias,
            scale_bias=d.scale_bias,
            radius_cue=d.radius_cue,
        )
        self.render_cfg = RenderConfig(
            alpha_cutoff=self.cfg.renderer.alpha_cutoff,
            transmittance_min=self.cfg.renderer.transmittance_min,
        )
        self.background = np.asarray(self.cfg.renderer.background, np.float64)

        attr_dim = 9 + g.feature_dim  # position | rgb | view_dir | feature
        seed = self.cfg.seed
        if self.cfg.weights_file:
            data = np.load(self.cfg.weights_file)
            self.pool_mlp = TinyMLP.from_flat(
                [int(s) for s in data["pool.sizes"]], data["pool.flat"]
            )
            self.conv_kernel = data["conv.kernel"].astype(np.float64)
            self.heads = DecoderHeads.load_npz(self.cfg.weights_file)
        else:
            self.pool_mlp = TinyMLP.seeded(
                [attr_dim + 3, g.anchor_dim], rng.derive_seed(seed, "pool"), g.pool_scale
            )
            self.conv_kernel = seeded_conv_kernel(
                g.anchor_dim, rng.derive_seed(seed, "conv"), g.conv_noise
            )
            self.heads = DecoderHeads.seeded(
                g.anchor_dim, self.decoder_cfg, rng.derive_seed(seed, "heads")
            )

    def save_weights(self, path):
        arrays = {
            "pool.sizes": np.asarray(self.pool_mlp.sizes, np.int64),
            "pool.flat": self.pool_mlp.flat_parameters(),
            "conv.kernel": self.conv_kernel.astype(np.float32),
        }
        from .decoder import _HEAD_NAMES

        for name in _HEAD_NAMES:
            head = getattr(self.heads, name)
            if head is None:
                continue
            arrays[f"{name}.sizes"] = np.asarray(head.sizes, np.int64)
            arrays[f"{name}.flat"] = head.flat_parameters()
        np.savez(path, **arrays)

    # -- stages ---------------------------------------------------------------

    def assemble(self, frame: FramePacket) -> PointSamples:
        return assemble_point_samples(frame, self.cfg.grid.conf_threshold)

    def grid_from_samples(self, samples: PointSamples) -> SparseSphericalGrid:
        return build_grid(samples, self.grid_spec, self.pool_mlp, self.conv_kernel)

    def decode_samples(
        self, samples: PointSamples, source: str = "decoded", frame_id: int = -1
    ) -> GaussianSet:
        grid = self.grid_from_samples(samples)
        return decode_grid(grid, self.decoder_cfg, self.heads, source=source, frame_id=frame_id)

    def decode_frame(self, frame: FramePacket, source: str = "decoded") -> GaussianSet:
        return self.decode_samples(self.assemble(frame), source=source, frame_id=frame.frame_id)

    def render(self, gset: GaussianSet, camera, background=None) -> RenderedImage:
        bg = self.background if background is None else np.asarray(background, np.float64)
        return render(gset, camera, bg, self.render_cfg)

    def coverage(self, gset: GaussianSet, camera) -> np.ndarray:
        return render_coverage(gset, camera, self.render_cfg)
