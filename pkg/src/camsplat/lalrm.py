"""Feed-forward reconstruction: video latent + camera rays -> Gaussian cloud.

Two token streams (patchified latent, strided-convolution pose encoding)
are channel-concatenated, projected back to model width, run through
transformer blocks, and decoded by a transposed 3D convolution into a
12-channel per-pixel feature map: [rgb, scale, quaternion, opacity,
ray distance]. Activations then lift each pixel to one Gaussian on its
camera ray, so every invariant of the cloud holds by construction.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .camera import PluckerEmbedding, Trajectory, ray_grid
from .codec import VideoLatent, causal_group_frames
from .errors import ContractError, NumericError, ShapeError
from .gaussians import GaussianCloud
from .numerics import (Tensor, clamp, concat, conv3d, conv_transpose3d, exp,
                       layer_norm, matmul, reshape, sigmoid, sqrt, tsum,
                       transpose)
from . import nn


@dataclass(frozen=True)
class LaLRMConfig:
    patch: int = 3                    # latent spatial patch size
    num_blocks: int = 6
    hidden: int = 128
    heads: int = 4
    latent_channels: int = 768
    spatial_rate: int = 8
    temporal_rate: int = 4
    deconv_strides: Optional[tuple] = None   # (dt, ds, ds); None -> default
    near: float = 0.1
    far: float = 100.0
    init_scale: float = 0.05
    max_t: tuple = (8, 16, 16)
    check_finite: bool = True

    def __post_init__(self):
        if self.patch < 1:
            raise ContractError(f"patch must be >= 1, got {self.patch}")
        if self.hidden % self.heads != 0:
            raise ContractError(f"hidden {self.hidden} not divisible by "
                                f"heads {self.heads}")
        if not 0 < self.near < self.far:
            raise ContractError(f"need 0 < near < far, got [{self.near}, {self.far}]")
        if self.deconv_strides is not None and len(self.deconv_strides) != 3:
            raise ContractError("deconv_strides must be (dt, ds, ds)")

    @property
    def strides(self) -> tuple:
        if self.deconv_strides is not None:
            return tuple(int(v) for v in self.deconv_strides)
        s = self.patch * self.spatial_rate
        return (self.temporal_rate, s, s)

    def output_dims(self, t: int, h: int, w: int) -> tuple:
        """(T, H', W', rows) produced from a (t, h, w, c) latent."""
        if h % self.patch or w % self.patch:
            raise ShapeError(f"latent grid {h}x{w} not divisible by patch "
                             f"{self.patch}")
        dt, ds, _ = self.strides
        big_t = 1 + (t - 1) * self.temporal_rate
        if t * dt < big_t:
            raise ContractError(f"deconv temporal stride {dt} cannot cover "
                                f"{big_t} frames from {t} groups")
        hp, wp = (h // self.patch) * ds, (w // self.patch) * ds
        return big_t, hp, wp, big_t * hp * wp


@dataclass
class GaussianFeatureMap:
    """Raw 12-channel pixel map plus its raster geometry."""
    G: Tensor           # (T*H'*W', 12), rows ordered frame-major then row-major
    frames: int
    height: int
    width: int

    def __post_init__(self):
        rows = self.frames * self.height * self.width
        if self.G.shape != (rows, 12):
            raise ShapeError(f"feature map must be ({rows}, 12) for "
                             f"{self.frames}x{self.height}x{self.width}, "
                             f"got {self.G.shape}")


class LaLRM:
    def __init__(self, config: LaLRMConfig,
                 rng: Optional[np.random.Generator] = None, _defer: bool = False):
        self.config = config
        self.params: dict = {}
        if _defer:
            return
        if rng is None:
            rng = np.random.default_rng(0)
        self._build(rng)

    @classmethod
    def empty(cls, config: LaLRMConfig) -> "LaLRM":
        return cls(config, _defer=True)

    def _build(self, rng: np.random.Generator) -> None:
        c = self.config
        p, d = self.params, c.hidden
        nn.init_linear(p, "lat.patch", c.patch * c.patch * c.latent_channels,
                       d, rng)
        nn.init_posemb_3d(p, "lat.pos", c.max_t, d, rng)
        st = c.patch * c.spatial_rate
        p["pose.conv.w"] = Tensor.randn(
            (c.temporal_rate, st, st, 6, d), rng,
            scale=(c.temporal_rate * st * st * 6) ** -0.5, requires_grad=True)
        p["pose.conv.b"] = Tensor.zeros((d,), requires_grad=True)
        nn.init_posemb_3d(p, "pose.pos", c.max_t, d, rng)
        nn.init_linear(p, "mix", 2 * d, d, rng)
        for i in range(c.num_blocks):
            nn.init_block(p, f"block{i}", d, c.heads, rng)
        nn.init_layer_norm(p, "out.ln", d)
        dt, ds, _ = c.strides
        p["dec.w"] = Tensor.randn((d, dt, ds, ds, 12), rng, scale=0.02,
                                  requires_grad=True)
        # bias fixes the raw map near a sane cloud: identity quaternion,
        # mid-gray, small scales, mid-range opacity and distance
        bias = np.zeros(12, dtype=np.float32)
        bias[3:6] = np.log(c.init_scale)
        bias[6] = 1.0
        p["dec.b"] = Tensor(bias, requires_grad=True)

    def trainable_parameters(self) -> dict:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def _require_weights(self):
        if not self.params:
            raise ContractError("model has no weights; construct with an rng "
                                "or load a checkpoint first")

    # -- tokenizers --------------------------------------------------------

    def tokenize_latent(self, z) -> Tensor:
        """Spatial patches -> linear projection + learned positions."""
        self._require_weights()
        c = self.config
        za = z.data if isinstance(z, VideoLatent) else z
        za = za if isinstance(za, Tensor) else Tensor(np.asarray(za, dtype=np.float32))
        if za.data.ndim != 4 or za.shape[-1] != c.latent_channels:
            raise ShapeError(f"latent must be (t, h, w, {c.latent_channels}), "
                             f"got {za.shape}")
        t, h, w, ch = za.shape
        if h % c.patch or w % c.patch:
            raise ShapeError(f"latent grid {h}x{w} not divisible by patch "
                             f"{c.patch}")
        gh, gw = h // c.patch, w // c.patch
        x = reshape(za, (t, gh, c.patch, gw, c.patch, ch))
        x = transpose(x, (0, 1, 3, 2, 4, 5))
        x = reshape(x, (t * gh * gw, c.patch * c.patch * ch))
        tok = nn.linear(x, self.params, "lat.patch")
        return tok + nn.posemb_3d(self.params, "lat.pos", t, gh, gw)

    def tokenize_pose(self, p) -> Tensor:
        """Strided 3D convolution over the ray map, causal first frame."""
        self._require_weights()
        c = self.config
        pa = p.data if isinstance(p, PluckerEmbedding) else p
        pa = pa if isinstance(pa, Tensor) else Tensor(np.asarray(pa, dtype=np.float32))
        if pa.data.ndim != 4 or pa.shape[-1] != 6:
            raise ShapeError(f"ray embedding must be (T, H, W, 6), got {pa.shape}")
        big_t, big_h, big_w = pa.shape[0], pa.shape[1], pa.shape[2]
        st = c.patch * c.spatial_rate
        if big_h % st or big_w % st or (big_t - 1) % c.temporal_rate:
            raise ShapeError(
                f"ray map {big_t}x{big_h}x{big_w} incompatible with pose "
                f"tokenization: temporal stride {c.temporal_rate} (frames must "
                f"be 1 mod {c.temporal_rate}), spatial stride {st}")
        grouped = causal_group_frames(pa.data, c.temporal_rate)
        x = conv3d(Tensor(grouped), self.params["pose.conv.w"],
                   self.params["pose.conv.b"],
                   stride=(c.temporal_rate, st, st))
        gt, gh, gw = x.shape[0], x.shape[1], x.shape[2]
        x = reshape(x, (gt * gh * gw, c.hidden))
        return x + nn.posemb_3d(self.params, "pose.pos", gt, gh, gw)

    # -- forward -----------------------------------------------------------

    def forward(self, z, p) -> GaussianFeatureMap:
        self._require_weights()
        c = self.config
        za = z.data if isinstance(z, VideoLatent) else z
        za = za if isinstance(za, Tensor) else Tensor(np.asarray(za, dtype=np.float32))
        o_l = self.tokenize_latent(za)
        o_p = self.tokenize_pose(p)
        if o_l.shape[0] != o_p.shape[0]:
            raise ContractError(f"token length mismatch: latent {o_l.shape[0]} "
                                f"vs pose {o_p.shape[0]}")
        h = matmul(concat([o_l, o_p], axis=-1), self.params["mix.w"])
        h = h + self.params["mix.b"]
        for i in range(c.num_blocks):
            h = nn.block_forward(h, self.params, f"block{i}", c.heads)
            if c.check_finite and not np.all(np.isfinite(h.data)):
                raise NumericError(f"non-finite activations after block {i}")
        h = layer_norm(h, self.params["out.ln.g"], self.params["out.ln.b"])

        t, gh, gw = za.shape[0], za.shape[1] // c.patch, za.shape[2] // c.patch
        big_t, hp, wp, rows = c.output_dims(za.shape[0], za.shape[1], za.shape[2])
        grid = reshape(h, (t, gh, gw, c.hidden))
        dec = conv_transpose3d(grid, self.params["dec.w"], self.params["dec.b"])
        # drop the frames that exist only because frame 0 was replicated
        lead = dec.shape[0] - big_t
        if lead:
            dec = dec[lead:]
        G = reshape(dec, (rows, 12))
        return GaussianFeatureMap(G, big_t, hp, wp)

    # -- persistence -------------------------------------------------------

    def state_arrays(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def load_state(self, arrays: dict) -> None:
        if self.params:
            if set(self.params) != set(arrays):
                missing = sorted(set(self.params) - set(arrays))[:3]
                extra = sorted(set(arrays) - set(self.params))[:3]
                raise ContractError(f"checkpoint mismatch; missing {missing}, "
                                    f"unexpected {extra}")
            for k, t in self.params.items():
                if t.data.shape != arrays[k].shape:
                    raise ShapeError(f"parameter {k} shape {arrays[k].shape} "
                                     f"!= expected {t.data.shape}")
                t.data[...] = arrays[k].astype(np.float32)
        else:
            for k, a in arrays.items():
                self.params[k] = Tensor(a.astype(np.float32), requires_grad=True)

    # -- lifting -----------------------------------------------------------

    def lift_to_gaussians(self, fmap: GaussianFeatureMap,
                          traj: Trajectory) -> GaussianCloud:
        """Activate the raw map and place one Gaussian per pixel ray.

        Trajectory intrinsics must describe the feature-map raster; for the
        half-resolution variant rescale poses with ``scaled_to`` first.
        """
        return lift_to_gaussians(fmap, traj, near=self.config.near,
                                 far=self.config.far)


def lift_to_gaussians(fmap: GaussianFeatureMap, traj: Trajectory,
                      near: float = 0.1, far: float = 100.0) -> GaussianCloud:
    if len(traj) != fmap.frames:
        raise ContractError(f"feature map covers {fmap.frames} frames but "
                            f"trajectory has {len(traj)}")
    big_t, hp, wp = fmap.frames, fmap.height, fmap.width
    rows = big_t * hp * wp
    G = fmap.G

    colors = sigmoid(G[:, 0:3])
    scales = exp(clamp(G[:, 3:6], np.log(1e-6), np.log(1e2)))
    quat_raw = G[:, 6:10]
    qn = sqrt(tsum(quat_raw * quat_raw, axis=1, keepdims=True)
              + Tensor(np.float32(1e-12)))
    rotations = quat_raw / qn
    opac = sigmoid(G[:, 10])
    dist = Tensor(np.float32(near)) + sigmoid(G[:, 11:12]) \
        * Tensor(np.float32(far - near))

    # unit pure ray directions through pixel centers, frame-major rows
    vs = np.arange(hp, dtype=np.float64) + 0.5
    us = np.arange(wp, dtype=np.float64) + 0.5
    dirs = np.empty((big_t, hp, wp, 3), dtype=np.float64)
    centers = np.empty((big_t, 3), dtype=np.float64)
    for f, pose in enumerate(traj.poses):
        d = ray_grid(pose, vs, us, include_translation=False)
        dirs[f] = d / np.linalg.norm(d, axis=-1, keepdims=True)
        centers[f] = pose.t
    dirs_flat = Tensor(dirs.reshape(rows, 3).astype(np.float32))
    centers_flat = Tensor(np.repeat(centers, hp * wp, axis=0).astype(np.float32))
    positions = centers_flat + dist * dirs_flat
    return GaussianCloud(positions, scales, rotations, colors, opac)
