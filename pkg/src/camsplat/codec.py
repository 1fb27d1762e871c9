"""Video to latent and back.

The default codec is a lossless space-to-depth rearrangement at the
compression geometry r_s=8, r_t=4: frame 0 forms its own temporal group
(replicated to keep channel width uniform), later frames group in runs
of r_t, and each r_t×r_s×r_s×3 block folds into 3·r_t·r_s² = 768
channels. A small learned strided-conv autoencoder with the same
geometry but a narrow bottleneck exists alongside it.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError, ShapeError
from .numerics import (GradTape, Tensor, conv3d, conv_transpose3d, make_rng,
                       matmul, silu)
from .optim import Adam


@dataclass
class Video:
    """Frames in [0, 1], shape T×H×W×3. fps is informational only."""

    data: Tensor
    fps: float = 8.0

    def __post_init__(self):
        if not isinstance(self.data, Tensor):
            self.data = Tensor(self.data)
        if self.data.ndim != 4 or self.data.shape[-1] != 3:
            raise ShapeError(f"video must be T×H×W×3, got {self.data.shape}")
        lo = float(self.data.data.min())
        hi = float(self.data.data.max())
        if lo < 0.0 or hi > 1.0:
            raise ContractError(f"video values must lie in [0,1], got [{lo:.4f}, {hi:.4f}]")

    @property
    def num_frames(self) -> int: return self.data.shape[0]
    @property
    def height(self) -> int: return self.data.shape[1]
    @property
    def width(self) -> int: return self.data.shape[2]


@dataclass
class VideoLatent:
    """Latent grid t×h×w×c tagged with the codec that produced it."""

    data: Tensor
    codec_id: str
    spatial_rate: int = 8
    temporal_rate: int = 4

    def __post_init__(self):
        if not isinstance(self.data, Tensor):
            self.data = Tensor(self.data)
        if self.data.ndim != 4:
            raise ShapeError(f"latent must be t×h×w×c, got {self.data.shape}")

    @property
    def shape(self) -> tuple: return self.data.shape


def _check_video_shape(shape: tuple, r_s: int, r_t: int) -> None:
    T, H, W = shape[0], shape[1], shape[2]
    if T < 1:
        raise ShapeError("video needs at least one frame")
    if H % r_s != 0:
        raise ShapeError(f"height {H} not divisible by spatial rate {r_s}")
    if W % r_s != 0:
        raise ShapeError(f"width {W} not divisible by spatial rate {r_s}")
    if (T - 1) % r_t != 0:
        raise ShapeError(f"frame count {T} minus one not divisible by temporal rate {r_t}")


def causal_group_frames(data: np.ndarray, r_t: int) -> np.ndarray:
    """Prepend r_t - 1 copies of frame 0 so groups of r_t tile T' = r_t·t."""
    head = np.broadcast_to(data[0], (r_t - 1,) + data.shape[1:])
    return np.concatenate([head, data], axis=0)


class LosslessCodec:
    """Bit-exact space-to-depth rearrangement; decode inverts encode."""

    def __init__(self, spatial_rate: int = 8, temporal_rate: int = 4):
        if spatial_rate < 1 or temporal_rate < 1:
            raise ContractError("codec rates must be positive")
        self.spatial_rate = int(spatial_rate)
        self.temporal_rate = int(temporal_rate)

    @property
    def codec_id(self) -> str:
        return f"s2d-rs{self.spatial_rate}-rt{self.temporal_rate}"

    @property
    def channels(self) -> int:
        return 3 * self.temporal_rate * self.spatial_rate ** 2

    def latent_shape(self, T: int, H: int, W: int) -> tuple:
        _check_video_shape((T, H, W), self.spatial_rate, self.temporal_rate)
        return (1 + (T - 1) // self.temporal_rate, H // self.spatial_rate,
                W // self.spatial_rate, self.channels)

    def encode(self, video: Video) -> VideoLatent:
        r_s, r_t = self.spatial_rate, self.temporal_rate
        _check_video_shape(video.data.shape, r_s, r_t)
        return VideoLatent(Tensor(self.encode_array(video.data.data)),
                           self.codec_id, r_s, r_t)

    def encode_array(self, arr: np.ndarray) -> np.ndarray:
        r_s, r_t = self.spatial_rate, self.temporal_rate
        T, H, W, C = arr.shape
        t, h, w = 1 + (T - 1) // r_t, H // r_s, W // r_s
        g = causal_group_frames(arr, r_t)
        g = g.reshape(t, r_t, h, r_s, w, r_s, C)
        # channel layout: (temporal offset, row offset, col offset, rgb)
        g = g.transpose(0, 2, 4, 1, 3, 5, 6)
        return np.ascontiguousarray(g).reshape(t, h, w, r_t * r_s * r_s * C)

    def decode(self, latent: VideoLatent) -> Video:
        if latent.codec_id != self.codec_id:
            raise ContractError(f"latent was produced by '{latent.codec_id}', "
                                f"this codec is '{self.codec_id}'")
        return Video(Tensor(self.decode_array(latent.data.data)))

    def decode_array(self, arr: np.ndarray) -> np.ndarray:
        r_s, r_t = self.spatial_rate, self.temporal_rate
        t, h, w, c = arr.shape
        if c != self.channels:
            raise ShapeError(f"latent has {c} channels, codec expects {self.channels}")
        g = arr.reshape(t, h, w, r_t, r_s, r_s, 3)
        g = g.transpose(0, 3, 1, 4, 2, 5, 6)
        frames = np.ascontiguousarray(g).reshape(t * r_t, h * r_s, w * r_s, 3)
        out = frames[r_t - 1:]
        # sampled latents may overshoot the valid range; identity for real videos
        return np.ascontiguousarray(np.clip(out, 0.0, 1.0))

    def decode_array_unclamped(self, arr: np.ndarray) -> np.ndarray:
        r_s, r_t = self.spatial_rate, self.temporal_rate
        t, h, w, c = arr.shape
        if c != self.channels:
            raise ShapeError(f"latent has {c} channels, codec expects {self.channels}")
        g = arr.reshape(t, h, w, r_t, r_s, r_s, 3)
        g = g.transpose(0, 3, 1, 4, 2, 5, 6)
        frames = np.ascontiguousarray(g).reshape(t * r_t, h * r_s, w * r_s, 3)
        return np.ascontiguousarray(frames[r_t - 1:])


@dataclass
class LearnedCodecConfig:
    channels: int = 16
    hidden: int = 32
    steps: int = 500
    lr: float = 3e-3
    seed: int = 0
    spatial_rate: int = 8
    temporal_rate: int = 4


class LearnedCodec:
    """Strided-conv encoder/decoder pair with a narrow channel bottleneck.

    The stride equals the compression rates, so the latent grid matches
    the lossless codec exactly; only the channel count differs.
    """

    def __init__(self, config: LearnedCodecConfig, params: dict):
        self.config = config
        self.params = params

    @property
    def codec_id(self) -> str:
        c = self.config
        return f"learned-c{c.channels}-rs{c.spatial_rate}-rt{c.temporal_rate}"

    def encode(self, video: Video) -> VideoLatent:
        c = self.config
        _check_video_shape(video.data.shape, c.spatial_rate, c.temporal_rate)
        z = self._encode_tensor(video.data)
        return VideoLatent(z, self.codec_id, c.spatial_rate, c.temporal_rate)

    def _encode_tensor(self, frames: Tensor) -> Tensor:
        c = self.config
        grouped = Tensor(causal_group_frames(frames.data, c.temporal_rate))
        h = conv3d(grouped, self.params["enc_w"], self.params["enc_b"],
                   stride=(c.temporal_rate, c.spatial_rate, c.spatial_rate))
        h = silu(h)
        return matmul(h, self.params["enc_proj"]) + self.params["enc_proj_b"]

    def decode(self, latent: VideoLatent) -> Video:
        if latent.codec_id != self.codec_id:
            raise ContractError(f"latent was produced by '{latent.codec_id}', "
                                f"this codec is '{self.codec_id}'")
        out = self._decode_tensor(latent.data)
        return Video(Tensor(np.clip(out.data, 0.0, 1.0)))

    def _decode_tensor(self, z: Tensor) -> Tensor:
        c = self.config
        h = silu(matmul(z, self.params["dec_proj"]) + self.params["dec_proj_b"])
        frames = conv_transpose3d(h, self.params["dec_w"], self.params["dec_b"])
        return frames[c.temporal_rate - 1:]


def init_learned_codec(config: LearnedCodecConfig) -> LearnedCodec:
    c = config
    rng = make_rng(c.seed)
    k = (c.temporal_rate, c.spatial_rate, c.spatial_rate)
    fan_in = 3 * k[0] * k[1] * k[2]
    params = {
        "enc_w": Tensor.randn(k + (3, c.hidden), rng, scale=fan_in ** -0.5,
                              requires_grad=True),
        "enc_b": Tensor.zeros((c.hidden,), requires_grad=True),
        "enc_proj": Tensor.randn((c.hidden, c.channels), rng,
                                 scale=c.hidden ** -0.5, requires_grad=True),
        "enc_proj_b": Tensor.zeros((c.channels,), requires_grad=True),
        "dec_proj": Tensor.randn((c.channels, c.hidden), rng,
                                 scale=c.channels ** -0.5, requires_grad=True),
        "dec_proj_b": Tensor.zeros((c.hidden,), requires_grad=True),
        "dec_w": Tensor.randn((c.hidden,) + k + (3,), rng,
                              scale=c.hidden ** -0.5, requires_grad=True),
        "dec_b": Tensor.zeros((3,), requires_grad=True),
    }
    return LearnedCodec(c, params)


def train_learned_codec(dataset: list, config: LearnedCodecConfig | None = None):
    """Fit the autoencoder to ``dataset`` by mean squared error.

    Returns (codec, loss_history). Loss going NaN aborts with the step
    index in the message.
    """
    if config is None:
        config = LearnedCodecConfig()
    if not dataset:
        raise ContractError("train_learned_codec needs a nonempty dataset")
    for v in dataset:
        _check_video_shape(v.data.shape, config.spatial_rate, config.temporal_rate)
    codec = init_learned_codec(config)
    opt = Adam(codec.params, lr=config.lr, weight_decay=0.0)
    history = []
    for step in range(config.steps):
        vid = dataset[step % len(dataset)]
        opt.zero_grad()
        with GradTape():
            z = codec._encode_tensor(vid.data)
            rec = codec._decode_tensor(z)
            diff = rec - vid.data
            loss = (diff * diff).mean()
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise NumericError(f"learned codec diverged at step {step}: loss is not finite")
            loss.backward()
        opt.step()
        history.append(loss_val)
    return codec, history
