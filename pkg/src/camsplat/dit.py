"""Camera-guided latent video diffusion transformer.

A frozen base transformer denoises video latents under epsilon-prediction.
Camera control enters through two optional branches that are exact no-ops
at initialization:

* a ControlNet-style branch: camera tokens are added to the visual tokens
  and pushed through weight-copied clones of the first ``ctrl_blocks`` base
  blocks, each clone's output passing a zero-initialized linear before being
  added to the matching frozen block's output;
* a LoRA branch: a second camera encoding is concatenated to the visual
  tokens and fused back to model width by an identity-initialized linear,
  while low-rank adapters ride on every base block's linears.

Both camera encoders end in zero-initialized linears, so an untrained
camera pathway cannot perturb the base model.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .camera import PluckerEmbedding
from .codec import VideoLatent, causal_group_frames
from .errors import ContractError, NumericError, ShapeError, StateError
from .numerics import (GradTape, Tensor, concat, conv3d, layer_norm, matmul,
                       reshape, silu, stack, tmean, transpose)
from . import nn

VALID_BRANCHES = ("none", "lora", "ctrl", "dual")


class DiffusionSchedule:
    """Variance-preserving cosine schedule on a discrete step grid.

    alpha[0] = 1 (clean) and alpha[-1] = 0 (pure noise) exactly;
    alpha^2 + sigma^2 = 1 everywhere.
    """

    def __init__(self, num_steps: int = 256):
        if num_steps < 2:
            raise ContractError(f"schedule needs >= 2 steps, got {num_steps}")
        self.num_steps = int(num_steps)
        u = np.arange(self.num_steps, dtype=np.float64) / (self.num_steps - 1)
        self.alpha = np.cos(0.5 * np.pi * u)
        self.sigma = np.sin(0.5 * np.pi * u)
        # trig endpoints carry rounding; the contract wants them exact
        self.alpha[0], self.sigma[0] = 1.0, 0.0
        self.alpha[-1], self.sigma[-1] = 0.0, 1.0

    def coeffs(self, tau: int) -> tuple:
        if not 0 <= tau < self.num_steps:
            raise ContractError(f"step index {tau} outside [0, {self.num_steps})")
        return float(self.alpha[tau]), float(self.sigma[tau])

    def add_noise(self, z, tau: int, eps):
        """z_tau = alpha * z + sigma * eps, broadcast over the whole latent."""
        a, s = self.coeffs(tau)
        za = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float32))
        ea = eps if isinstance(eps, Tensor) else Tensor(np.asarray(eps, dtype=np.float32))
        if za.shape != ea.shape:
            raise ShapeError(f"latent {za.shape} and noise {ea.shape} differ")
        return za * Tensor(np.float32(a)) + ea * Tensor(np.float32(s))


@dataclass(frozen=True)
class DiTConfig:
    latent_channels: int = 768
    num_blocks: int = 8
    hidden: int = 128
    heads: int = 4
    ctrl_blocks: int = 4
    lora_rank: int = 8
    branches: str = "dual"
    freeze_base: bool = True
    lora_all_blocks: bool = True     # adapters on every base block, not just ctrl range
    patch_t: int = 1
    patch_s: int = 1
    y_dim: int = 16
    schedule_steps: int = 64
    sample_steps: int = 8
    spatial_rate: int = 8
    temporal_rate: int = 4
    max_t: tuple = (8, 16, 16)       # position table capacity (t, h, w)
    check_finite: bool = True

    def __post_init__(self):
        if self.branches not in VALID_BRANCHES:
            raise ContractError(f"branches must be one of {VALID_BRANCHES}, "
                                f"got {self.branches!r}")
        if not 1 <= self.ctrl_blocks <= self.num_blocks:
            raise ContractError(f"ctrl_blocks {self.ctrl_blocks} outside "
                                f"[1, {self.num_blocks}]")
        if self.hidden % self.heads != 0:
            raise ContractError(f"hidden {self.hidden} not divisible by "
                                f"heads {self.heads}")
        if self.lora_rank < 1:
            raise ContractError(f"lora_rank must be >= 1, got {self.lora_rank}")

    @property
    def use_lora(self) -> bool:
        return self.branches in ("lora", "dual")

    @property
    def use_ctrl(self) -> bool:
        return self.branches in ("ctrl", "dual")

    @property
    def patch_volume(self) -> int:
        return self.patch_t * self.patch_s * self.patch_s


class CameraDiT:
    """Denoiser with dual-branch camera conditioning.

    Build with ``CameraDiT(config, rng)`` for fresh weights or
    ``CameraDiT.empty(config)`` as a load target; calling ``forward`` or
    ``sample`` before weights exist raises a state error.
    """

    def __init__(self, config: DiTConfig, rng: Optional[np.random.Generator] = None,
                 _defer: bool = False):
        self.config = config
        self.params: dict = {}
        if _defer:
            return
        if rng is None:
            rng = np.random.default_rng(0)
        self._build(rng)

    @classmethod
    def empty(cls, config: DiTConfig) -> "CameraDiT":
        return cls(config, _defer=True)

    # -- construction ------------------------------------------------------

    def _build(self, rng: np.random.Generator) -> None:
        c = self.config
        p = self.params
        d = c.hidden
        in_ch = c.patch_volume * 2 * c.latent_channels  # noisy latent ++ image cond
        out_ch = c.patch_volume * c.latent_channels
        # bias-free patch projection: an all-zero input maps onto the
        # position table alone
        nn.init_linear(p, "base.patch", in_ch, d, rng, bias=False)
        nn.init_posemb_3d(p, "base.pos", c.max_t, d, rng)
        nn.init_linear(p, "base.time.w1", d, 4 * d, rng)
        nn.init_linear(p, "base.time.w2", 4 * d, d, rng)
        nn.init_linear(p, "base.cond", c.y_dim, d, rng, zero=True)
        for i in range(c.num_blocks):
            nn.init_block(p, f"base.block{i}", d, c.heads, rng)
        nn.init_layer_norm(p, "base.out.ln", d)
        # small but nonzero: keeps the untrained loss near 1 while letting
        # gradients reach the camera branches through a frozen base
        nn.init_linear(p, "base.out.head", d, out_ch, rng, scale=0.02)
        # step-dependent scalar gates on the noisy latent and the image
        # condition; zero-init so they vanish at initialization. The token
        # pathway alone cannot express the near-identity component of the
        # noise target when hidden width is below the patch content size.
        nn.init_linear(p, "base.skip", d, 2, rng, zero=True)

        if c.use_ctrl:
            self._init_camera_encoder(p, "ctrl.enc", rng)
            for i in range(c.ctrl_blocks):
                # weight-copied clone of the base block
                for k in list(p):
                    pref = f"base.block{i}."
                    if k.startswith(pref):
                        src = p[k]
                        p["ctrl.block%d.%s" % (i, k[len(pref):])] = Tensor(
                            src.data.copy(), requires_grad=True)
                nn.init_linear(p, f"ctrl.zero{i}", d, d, rng, zero=True)
        if c.use_lora:
            self._init_camera_encoder(p, "lora.enc", rng)
            # identity-initialized fusion: [o_v ; o_lora] @ [I ; 0] = o_v
            fw = np.zeros((2 * d, d), dtype=np.float32)
            fw[:d] = np.eye(d, dtype=np.float32)
            p["lora.fuse.w"] = Tensor(fw, requires_grad=True)
            p["lora.fuse.b"] = Tensor.zeros((d,), requires_grad=True)
            blocks = range(c.num_blocks) if c.lora_all_blocks else range(c.ctrl_blocks)
            for i in blocks:
                nn.init_block_lora(p, f"lora.block{i}", d, c.lora_rank, rng)
        self._apply_freeze()

    def _init_camera_encoder(self, p: dict, prefix: str, rng) -> None:
        c = self.config
        d = c.hidden
        st = c.spatial_rate * c.patch_s
        kw = Tensor.randn((c.temporal_rate, st, st, 6, d), rng,
                          scale=(c.temporal_rate * st * st * 6) ** -0.5,
                          requires_grad=True)
        p[prefix + ".conv.w"] = kw
        p[prefix + ".conv.b"] = Tensor.zeros((d,), requires_grad=True)
        nn.init_linear(p, prefix + ".proj", d, d, rng, zero=True)

    def _apply_freeze(self) -> None:
        if not self.config.freeze_base:
            return
        for name, t in self.params.items():
            if name.startswith("base."):
                t.requires_grad = False

    # -- parameter bookkeeping ---------------------------------------------

    def trainable_parameters(self) -> dict:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def parameter_groups(self) -> dict:
        """Names grouped by pathway; groups are disjoint by prefix."""
        groups = {"base": [], "ctrl": [], "lora": []}
        for k in self.params:
            groups[k.split(".")[0]].append(k)
        return groups

    def _require_weights(self):
        if not self.params:
            raise StateError("model has no weights; construct with an rng "
                             "or load a checkpoint first")

    # -- tokenization ------------------------------------------------------

    def _latent_grid(self, shape) -> tuple:
        c = self.config
        t, h, w, ch = shape
        if ch not in (c.latent_channels, 2 * c.latent_channels):
            raise ShapeError(f"latent has {ch} channels, expected "
                             f"{c.latent_channels}")
        if t % c.patch_t or h % c.patch_s or w % c.patch_s:
            raise ShapeError(
                f"latent grid {t}x{h}x{w} not divisible by patch "
                f"{c.patch_t}x{c.patch_s}x{c.patch_s}")
        return t // c.patch_t, h // c.patch_s, w // c.patch_s

    def _patch_tokens(self, z: Tensor) -> Tensor:
        """(t,h,w,2c) -> (N_v, hidden) via patch projection + position table."""
        c = self.config
        gt, gh, gw = self._latent_grid(z.shape)
        t, h, w, ch = z.shape
        x = reshape(z, (gt, c.patch_t, gh, c.patch_s, gw, c.patch_s, ch))
        x = transpose(x, (0, 2, 4, 1, 3, 5, 6))
        x = reshape(x, (gt * gh * gw, c.patch_volume * ch))
        tok = matmul(x, self.params["base.patch.w"])
        return tok + nn.posemb_3d(self.params, "base.pos", gt, gh, gw)

    def patchify_video(self, z) -> Tensor:
        """Tokenize a latent alone (conditioning channels taken as zero)."""
        self._require_weights()
        za = z.data if isinstance(z, VideoLatent) else z
        za = za if isinstance(za, Tensor) else Tensor(np.asarray(za, dtype=np.float32))
        if za.data.ndim != 4:
            raise ShapeError(f"latent must be (t, h, w, c), got {za.shape}")
        if za.shape[-1] == self.config.latent_channels:
            pad = Tensor.zeros(za.shape)
            za = concat([za, pad], axis=-1)
        return self._patch_tokens(za)

    def encode_camera(self, p, branch: str) -> Tensor:
        """Pixel-ray embedding -> camera tokens on the latent grid.

        Strided 3D convolution (temporal stride = temporal_rate with causal
        frame grouping, spatial stride = spatial_rate * patch_s), SiLU, then a
        zero-initialized linear. Exactly zero at initialization.
        """
        self._require_weights()
        if branch not in ("ctrl", "lora"):
            raise ContractError(f"branch must be 'ctrl' or 'lora', got {branch!r}")
        prefix = f"{branch}.enc"
        if prefix + ".conv.w" not in self.params:
            raise StateError(f"{branch} branch not present in this model")
        c = self.config
        pa = p.data if isinstance(p, PluckerEmbedding) else p
        pa = pa if isinstance(pa, Tensor) else Tensor(np.asarray(pa, dtype=np.float32))
        if pa.data.ndim != 4 or pa.shape[-1] != 6:
            raise ShapeError(f"ray embedding must be (T, H, W, 6), got {pa.shape}")
        big_t, big_h, big_w = pa.shape[0], pa.shape[1], pa.shape[2]
        st = c.spatial_rate * c.patch_s
        if big_h % st or big_w % st or (big_t - 1) % c.temporal_rate:
            raise ShapeError(
                f"camera embedding {big_t}x{big_h}x{big_w} incompatible with "
                f"downsample factors: temporal {c.temporal_rate} (frames must "
                f"be 1 mod {c.temporal_rate}), spatial {st} (spatial_rate "
                f"{c.spatial_rate} x patch {c.patch_s})")
        grouped = causal_group_frames(pa.data, c.temporal_rate)
        x = conv3d(Tensor(grouped), self.params[prefix + ".conv.w"],
                   self.params[prefix + ".conv.b"],
                   stride=(c.temporal_rate, st, st))
        gt, gh, gw = x.shape[0], x.shape[1], x.shape[2]
        x = silu(reshape(x, (gt * gh * gw, c.hidden)))
        return nn.linear(x, self.params, prefix + ".proj")

    @staticmethod
    def match_token_length(tokens: Tensor, n: int) -> Tensor:
        """Zero-pad a token sequence up to length n (error if longer)."""
        cur = tokens.shape[0]
        if cur == n:
            return tokens
        if cur > n:
            raise ShapeError(f"token sequence length {cur} exceeds target {n}")
        pad = Tensor.zeros((n - cur, tokens.shape[1]))
        return concat([tokens, pad], axis=0)

    def fuse_lora(self, o_v: Tensor, o_lora: Tensor) -> Tensor:
        """Concat visual and camera tokens, project 2*hidden -> hidden."""
        self._require_weights()
        if "lora.fuse.w" not in self.params:
            raise StateError("lora branch not present in this model")
        if o_v.shape != o_lora.shape:
            raise ShapeError(f"token shapes differ: {o_v.shape} vs {o_lora.shape}")
        cat = concat([o_v, o_lora], axis=-1)
        return matmul(cat, self.params["lora.fuse.w"]) + self.params["lora.fuse.b"]

    # -- forward -----------------------------------------------------------

    def _image_cond_tile(self, z: Tensor, image_cond) -> Tensor:
        """Clean first-frame latent tiled over time (zeros when absent)."""
        t = z.shape[0]
        if image_cond is None:
            return Tensor.zeros(z.shape)
        ca = image_cond.data if isinstance(image_cond, VideoLatent) else image_cond
        ca = ca if isinstance(ca, Tensor) else Tensor(np.asarray(ca, dtype=np.float32))
        if ca.data.ndim != 4 or ca.shape[0] != 1 or ca.shape[1:] != z.shape[1:]:
            raise ShapeError(f"image condition must be (1, h, w, c) matching "
                             f"latent {z.shape}, got {ca.shape}")
        return concat([ca] * t, axis=0)

    def forward(self, z_tau, p, tau: int, y=None, image_cond=None) -> Tensor:
        """Predict the noise component of z_tau given camera path p."""
        self._require_weights()
        c = self.config
        z = z_tau.data if isinstance(z_tau, VideoLatent) else z_tau
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float32))
        if z.data.ndim != 4 or z.shape[-1] != c.latent_channels:
            raise ShapeError(f"latent must be (t, h, w, {c.latent_channels}), "
                             f"got {z.shape}")
        gt, gh, gw = self._latent_grid(z.shape)
        n_v = gt * gh * gw

        cond = self._image_cond_tile(z, image_cond)
        o_v = self._patch_tokens(concat([z, cond], axis=-1))
        temb = nn.timestep_embedding(int(tau), c.hidden)
        tvec = nn.linear(silu(nn.linear(Tensor(temb[None, :]), self.params,
                                        "base.time.w1")),
                         self.params, "base.time.w2")
        o_v = o_v + tvec
        if y is not None:
            ya = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=np.float32))
            if ya.data.ndim != 1 or ya.shape[0] != c.y_dim:
                raise ShapeError(f"y must be ({c.y_dim},), got {ya.shape}")
            o_v = o_v + nn.linear(reshape(ya, (1, c.y_dim)), self.params, "base.cond")

        h_ctrl = None
        if c.use_ctrl:
            o_ctrl = self.match_token_length(self.encode_camera(p, "ctrl"), n_v)
            h_ctrl = o_v + o_ctrl
        h = o_v
        if c.use_lora:
            o_lora = self.match_token_length(self.encode_camera(p, "lora"), n_v)
            h = self.fuse_lora(o_v, o_lora)

        for i in range(c.num_blocks):
            lora_prefix = None
            if c.use_lora and (c.lora_all_blocks or i < c.ctrl_blocks):
                lora_prefix = f"lora.block{i}"
            out = nn.block_forward(h, self.params, f"base.block{i}", c.heads,
                                   lora_prefix=lora_prefix,
                                   lora_params=self.params)
            if h_ctrl is not None and i < c.ctrl_blocks:
                h_ctrl = nn.block_forward(h_ctrl, self.params, f"ctrl.block{i}",
                                          c.heads)
                out = out + nn.linear(h_ctrl, self.params, f"ctrl.zero{i}")
            h = out
            if c.check_finite and not np.all(np.isfinite(h.data)):
                raise NumericError(f"non-finite activations after block {i}")

        hh = layer_norm(h, self.params["base.out.ln.g"],
                        self.params["base.out.ln.b"])
        tok = nn.linear(hh, self.params, "base.out.head")
        x = reshape(tok, (gt, gh, gw, c.patch_t, c.patch_s, c.patch_s,
                          c.latent_channels))
        x = transpose(x, (0, 3, 1, 4, 2, 5, 6))
        out = reshape(x, (gt * c.patch_t, gh * c.patch_s, gw * c.patch_s,
                          c.latent_channels))
        gates = nn.linear(tvec, self.params, "base.skip")
        return out + z * reshape(gates[0, 0], (1, 1, 1, 1)) \
            + cond * reshape(gates[0, 1], (1, 1, 1, 1))

    # -- training / sampling ----------------------------------------------

    def training_step(self, batch: Sequence, schedule: DiffusionSchedule,
                      rng: np.random.Generator) -> float:
        """One epsilon-prediction MSE step; populates parameter grads."""
        self._require_weights()
        if not batch:
            raise ContractError("training batch is empty")
        for t in self.params.values():
            t.grad = None
        with GradTape():
            per_item = []
            for item in batch:
                z, p = item[0], item[1]
                y = item[2] if len(item) > 2 else None
                za = z.data if isinstance(z, VideoLatent) else np.asarray(z)
                za = za.astype(np.float32, copy=False)
                tau = int(rng.integers(schedule.num_steps))
                eps = rng.standard_normal(za.shape).astype(np.float32)
                z_tau = schedule.add_noise(Tensor(za), tau, Tensor(eps))
                cond = Tensor(za[0:1])
                pred = self.forward(z_tau, p, tau, y=y, image_cond=cond)
                diff = pred - Tensor(eps)
                per_item.append(tmean(diff * diff))
            loss = tmean(stack(per_item))
            loss.backward()
        val = float(loss.data)
        if not np.isfinite(val):
            raise NumericError("training loss is not finite")
        return val

    def sample(self, p, shape: tuple, rng: np.random.Generator,
               steps: Optional[int] = None, y=None, image_cond=None,
               schedule: Optional[DiffusionSchedule] = None) -> Tensor:
        """Deterministic DDIM-style sampler from pure noise.

        The step grid starts one index below the pure-noise endpoint, where
        the signal coefficient is still positive, so the clean-estimate
        formula stays well defined.
        """
        self._require_weights()
        if schedule is None:
            schedule = DiffusionSchedule(self.config.schedule_steps)
        n = self.config.sample_steps if steps is None else int(steps)
        if n < 1:
            raise ContractError(f"sample steps must be >= 1, got {n}")
        grid = np.unique(np.round(
            np.linspace(schedule.num_steps - 2, 0, n + 1)).astype(int))[::-1]
        z = Tensor(rng.standard_normal(shape).astype(np.float32))
        for idx in range(grid.size - 1):
            tau, nxt = int(grid[idx]), int(grid[idx + 1])
            a, s = schedule.coeffs(tau)
            eps_hat = self.forward(z, p, tau, y=y, image_cond=image_cond)
            x0 = (z - eps_hat * Tensor(np.float32(s))) * Tensor(np.float32(1.0 / a))
            a2, s2 = schedule.coeffs(nxt)
            z = x0 * Tensor(np.float32(a2)) + eps_hat * Tensor(np.float32(s2))
            if not np.all(np.isfinite(z.data)):
                raise NumericError(f"non-finite sample at step index {tau}")
        return z

    # -- persistence -------------------------------------------------------

    def state_arrays(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def load_state(self, arrays: dict) -> None:
        if self.params:
            want = set(self.params)
            got = set(arrays)
            if want != got:
                missing = sorted(want - got)[:3]
                extra = sorted(got - want)[:3]
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
            self._apply_freeze()


def dit_config_from_dict(d: dict) -> DiTConfig:
    """Build a config from flat string-keyed overrides (parsed config file)."""
    kw = {}
    names = {f.name for f in DiTConfig.__dataclass_fields__.values()}
    for k, v in d.items():
        if k not in names:
            raise ContractError(f"unknown dit config key {k!r}")
        kw[k] = v
    return DiTConfig(**kw)
