"""Camera poses, Plücker ray embeddings, trajectory normalization, and
pose-error metrics.

Conventions: R maps camera coordinates to world coordinates
(world-from-camera) and t is the camera center expressed in world units,
so a camera-frame point x_c sits at R x_c + t in the world. Pixel u runs
along columns (x right), v along rows (y down), and +z looks forward.
Pose arithmetic runs in float64; only the embedding tensor handed to the
networks is float32.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import ContractError, FormatError, ShapeError
from .numerics import Tensor

_ORTHO_TOL = 1e-5


def intrinsics(fx: float, fy: float, cx: float, cy: float) -> np.ndarray:
    return np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class CameraPose:
    """World-from-camera rotation R, camera center t, intrinsics K."""

    R: np.ndarray
    t: np.ndarray
    K: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))
        object.__setattr__(self, "K", np.asarray(self.K, dtype=np.float64).reshape(3, 3))
        err = np.abs(self.R.T @ self.R - np.eye(3)).max()
        if err > _ORTHO_TOL:
            raise ContractError(f"R is not orthonormal (max deviation {err:.2e})")
        det = np.linalg.det(self.R)
        if abs(det - 1.0) > _ORTHO_TOL:
            raise ContractError(f"R must have determinant +1, got {det:.6f}")
        K = self.K
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0 or K[2, 2] != 1.0:
            raise ContractError("K must be upper-triangular with K[2,2] = 1")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ContractError(f"fx, fy must be positive, got {K[0, 0]}, {K[1, 1]}")

    @property
    def fx(self) -> float: return float(self.K[0, 0])
    @property
    def fy(self) -> float: return float(self.K[1, 1])
    @property
    def cx(self) -> float: return float(self.K[0, 2])
    @property
    def cy(self) -> float: return float(self.K[1, 2])

    def with_intrinsics(self, K: np.ndarray) -> "CameraPose":
        return CameraPose(self.R, self.t, K)

    def scaled_to(self, height_from: int, width_from: int,
                  height_to: int, width_to: int) -> "CameraPose":
        """Rescale K for rendering the same view at a different raster size."""
        sy = height_to / height_from
        sx = width_to / width_from
        K = self.K.copy()
        K[0, 0] *= sx
        K[0, 2] *= sx
        K[1, 1] *= sy
        K[1, 2] *= sy
        return CameraPose(self.R, self.t, K)


@dataclass
class Trajectory:
    """Ordered camera poses, one per frame."""

    poses: list = field(default_factory=list)

    def __post_init__(self):
        self.poses = list(self.poses)
        if not self.poses:
            raise ContractError("trajectory must contain at least one pose")

    def __len__(self) -> int: return len(self.poses)
    def __getitem__(self, i) -> CameraPose: return self.poses[i]
    def __iter__(self) -> Iterator[CameraPose]: return iter(self.poses)

    def check_shared_intrinsics(self) -> None:
        K0 = self.poses[0].K
        for i, p in enumerate(self.poses[1:], start=1):
            if not np.array_equal(p.K, K0):
                raise ContractError(f"pose {i} intrinsics differ from pose 0; "
                                    "mark the trajectory as varying-K explicitly")


@dataclass
class PluckerEmbedding:
    """Per-pixel (moment, unit direction) tensor of shape T×H×W×6."""

    data: Tensor

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[-1] != 6:
            raise ShapeError(f"Plücker embedding must be T×H×W×6, got {self.data.shape}")

    @property
    def shape(self) -> tuple: return self.data.shape


def ray_direction(pose: CameraPose, u: float, v: float,
                  include_translation: bool = True) -> np.ndarray:
    """Unnormalized ray quantity d = R K⁻¹ [u, v, 1]ᵀ (+ t).

    With the translation term d is a world point on the pixel ray rather
    than a pure direction; both callers exist, so the term is a flag.
    """
    try:
        kinv = np.linalg.inv(pose.K)
    except np.linalg.LinAlgError:
        raise ContractError("intrinsics matrix is singular") from None
    d = pose.R @ (kinv @ np.array([u, v, 1.0], dtype=np.float64))
    if include_translation:
        d = d + pose.t
    return d


def plucker_pixel(pose: CameraPose, u: float, v: float,
                  include_translation: bool = True) -> np.ndarray:
    """Plücker 6-vector (t × d′, d′) for the exact coordinates given."""
    d = ray_direction(pose, u, v, include_translation)
    n = np.linalg.norm(d)
    if n < 1e-12:
        raise ContractError(f"degenerate ray at (u={u}, v={v}): zero direction")
    dp = d / n
    m = np.cross(pose.t, dp)
    return np.concatenate([m, dp])


def plucker_embed(traj: Trajectory, height: int, width: int,
                  pixel_centers: bool = True,
                  include_translation: bool = True) -> PluckerEmbedding:
    """Plücker 6-vectors for every (frame, row, col) sample point.

    Coordinates are pixel centers (u+0.5, v+0.5) by default; pass
    ``pixel_centers=False`` for integer-corner sampling.
    """
    if height < 1 or width < 1:
        raise ContractError(f"raster must be at least 1x1, got {height}x{width}")
    off = 0.5 if pixel_centers else 0.0
    us = np.arange(width, dtype=np.float64) + off
    vs = np.arange(height, dtype=np.float64) + off
    out = np.empty((len(traj), height, width, 6), dtype=np.float32)
    for f, pose in enumerate(traj):
        try:
            dirs = ray_grid(pose, vs, us, include_translation)
        except ContractError as e:
            raise ContractError(f"frame {f}: {e}") from None
        n = np.linalg.norm(dirs, axis=-1)
        if n.min() < 1e-12:
            vi, ui = np.unravel_index(int(n.argmin()), n.shape)
            raise ContractError(
                f"degenerate ray at frame {f}, pixel (v={vi}, u={ui})")
        dp = dirs / n[..., None]
        m = np.cross(np.broadcast_to(pose.t, dp.shape), dp)
        out[f, ..., :3] = m
        out[f, ..., 3:] = dp
    return PluckerEmbedding(Tensor(out))


def ray_grid(pose: CameraPose, vs: np.ndarray, us: np.ndarray,
             include_translation: bool = False) -> np.ndarray:
    """Rays for a full sample grid, shape (len(vs), len(us), 3), float64."""
    try:
        kinv = np.linalg.inv(pose.K)
    except np.linalg.LinAlgError:
        raise ContractError("intrinsics matrix is singular") from None
    rk = pose.R @ kinv
    dirs = (rk[:, 0][None, None, :] * us[None, :, None]
            + rk[:, 1][None, None, :] * vs[:, None, None]
            + rk[:, 2][None, None, :])
    if include_translation:
        dirs = dirs + pose.t
    return dirs


def normalize_trajectory(traj: Trajectory) -> Trajectory:
    """Express all poses relative to frame 0, then divide translations by
    the maximum translation norm.

    The output's first pose is constructed as exactly (I, 0), and a scale
    already within one part in 1e6 of unity is snapped to 1, so
    already-normalized trajectories are a fixed point bit for bit.
    """
    p0 = traj[0]
    R0T = p0.R.T
    rel = [(R0T @ p.R, R0T @ (p.t - p0.t)) for p in traj]
    s = max(np.linalg.norm(t) for _, t in rel)
    if s < 1e-8 or abs(s - 1.0) < 1e-6:
        s = 1.0
    poses = [CameraPose(np.eye(3), np.zeros(3), p0.K)]
    for (R, t), orig in zip(rel[1:], traj[1:]):
        poses.append(CameraPose(R, t / s, orig.K))
    return Trajectory(poses)


def pose_errors(a: Trajectory, b: Trajectory) -> tuple:
    """(mean geodesic rotation angle in radians, mean translation distance).

    Callers are expected to pass trajectories through
    :func:`normalize_trajectory` first so the translation term is
    scale-free.
    """
    if len(a) != len(b):
        raise ContractError(f"trajectory lengths differ: {len(a)} vs {len(b)}")
    r_sum = 0.0
    t_sum = 0.0
    for pa, pb in zip(a, b):
        c = (np.trace(pa.R.T @ pb.R) - 1.0) * 0.5
        r_sum += float(np.arccos(np.clip(c, -1.0, 1.0)))
        t_sum += float(np.linalg.norm(pa.t - pb.t))
    n = len(a)
    return (r_sum / n, t_sum / n)


def look_at(eye, target, up=(0.0, 0.0, 1.0), K=None) -> CameraPose:
    """Pose at ``eye`` looking toward ``target``; +z forward, +y down."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    fwd = target - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ContractError("look_at target coincides with eye")
    fwd = fwd / n
    right = np.cross(fwd, up)
    rn = np.linalg.norm(right)
    if rn < 1e-9:
        # forward parallel to up: pick any perpendicular right vector
        alt = np.array([1.0, 0.0, 0.0]) if abs(fwd[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, alt)
        rn = np.linalg.norm(right)
    right = right / rn
    down = np.cross(fwd, right)
    # columns (right, down, forward): right-handed by construction, det +1
    R = np.stack([right, down, fwd], axis=1)
    if K is None:
        K = intrinsics(1.0, 1.0, 0.0, 0.0)
    return CameraPose(R, eye, K)


def rotation_about_axis(axis, theta: float) -> np.ndarray:
    """Rodrigues rotation matrix, used for jitter and test poses."""
    a = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(a)
    if n < 1e-12:
        raise ContractError("rotation axis must be nonzero")
    x, y, z = a / n
    c, s = np.cos(theta), np.sin(theta)
    C = 1.0 - c
    return np.array([
        [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
        [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
        [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
    ])


# -- trajectory file format --------------------------------------------------
# One frame per line:
#   f fx fy cx cy r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz
# '#' starts a comment line. Frames must cover 0..T-1 exactly.

def save_trajectory(traj: Trajectory, path) -> None:
    lines = ["# f fx fy cx cy r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz"]
    for f, p in enumerate(traj):
        vals = [p.fx, p.fy, p.cx, p.cy, *p.R.reshape(-1).tolist(), *p.t.tolist()]
        lines.append(str(f) + " " + " ".join(f"{v:.17g}" for v in vals))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_trajectory(path) -> Trajectory:
    entries = {}
    with open(path, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 17:
                raise FormatError(f"{path}:{lineno}: expected 17 fields, got {len(parts)}")
            try:
                f = int(parts[0])
                vals = [float(x) for x in parts[1:]]
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from None
            if f in entries:
                raise FormatError(f"{path}:{lineno}: duplicate frame index {f}")
            fx, fy, cx, cy = vals[0:4]
            R = np.array(vals[4:13], dtype=np.float64).reshape(3, 3)
            t = np.array(vals[13:16], dtype=np.float64)
            try:
                entries[f] = CameraPose(R, t, intrinsics(fx, fy, cx, cy))
            except ContractError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from None
    if not entries:
        raise FormatError(f"{path}: no frames found")
    T = len(entries)
    if sorted(entries) != list(range(T)):
        raise FormatError(f"{path}: frame indices must cover 0..{T - 1} exactly")
    return Trajectory([entries[f] for f in range(T)])
