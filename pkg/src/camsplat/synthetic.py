"""Procedural synthetic scenes: seeded Gaussian clutter plus smooth orbits.

A scene is a ground slab, a handful of colored blob clusters, and a
distant backdrop shell, viewed by a camera sliding along a spline
through jittered orbit waypoints while looking at the scene center.
Everything derives from one integer seed, so renders are reproducible
bit for bit.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import CameraPose, Trajectory, intrinsics, look_at, load_trajectory, save_trajectory
from .codec import Video
from .errors import ContractError, FormatError
from .gaussians import GaussianCloud, load_splat, quat_from_axis_angle, save_splat
from .gsplat import RenderSettings, load_png, rasterize, save_png

COMPLEXITIES = ("small", "medium")

# backdrop-dominated sky tone; visible only through shell gaps
_BACKGROUND = (0.62, 0.70, 0.80)


@dataclass
class SyntheticScene:
    cloud: GaussianCloud
    trajectory: Trajectory
    video: Video
    seed: int

    @property
    def num_frames(self) -> int:
        return self.video.num_frames


def _unit(v):
    return v / np.linalg.norm(v)


def _random_quats(rng, n: int) -> np.ndarray:
    out = np.empty((n, 4), dtype=np.float64)
    for i in range(n):
        axis = _unit(rng.normal(size=3))
        out[i] = quat_from_axis_angle(axis, rng.uniform(0.0, np.pi))
    return out


def _ground(rng, n: int):
    xy = rng.uniform(-2.2, 2.2, size=(n, 2))
    z = rng.normal(0.0, 0.015, size=(n, 1))
    pos = np.concatenate([xy, z], axis=1)
    sc = np.column_stack([rng.uniform(0.18, 0.42, n),
                          rng.uniform(0.18, 0.42, n),
                          rng.uniform(0.02, 0.05, n)])
    base = np.array([0.38, 0.42, 0.30])
    col = np.clip(base + rng.normal(0.0, 0.08, size=(n, 3)), 0.05, 0.95)
    op = rng.uniform(0.65, 0.9, n)
    quats = np.empty((n, 4))
    for i in range(n):  # flat pancakes only yaw, stay ground-aligned
        quats[i] = quat_from_axis_angle((0.0, 0.0, 1.0), rng.uniform(0.0, np.pi))
    return pos, sc, quats, col, op


def _blobs(rng, clusters: int, per_lo: int, per_hi: int):
    pos, sc, qu, col, op = [], [], [], [], []
    palette = rng.uniform(0.15, 0.95, size=(clusters, 3))
    for c in range(clusters):
        center = np.array([rng.uniform(-1.1, 1.1), rng.uniform(-1.1, 1.1),
                           rng.uniform(0.15, 1.0)])
        k = int(rng.integers(per_lo, per_hi + 1))
        pos.append(center + rng.normal(0.0, 0.13, size=(k, 3)))
        s = rng.uniform(0.05, 0.16, size=(k, 3))
        sc.append(s)
        qu.append(_random_quats(rng, k))
        col.append(np.clip(palette[c] + rng.normal(0.0, 0.06, size=(k, 3)), 0.02, 0.98))
        op.append(rng.uniform(0.7, 0.95, k))
    return (np.concatenate(pos), np.concatenate(sc), np.concatenate(qu),
            np.concatenate(col), np.concatenate(op))


def _backdrop(rng, n: int):
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    radius = rng.uniform(5.5, 6.5, n)
    z = rng.uniform(0.0, 3.2, n)
    pos = np.column_stack([radius * np.cos(theta), radius * np.sin(theta), z])
    sc = np.column_stack([rng.uniform(0.5, 1.0, n),
                          rng.uniform(0.5, 1.0, n),
                          rng.uniform(0.5, 1.0, n)])
    base = np.array([0.55, 0.58, 0.66])
    col = np.clip(base + rng.normal(0.0, 0.1, size=(n, 3)), 0.1, 0.95)
    op = rng.uniform(0.5, 0.8, n)
    return pos, sc, _random_quats(rng, n), col, op


def _catmull_rom(points: np.ndarray, n_samples: int) -> np.ndarray:
    """Interpolating spline through the waypoints (endpoints clamped)."""
    p = np.concatenate([points[:1], points, points[-1:]], axis=0)
    segs = len(points) - 1
    ts = np.linspace(0.0, segs, n_samples)
    out = np.empty((n_samples, points.shape[1]), dtype=np.float64)
    for i, t in enumerate(ts):
        seg = min(int(t), segs - 1)
        u = t - seg
        p0, p1, p2, p3 = p[seg], p[seg + 1], p[seg + 2], p[seg + 3]
        out[i] = (0.5 * ((2 * p1) + (-p0 + p2) * u
                         + (2 * p0 - 5 * p1 + 4 * p2 - p3) * u * u
                         + (-p0 + 3 * p1 - 3 * p2 + p3) * u * u * u))
    return out


def _orbit_trajectory(rng, num_frames: int, height: int, width: int) -> Trajectory:
    K = intrinsics(1.1 * width, 1.1 * width, width / 2.0, height / 2.0)
    n_way = 6
    arc = rng.uniform(0.45, 0.75) * 2.0 * np.pi
    start = rng.uniform(0.0, 2.0 * np.pi)
    angles = start + np.linspace(0.0, arc, n_way) + rng.normal(0.0, 0.05, n_way)
    radii = rng.uniform(2.6, 3.2) + rng.normal(0.0, 0.08, n_way)
    heights = rng.uniform(0.7, 1.5) + rng.normal(0.0, 0.1, n_way)
    way = np.column_stack([radii * np.cos(angles), radii * np.sin(angles), heights])
    eyes = _catmull_rom(way, num_frames)
    target = np.array([rng.normal(0.0, 0.1), rng.normal(0.0, 0.1),
                       rng.uniform(0.3, 0.6)])
    poses = [look_at(eye, target, up=(0.0, 0.0, 1.0), K=K) for eye in eyes]
    return Trajectory(poses)


def generate_scene(seed: int, complexity: str = "small", num_frames: int = 20,
                   height: int = 48, width: int = 72) -> SyntheticScene:
    """Build cloud + trajectory from the seed and render every frame."""
    if complexity not in COMPLEXITIES:
        raise ContractError(f"complexity must be one of {COMPLEXITIES}, got {complexity!r}")
    rng = np.random.default_rng(seed)
    if complexity == "small":
        parts = [_ground(rng, 26), _blobs(rng, 4, 5, 10), _backdrop(rng, 22)]
    else:
        parts = [_ground(rng, 70), _blobs(rng, 10, 8, 16), _backdrop(rng, 56)]
    pos = np.concatenate([p[0] for p in parts])
    sc = np.concatenate([p[1] for p in parts])
    qu = np.concatenate([p[2] for p in parts])
    col = np.concatenate([p[3] for p in parts])
    op = np.concatenate([p[4] for p in parts])
    cloud = GaussianCloud(pos, sc, qu, col, op)
    cloud.validate()

    traj = _orbit_trajectory(rng, num_frames, height, width)
    video = render_video(cloud, traj, height, width)
    return SyntheticScene(cloud, traj, video, seed)


def render_video(cloud: GaussianCloud, traj: Trajectory,
                 height: int, width: int) -> Video:
    settings = RenderSettings(height, width, background=_BACKGROUND,
                              near=0.05, far=50.0, alpha_cutoff=1e-4)
    frames = [rasterize(cloud, pose, settings).color.data for pose in traj]
    data = np.clip(np.stack(frames), 0.0, 1.0)
    return Video(data)


# -- scene directories -------------------------------------------------------

_FRAME_RE = re.compile(r"frame_(\d{5})\.png$")


def save_scene(scene: SyntheticScene, path) -> None:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    save_trajectory(scene.trajectory, d / "trajectory.txt")
    save_splat(scene.cloud, d / "cloud.wlnd")
    for f in range(scene.num_frames):
        save_png(scene.video.data.data[f], d / f"frame_{f:05d}.png")
    (d / "meta.txt").write_text(f"seed = {scene.seed}\n", encoding="utf-8")


def load_scene(path) -> SyntheticScene:
    d = Path(path)
    if not d.is_dir():
        raise FileNotFoundError(f"scene directory not found: {d}")
    traj = load_trajectory(d / "trajectory.txt")
    cloud = load_splat(d / "cloud.wlnd")
    frames = sorted(p for p in d.iterdir() if _FRAME_RE.search(p.name))
    if not frames:
        raise FormatError(f"no frame_*.png files in {d}")
    video = Video(np.stack([load_png(p) for p in frames]))
    if video.num_frames != len(traj):
        raise ContractError(f"{d}: {video.num_frames} frames but "
                            f"{len(traj)} trajectory poses")
    seed = 0
    meta = d / "meta.txt"
    if meta.exists():
        for line in meta.read_text(encoding="utf-8").splitlines():
            if line.startswith("seed"):
                seed = int(line.split("=")[1])
    return SyntheticScene(cloud, traj, video, seed)
