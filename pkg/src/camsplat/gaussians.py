"""Gaussian cloud container, quaternion helpers, and the WLND splat file.

Quaternions are stored (w, x, y, z). The binary splat format is
little-endian: magic ``WLND``, u32 version, u64 count, then contiguous
float32 arrays in field order positions, scales, quaternions, colors,
opacities.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError, ShapeError
from .numerics import Tensor

SPLAT_MAGIC = b"WLND"
SPLAT_VERSION = 1


@dataclass
class GaussianCloud:
    """Per-Gaussian attributes; all tensors share the leading count axis."""

    positions: Tensor   # (N, 3) world units
    scales: Tensor      # (N, 3) positive
    rotations: Tensor   # (N, 4) unit quaternions (w, x, y, z)
    colors: Tensor      # (N, 3) in [0, 1]
    opacities: Tensor   # (N,) in [0, 1]

    def __post_init__(self):
        for name in ("positions", "scales", "rotations", "colors", "opacities"):
            v = getattr(self, name)
            if not isinstance(v, Tensor):
                setattr(self, name, Tensor(v))
        n = self.positions.shape[0]
        expect = {"positions": (n, 3), "scales": (n, 3), "rotations": (n, 4),
                  "colors": (n, 3), "opacities": (n,)}
        for name, shp in expect.items():
            got = getattr(self, name).shape
            if got != shp:
                raise ShapeError(f"cloud field {name} must have shape {shp}, got {got}")

    def __len__(self) -> int:
        return self.positions.shape[0]

    def validate(self) -> None:
        """Check the value invariants (unit quats, positive scales, ranges)."""
        if len(self) == 0:
            return
        qn = np.linalg.norm(self.rotations.data, axis=1)
        worst = float(np.abs(qn - 1.0).max())
        if worst > 1e-5:
            raise ContractError(f"quaternions must be unit norm, worst deviation {worst:.2e}")
        smin = float(self.scales.data.min())
        if smin <= 0.0:
            raise ContractError(f"scales must be positive, min {smin:.3e}")
        if float(self.colors.data.min()) < 0.0 or float(self.colors.data.max()) > 1.0:
            raise ContractError("colors must lie in [0, 1]")
        if float(self.opacities.data.min()) < 0.0 or float(self.opacities.data.max()) > 1.0:
            raise ContractError("opacities must lie in [0, 1]")

    def detached(self) -> "GaussianCloud":
        return GaussianCloud(Tensor(self.positions.data.copy()),
                             Tensor(self.scales.data.copy()),
                             Tensor(self.rotations.data.copy()),
                             Tensor(self.colors.data.copy()),
                             Tensor(self.opacities.data.copy()))


def concat_clouds(clouds: list) -> GaussianCloud:
    if not clouds:
        raise ContractError("concat_clouds needs at least one cloud")
    return GaussianCloud(
        np.concatenate([c.positions.data for c in clouds]),
        np.concatenate([c.scales.data for c in clouds]),
        np.concatenate([c.rotations.data for c in clouds]),
        np.concatenate([c.colors.data for c in clouds]),
        np.concatenate([c.opacities.data for c in clouds]),
    )


# -- quaternion helpers ------------------------------------------------------

def quat_from_axis_angle(axis, theta: float) -> np.ndarray:
    a = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(a)
    if n < 1e-12:
        raise ContractError("quaternion axis must be nonzero")
    half = 0.5 * theta
    return np.concatenate([[np.cos(half)], np.sin(half) * a / n])


def quat_multiply(q1, q2) -> np.ndarray:
    w1, x1, y1, z1 = np.asarray(q1, dtype=np.float64)
    w2, x2, y2, z2 = np.asarray(q2, dtype=np.float64)
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64)
    n = np.sqrt(w * w + x * x + y * y + z * z)
    if n < 1e-12:
        raise ContractError("cannot rotate by a zero quaternion")
    w, x, y, z = w / n, x / n, y / n, z / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R) -> np.ndarray:
    """Inverse of quat_to_matrix, w kept non-negative."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(1e-12, 1.0 + R[i, i] - R[j, j] - R[k, k])) * 2
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def rigid_transform_cloud(cloud: GaussianCloud, Q: np.ndarray, b: np.ndarray) -> GaussianCloud:
    """Apply x -> Qx + b to positions and rotate orientations accordingly."""
    Q = np.asarray(Q, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    qQ = matrix_to_quat(Q)
    new_pos = cloud.positions.data.astype(np.float64) @ Q.T + b
    new_rot = np.stack([quat_multiply(qQ, q) for q in cloud.rotations.data], axis=0)
    return GaussianCloud(new_pos.astype(np.float32),
                         cloud.scales.data.copy(),
                         new_rot.astype(np.float32),
                         cloud.colors.data.copy(),
                         cloud.opacities.data.copy())


# -- WLND splat file ---------------------------------------------------------

def save_splat(cloud: GaussianCloud, path) -> None:
    n = len(cloud)
    with open(path, "wb") as fh:
        fh.write(SPLAT_MAGIC)
        fh.write(struct.pack("<IQ", SPLAT_VERSION, n))
        for field in (cloud.positions, cloud.scales, cloud.rotations,
                      cloud.colors, cloud.opacities):
            fh.write(np.ascontiguousarray(field.data, dtype="<f4").tobytes())


def load_splat(path) -> GaussianCloud:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SPLAT_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {SPLAT_MAGIC!r}")
        head = fh.read(12)
        if len(head) != 12:
            raise FormatError(f"{path}: truncated header")
        version, n = struct.unpack("<IQ", head)
        if version != SPLAT_VERSION:
            raise FormatError(f"{path}: unsupported splat version {version}")
        counts = {"positions": 3 * n, "scales": 3 * n, "rotations": 4 * n,
                  "colors": 3 * n, "opacities": n}
        arrays = {}
        for name, cnt in counts.items():
            buf = fh.read(4 * cnt)
            if len(buf) != 4 * cnt:
                raise FormatError(f"{path}: truncated {name} array")
            arrays[name] = np.frombuffer(buf, dtype="<f4").astype(np.float32)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after payload")
    return GaussianCloud(arrays["positions"].reshape(n, 3),
                         arrays["scales"].reshape(n, 3),
                         arrays["rotations"].reshape(n, 4),
                         arrays["colors"].reshape(n, 3),
                         arrays["opacities"].reshape(n))
