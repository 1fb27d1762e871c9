"""Differentiable 3D Gaussian splatting rasterizer.

Two passes per render. A gradient-free structure pass (float64 numpy)
projects every Gaussian, culls against the frustum, builds the
(gaussian, pixel) pair list from per-Gaussian bounding boxes, and sorts
pairs by pixel then depth. A value pass then recomputes projection and
compositing with engine ops over those fixed pair indices, so gradients
reach every attribute while sorting and culling stay out of the tape.

Compositing follows front-to-back alpha blending: per pixel, sorted by
camera depth ascending, C = sum_i c_i a_i prod_{j<i} (1 - a_j) plus the
background times the final transmittance, with a_i clamped to 0.999.
Everything is evaluated serially in one fixed order, so repeated renders
are bit-identical.

The bounding-box radius is derived from the alpha cutoff (at least 3
sigma): pixels outside it would contribute less than the cutoff, and the
same threshold drops low-alpha pairs, so the truncation boundary is a
value rule rather than a box-rounding knife edge.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .camera import CameraPose
from .errors import ContractError, NumericError, ShapeError
from .gaussians import GaussianCloud
from .numerics import (Tensor, clamp, concat, exp, finite_diff_grad, gather0,
                       log1p, matmul, max_rel_error, mul, reshape, scatter_rows,
                       segment_cumsum_excl, segment_sum, sqrt, stack, transpose,
                       tsum, GradTape, make_rng)

DILATION = 0.3          # screen-space isotropic covariance floor, px^2
ALPHA_MAX = 0.999


@dataclass
class RenderSettings:
    height: int
    width: int
    background: tuple = (0.0, 0.0, 0.0)
    near: float = 0.1
    far: float = 100.0
    alpha_cutoff: float = 1e-5

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ContractError(f"raster must be at least 1x1, got {self.height}x{self.width}")
        if not (self.near < self.far):
            raise ContractError(f"need near < far, got {self.near} >= {self.far}")
        if not (0.0 <= self.alpha_cutoff < 1.0):
            raise ContractError(f"alpha cutoff must be in [0, 1), got {self.alpha_cutoff}")
        bg = np.asarray(self.background, dtype=np.float32).reshape(3)
        if bg.min() < 0.0 or bg.max() > 1.0:
            raise ContractError("background color must lie in [0, 1]")
        self.background = tuple(float(v) for v in bg)


@dataclass
class RenderedImage:
    color: Tensor   # (H, W, 3) in [0, 1]
    alpha: Tensor   # (H, W) accumulated opacity in [0, 1]


def covariance_from(scale, quat) -> np.ndarray:
    """Sigma = R(q) diag(s^2) R(q)^T for one Gaussian, float64 reference."""
    s = np.asarray(scale, dtype=np.float64).reshape(3)
    q = np.asarray(quat, dtype=np.float64).reshape(4)
    if s.min() <= 0:
        raise ContractError(f"scales must be positive, got {s}")
    n = np.linalg.norm(q)
    if abs(n - 1.0) > 1e-3:
        raise ContractError(f"quaternion norm {n:.5f} deviates from 1 beyond 1e-3")
    from .gaussians import quat_to_matrix
    R = quat_to_matrix(q)
    return R @ np.diag(s * s) @ R.T


def project(position, scale, quat, pose: CameraPose, dilation: float = DILATION,
            near: float = 0.1, far: float = 100.0):
    """EWA perspective projection of one Gaussian.

    Returns (mean2d, cov2d, depth) or None when the center falls outside
    the depth range (culled, not an error).
    """
    p = np.asarray(position, dtype=np.float64).reshape(3)
    cam = pose.R.T @ (p - pose.t)
    z = cam[2]
    if not (near < z < far):
        return None
    fx, fy, cx, cy = pose.fx, pose.fy, pose.cx, pose.cy
    mean2d = np.array([fx * cam[0] / z + cx, fy * cam[1] / z + cy])
    cov3 = covariance_from(scale, quat)
    cov_cam = pose.R.T @ cov3 @ pose.R
    J = np.array([[fx / z, 0.0, -fx * cam[0] / (z * z)],
                  [0.0, fy / z, -fy * cam[1] / (z * z)]])
    cov2d = J @ cov_cam @ J.T + dilation * np.eye(2)
    return mean2d, cov2d, z


def _quat_rot_tensor(q: Tensor) -> Tensor:
    """Batched rotation matrices (M,3,3) from raw quaternions, normalized
    inside so gradients include the normalization."""
    nrm = sqrt(tsum(q * q, axis=1, keepdims=True))
    qn = q / nrm
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    one = Tensor(np.ones(q.shape[0], dtype=np.float32))
    two = Tensor(np.float32(2.0))
    entries = [
        one - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y),
        two * (x * y + w * z), one - two * (x * x + z * z), two * (y * z - w * x),
        two * (x * z - w * y), two * (y * z + w * x), one - two * (x * x + y * y),
    ]
    m = stack(entries, axis=0)                 # (9, M)
    return reshape(transpose(m, (1, 0)), (q.shape[0], 3, 3))


def _np_cov2d(pose: CameraPose, scales, quats, cam, dil):
    """Structure-pass 2D covariances (float32), mirroring the value pass."""
    f4 = np.float32
    q = quats.astype(f4)
    q = q / np.linalg.norm(q, axis=1, keepdims=True).astype(f4)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((len(q), 3, 3), dtype=f4)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z); R[:, 0, 1] = 2 * (x * y - w * z); R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z); R[:, 1, 1] = 1 - 2 * (x * x + z * z); R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y); R[:, 2, 1] = 2 * (y * z + w * x); R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    covw = (R * (scales.astype(f4) ** 2)[:, None, :]) @ np.swapaxes(R, 1, 2)
    covc = pose.R.T.astype(f4)[None] @ covw @ pose.R.astype(f4)[None]
    fx, fy = f4(pose.fx), f4(pose.fy)
    zc = cam[:, 2].astype(f4)
    xc = cam[:, 0].astype(f4)
    yc = cam[:, 1].astype(f4)
    J = np.zeros((len(q), 2, 3), dtype=f4)
    J[:, 0, 0] = fx / zc
    J[:, 0, 2] = -fx * xc / (zc * zc)
    J[:, 1, 1] = fy / zc
    J[:, 1, 2] = -fy * yc / (zc * zc)
    cov2 = (J @ covc @ np.swapaxes(J, 1, 2)).astype(np.float64)
    cov2[:, 0, 0] += dil
    cov2[:, 1, 1] += dil
    return cov2


def _background_image(settings: RenderSettings) -> RenderedImage:
    bg = np.asarray(settings.background, dtype=np.float32)
    color = np.broadcast_to(bg, (settings.height, settings.width, 3)).copy()
    alpha = np.zeros((settings.height, settings.width), dtype=np.float32)
    return RenderedImage(Tensor(color), Tensor(alpha))


def rasterize(cloud: GaussianCloud, pose: CameraPose,
              settings: RenderSettings) -> RenderedImage:
    """Render the cloud; differentiable w.r.t. every cloud attribute."""
    H, W = settings.height, settings.width
    N = len(cloud)
    if N == 0:
        return _background_image(settings)
    for name in ("positions", "scales", "rotations", "colors", "opacities"):
        if not np.all(np.isfinite(getattr(cloud, name).data)):
            raise NumericError(f"non-finite values in cloud {name}")

    # ---- structure pass: cull, pair building, ordering (no gradients) ----
    pos = cloud.positions.data.astype(np.float64)
    cam = (pos - pose.t) @ pose.R    # rows are R^T (p - t)
    zc = cam[:, 2]
    valid = (zc > settings.near) & (zc < settings.far)
    if not valid.any():
        return _background_image(settings)

    fx, fy, cx, cy = pose.fx, pose.fy, pose.cx, pose.cy
    with np.errstate(divide="ignore", invalid="ignore"):
        u = fx * cam[:, 0] / zc + cx
        v = fy * cam[:, 1] / zc + cy

    dil = np.full(N, DILATION)
    cov2 = _np_cov2d(pose, cloud.scales.data, cloud.rotations.data, cam, DILATION)
    det = cov2[:, 0, 0] * cov2[:, 1, 1] - cov2[:, 0, 1] ** 2
    bad = valid & (det < 1e-12)
    if bad.any():
        # retry with doubled dilation once, then drop what remains
        dil[bad] = 2.0 * DILATION
        cov2[bad, 0, 0] += DILATION
        cov2[bad, 1, 1] += DILATION
        det = cov2[:, 0, 0] * cov2[:, 1, 1] - cov2[:, 0, 1] ** 2
        valid &= det > 1e-12

    op = cloud.opacities.data.astype(np.float64)
    cutoff = settings.alpha_cutoff
    if cutoff > 0.0:
        valid &= op >= cutoff
        with np.errstate(divide="ignore", invalid="ignore"):
            rs2 = 2.0 * np.log(np.maximum(op, 1e-300) / cutoff)
        rsig = np.sqrt(np.maximum(9.0, rs2))
    else:
        valid &= op > 0.0
        rsig = np.full(N, 3.0)

    lam_max = 0.5 * (cov2[:, 0, 0] + cov2[:, 1, 1]) + np.sqrt(
        np.maximum(0.0, 0.25 * (cov2[:, 0, 0] - cov2[:, 1, 1]) ** 2 + cov2[:, 0, 1] ** 2))
    radius = rsig * np.sqrt(np.maximum(lam_max, 0.0))

    # pixel j's center j+0.5 lies within [u - r, u + r]
    x0 = np.ceil(u - radius - 0.5).astype(np.int64)
    x1 = np.floor(u + radius - 0.5).astype(np.int64)
    y0 = np.ceil(v - radius - 0.5).astype(np.int64)
    y1 = np.floor(v + radius - 0.5).astype(np.int64)
    np.clip(x0, 0, W - 1, out=x0); np.clip(x1, -1, W - 1, out=x1)
    np.clip(y0, 0, H - 1, out=y0); np.clip(y1, -1, H - 1, out=y1)
    with np.errstate(invalid="ignore"):
        nonempty = (x1 >= x0) & (y1 >= y0) & np.isfinite(u) & np.isfinite(v)
    valid &= nonempty
    kept = np.flatnonzero(valid)
    if kept.size == 0:
        return _background_image(settings)

    kx0, kx1 = x0[kept], x1[kept]
    ky0, ky1 = y0[kept], y1[kept]
    counts = (kx1 - kx0 + 1) * (ky1 - ky0 + 1)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    P = int(counts.sum())
    gidx = np.repeat(np.arange(kept.size), counts)
    off = np.arange(P, dtype=np.int64) - starts[gidx]
    wbox = (kx1 - kx0 + 1)[gidx]
    px = kx0[gidx] + off % wbox
    py = ky0[gidx] + off // wbox

    # value prefilter in float32 so the keep decision mirrors the engine
    # pass; any flip at the threshold changes the image by < cutoff
    a2 = cov2[kept][:, 0, 0]; b2 = cov2[kept][:, 0, 1]; c2 = cov2[kept][:, 1, 1]
    detk = det[kept]
    Ak = (c2 / detk).astype(np.float32)
    Bk = (-b2 / detk).astype(np.float32)
    Ck = (a2 / detk).astype(np.float32)
    uk = u[kept].astype(np.float32)
    vk = v[kept].astype(np.float32)
    opk = op[kept].astype(np.float32)
    dxp = (px.astype(np.float32) + np.float32(0.5)) - uk[gidx]
    dyp = (py.astype(np.float32) + np.float32(0.5)) - vk[gidx]
    qv = np.float32(0.5) * (Ak[gidx] * dxp * dxp + np.float32(2.0) * Bk[gidx] * dxp * dyp
                            + Ck[gidx] * dyp * dyp)
    a_pair = np.minimum(opk[gidx] * np.exp(-qv), np.float32(ALPHA_MAX))
    keep_pair = a_pair >= cutoff if cutoff > 0 else a_pair > 0
    if not keep_pair.any():
        return _background_image(settings)
    gidx = gidx[keep_pair]
    px = px[keep_pair]
    py = py[keep_pair]
    P = gidx.size

    # depth order with input-index tie break, then group by pixel; one
    # combined integer key keeps the sort cheap
    order = np.lexsort((kept, zc[kept]))
    rank = np.empty(kept.size, dtype=np.int64)
    rank[order] = np.arange(kept.size)
    pix = py * W + px
    perm = np.argsort(pix * np.int64(kept.size) + rank[gidx])
    gidx = gidx[perm]
    pix = pix[perm]
    px = px[perm]
    py = py[perm]
    seg_starts = np.flatnonzero(np.concatenate(([True], pix[1:] != pix[:-1])))
    uniq_pix = pix[seg_starts]

    # ---- value pass: engine ops over the fixed structure ----
    posK = gather0(cloud.positions, kept)
    sclK = gather0(cloud.scales, kept)
    rotK = gather0(cloud.rotations, kept)
    colK = gather0(cloud.colors, kept)
    opK = gather0(cloud.opacities, kept)

    Rc = Tensor(pose.R.astype(np.float32))
    tc = Tensor(pose.t.astype(np.float32))
    camT = matmul(posK - tc, Rc)                     # (M, 3)
    xk, yk, zk = camT[:, 0], camT[:, 1], camT[:, 2]
    fxT = Tensor(np.float32(fx)); fyT = Tensor(np.float32(fy))
    uT = fxT * xk / zk + Tensor(np.float32(cx))
    vT = fyT * yk / zk + Tensor(np.float32(cy))

    Rq = _quat_rot_tensor(rotK)
    s2 = sclK * sclK
    covw = matmul(Rq * reshape(s2, (kept.size, 1, 3)), transpose(Rq, (0, 2, 1)))
    RcT = Tensor(pose.R.T.astype(np.float32))
    covc = matmul(matmul(RcT, covw), Rc)

    zeros = Tensor(np.zeros(kept.size, dtype=np.float32))
    jj = stack([fxT / zk, zeros, -fxT * xk / (zk * zk),
                zeros, fyT / zk, -fyT * yk / (zk * zk)], axis=0)   # (6, M)
    J = reshape(transpose(jj, (1, 0)), (kept.size, 2, 3))
    cov2T = matmul(matmul(J, covc), transpose(J, (0, 2, 1)))
    dilmat = np.zeros((kept.size, 2, 2), dtype=np.float32)
    dilmat[:, 0, 0] = dil[kept]
    dilmat[:, 1, 1] = dil[kept]
    cov2T = cov2T + Tensor(dilmat)

    aT = cov2T[:, 0, 0]; bT = cov2T[:, 0, 1]; cT = cov2T[:, 1, 1]
    detT = aT * cT - bT * bT
    Ainv = cT / detT; Binv = -bT / detT; Cinv = aT / detT

    dx = Tensor((px + 0.5).astype(np.float32)) - gather0(uT, gidx)
    dy = Tensor((py + 0.5).astype(np.float32)) - gather0(vT, gidx)
    qT = (gather0(Ainv, gidx) * dx * dx
          + Tensor(np.float32(2.0)) * gather0(Binv, gidx) * dx * dy
          + gather0(Cinv, gidx) * dy * dy) * Tensor(np.float32(0.5))
    alpha = clamp(gather0(opK, gidx) * exp(-qT), hi=ALPHA_MAX)
    logt = log1p(-alpha)
    trans = exp(segment_cumsum_excl(logt, seg_starts))
    wgt = alpha * trans

    colP = gather0(colK, gidx)
    segC = segment_sum(reshape(wgt, (P, 1)) * colP, seg_starts)      # (S, 3)
    segW = segment_sum(reshape(wgt, (P, 1)), seg_starts)             # (S, 1)
    segL = segment_sum(reshape(logt, (P, 1)), seg_starts)            # (S, 1)
    t_final = exp(segL)

    bgT = Tensor(np.asarray(settings.background, dtype=np.float32))
    contrib = segC + (t_final - Tensor(np.float32(1.0))) * bgT
    flat = scatter_rows(contrib, uniq_pix, H * W, fill=0.0) + bgT
    color = clamp(reshape(flat, (H, W, 3)), 0.0, 1.0)
    aflat = scatter_rows(segW, uniq_pix, H * W, fill=0.0)
    alpha_img = clamp(reshape(aflat, (H, W)), 0.0, 1.0)
    return RenderedImage(color, alpha_img)


def gradient_check_render(cloud: GaussianCloud, pose: CameraPose,
                          settings: RenderSettings, h: float = 1e-3) -> dict:
    """Compare autodiff and central-difference gradients of a mean squared
    image loss, per attribute class.

    Returns {"position", "scale", "rotation", "color", "opacity"} mapped
    to max relative error. The loss target is a fixed seeded random image
    so every attribute receives signal.
    """
    if len(cloud) > 16:
        raise ContractError("gradient check is meant for clouds of <= 16 Gaussians")
    if settings.height > 32 or settings.width > 32:
        raise ContractError("gradient check is meant for rasters up to 32x32")
    rng = make_rng(1234)
    target = rng.uniform(0.0, 1.0, (settings.height, settings.width, 3)).astype(np.float32)

    fields = {"position": "positions", "scale": "scales", "rotation": "rotations",
              "color": "colors", "opacity": "opacities"}

    def loss_with(attr_name: str, value: Tensor) -> Tensor:
        parts = {f: getattr(cloud, f) for f in fields.values()}
        parts[attr_name] = value
        c = GaussianCloud(parts["positions"], parts["scales"], parts["rotations"],
                          parts["colors"], parts["opacities"])
        img = rasterize(c, pose, settings)
        d = img.color - Tensor(target)
        return (d * d).mean()

    report = {}
    for label, attr in fields.items():
        base = getattr(cloud, attr)
        param = Tensor(base.data.copy(), requires_grad=True)
        with GradTape():
            loss = loss_with(attr, param)
            loss.backward()
        analytic = param.grad if param.grad is not None else np.zeros_like(param.data)
        numeric = finite_diff_grad(lambda t: loss_with(attr, t), param, h=h)
        report[label] = max_rel_error(analytic, numeric)
    return report


# -- PNG I/O -----------------------------------------------------------------

def save_png(image, path) -> None:
    """Write an (H, W, 3) float array in [0, 1] as 8-bit RGB (round x255)."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ShapeError(f"save_png expects H×W×3, got {arr.shape}")
    u8 = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        rgb = im.convert("RGB")
        return np.asarray(rgb, dtype=np.float32) / 255.0
