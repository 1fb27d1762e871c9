"""Strided 2D/3D convolution and transposed convolution.

Layout is channels-last throughout: conv2d takes (N, H, W, Cin), conv3d
takes (T, H, W, Cin) with the leading axis convolved, not batched. The
forward pass lowers to one matmul over unfolded windows; when kernel
equals stride with no padding the windows partition the input, so both
directions reduce to reshapes and stay fast. Transposed convolutions are
implemented only for kernel == stride, which is the only configuration
the decoders use (each output block depends on exactly one input cell).
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor, _record


def _out_len(n: int, k: int, s: int, p: int) -> int:
    m = n + 2 * p - k
    if m < 0:
        raise ShapeError(f"kernel {k} larger than padded input {n + 2 * p}")
    return m // s + 1


def _unfold(xp: np.ndarray, kernel: tuple, stride: tuple, spatial_axes: tuple) -> np.ndarray:
    """Windows of ``xp`` shaped (..., *out_spatial, *kernel, C), contiguous."""
    win = np.lib.stride_tricks.sliding_window_view(xp, kernel, axis=spatial_axes)
    # sliding_window_view appends window axes at the end: (..., C, *kernel)
    sub = win[tuple(
        slice(None, None, stride[spatial_axes.index(ax)]) if ax in spatial_axes else slice(None)
        for ax in range(xp.ndim)
    )]
    nd = len(kernel)
    # move channel axis behind the window axes
    perm = list(range(sub.ndim - nd - 1)) + list(range(sub.ndim - nd, sub.ndim)) + [sub.ndim - nd - 1]
    return np.ascontiguousarray(sub.transpose(perm))


def _conv(x: Tensor, w: Tensor, b: Optional[Tensor], stride: tuple, padding: tuple,
          nd: int, batched: bool) -> Tensor:
    kernel = w.data.shape[:nd]
    cin, cout = w.data.shape[nd], w.data.shape[nd + 1]
    lead = 1 if batched else 0
    if x.ndim != lead + nd + 1:
        raise ShapeError(f"conv{nd}d input rank {x.ndim} does not match weight rank "
                         f"{w.ndim} (shapes {x.shape} and {w.shape})")
    if x.data.shape[-1] != cin:
        raise ShapeError(f"conv{nd}d channels disagree: input {x.shape}, weight {w.shape}")
    spatial = x.data.shape[lead:lead + nd]
    out_spatial = tuple(_out_len(n, k, s, p)
                        for n, k, s, p in zip(spatial, kernel, stride, padding))
    n_out = int(np.prod(out_spatial))
    batch = x.data.shape[0] if batched else 1

    exact = (kernel == tuple(stride) and all(p == 0 for p in padding)
             and all(n % k == 0 for n, k in zip(spatial, kernel)))

    if exact:
        cols, fold_back = _partition_cols(x.data, kernel, nd, batched)
    else:
        pad_width = ([(0, 0)] if batched else []) + [(p, p) for p in padding] + [(0, 0)]
        xp = np.pad(x.data, pad_width)
        axes = tuple(range(lead, lead + nd))
        winv = _unfold(xp, kernel, stride, axes)
        cols = winv.reshape(batch, n_out, int(np.prod(kernel)) * cin)
        fold_back = _make_col2im(xp.shape, kernel, stride, padding, nd, batched, x.data.shape)

    wmat = w.data.reshape(-1, cout)
    omat = cols @ wmat
    if b is not None:
        if b.data.shape != (cout,):
            raise ShapeError(f"conv{nd}d bias must have shape ({cout},), got {b.shape}")
        omat = omat + b.data
    out_shape = ((batch,) if batched else ()) + out_spatial + (cout,)
    out = Tensor._from_data(omat.reshape(out_shape))

    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        gmat = g.reshape(batch, n_out, cout)
        gx = gw = gb = None
        if x._tracked():
            gcols = gmat @ wmat.T
            gx = fold_back(gcols)
        if w._tracked():
            gw = np.einsum("bnk,bnc->kc", cols, gmat).reshape(w.data.shape)
        if b is not None and b._tracked():
            gb = gmat.sum(axis=(0, 1))
        return (gx, gw) if b is None else (gx, gw, gb)

    return _record(out, inputs, bw)


def _partition_cols(xd: np.ndarray, kernel: tuple, nd: int, batched: bool):
    """kernel == stride, no padding: unfold is a pure reshape both ways."""
    lead = 1 if batched else 0
    batch = xd.shape[0] if batched else 1
    spatial = xd.shape[lead:lead + nd]
    cin = xd.shape[-1]
    blocks = tuple(n // k for n, k in zip(spatial, kernel))
    split = (batch,) + tuple(v for n, k in zip(blocks, kernel) for v in (n, k)) + (cin,)
    x5 = xd.reshape(split)
    # interleave (b1,k1,b2,k2,...) -> (b1,b2,...,k1,k2,...)
    perm = [0] + [1 + 2 * i for i in range(nd)] + [2 + 2 * i for i in range(nd)] + [1 + 2 * nd]
    cols = np.ascontiguousarray(x5.transpose(perm)).reshape(
        batch, int(np.prod(blocks)), int(np.prod(kernel)) * cin)

    inv_perm = np.argsort(perm)

    def fold_back(gcols):
        g6 = gcols.reshape((batch,) + blocks + kernel + (cin,))
        gx = np.ascontiguousarray(g6.transpose(inv_perm)).reshape(xd.shape)
        return gx
    return cols, fold_back


def _make_col2im(padded_shape: tuple, kernel: tuple, stride: tuple, padding: tuple,
                 nd: int, batched: bool, orig_shape: tuple):
    lead = 1 if batched else 0
    batch = padded_shape[0] if batched else 1
    pspatial = padded_shape[lead:lead + nd]
    cin = padded_shape[-1]
    out_spatial = tuple((n - k) // s + 1 for n, k, s in zip(pspatial, kernel, stride))

    # flat padded-spatial index for every (out position, kernel offset) pair
    grids_out = np.meshgrid(*[np.arange(n) * s for n, s in zip(out_spatial, stride)],
                            indexing="ij")
    grids_k = np.meshgrid(*[np.arange(k) for k in kernel], indexing="ij")
    flat = np.zeros(tuple(out_spatial) + tuple(kernel), dtype=np.int64)
    mult = 1
    for ax in reversed(range(nd)):
        pos = grids_out[ax].reshape(out_spatial + (1,) * nd) + grids_k[ax].reshape((1,) * nd + tuple(kernel))
        flat = flat + pos * mult
        mult *= pspatial[ax]
    flat = flat.reshape(-1)

    def fold_back(gcols):
        # gcols: (batch, n_out, prod(kernel)*cin)
        gpad = np.zeros((batch, int(np.prod(pspatial)), cin), dtype=np.float32)
        vals = gcols.reshape(batch, -1, cin)  # (out position, kernel offset) pairs in flat order
        np.add.at(gpad, (np.arange(batch)[:, None], flat[None, :]), vals)
        gpad = gpad.reshape((batch,) + pspatial + (cin,))
        sl = tuple(slice(p, n + p) for p, n in zip(padding, orig_shape[lead:lead + nd]))
        gx = gpad[(slice(None),) + sl] if batched else gpad[0][sl]
        return np.ascontiguousarray(gx)
    return fold_back


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
           stride=(1, 1), padding=(0, 0)) -> Tensor:
    """Batched 2D convolution: (N, H, W, Cin) with (kh, kw, Cin, Cout)."""
    if w.ndim != 4:
        raise ShapeError(f"conv2d weight must be rank 4, got {w.shape}")
    return _conv(x, w, b, tuple(stride), tuple(padding), nd=2, batched=True)


def conv3d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
           stride=(1, 1, 1), padding=(0, 0, 0)) -> Tensor:
    """Unbatched 3D convolution: (T, H, W, Cin) with (kt, kh, kw, Cin, Cout)."""
    if w.ndim != 5:
        raise ShapeError(f"conv3d weight must be rank 5, got {w.shape}")
    return _conv(x, w, b, tuple(stride), tuple(padding), nd=3, batched=False)


def _deconv(x: Tensor, w: Tensor, b: Optional[Tensor], nd: int) -> Tensor:
    kernel = w.data.shape[1:1 + nd]
    cin, cout = w.data.shape[0], w.data.shape[-1]
    if x.ndim != nd + 1:
        raise ShapeError(f"conv_transpose{nd}d input rank {x.ndim}, expected {nd + 1}")
    if x.data.shape[-1] != cin:
        raise ShapeError(f"conv_transpose{nd}d channels disagree: input {x.shape}, weight {w.shape}")
    spatial = x.data.shape[:nd]
    n_in = int(np.prod(spatial))
    wmat = w.data.reshape(cin, -1)

    omat = x.data.reshape(n_in, cin) @ wmat  # (n_in, prod(kernel)*cout)
    blocks = omat.reshape(spatial + kernel + (cout,))
    # (s1..snd, k1..knd, C) -> (s1,k1,s2,k2,...,C)
    perm = [v for i in range(nd) for v in (i, nd + i)] + [2 * nd]
    out_shape = tuple(n * k for n, k in zip(spatial, kernel)) + (cout,)
    od = np.ascontiguousarray(blocks.transpose(perm)).reshape(out_shape)
    if b is not None:
        if b.data.shape != (cout,):
            raise ShapeError(f"conv_transpose{nd}d bias must have shape ({cout},), got {b.shape}")
        od = od + b.data
    out = Tensor._from_data(od)

    inputs = (x, w) if b is None else (x, w, b)
    inv_perm = np.argsort(perm)

    def bw(g):
        gblocks = g.reshape(tuple(v for n, k in zip(spatial, kernel) for v in (n, k)) + (cout,))
        gmat = np.ascontiguousarray(gblocks.transpose(inv_perm)).reshape(n_in, -1)
        gx = gw = gb = None
        if x._tracked():
            gx = (gmat @ wmat.T).reshape(x.data.shape)
        if w._tracked():
            gw = (x.data.reshape(n_in, cin).T @ gmat).reshape(w.data.shape)
        if b is not None and b._tracked():
            gb = g.reshape(-1, cout).sum(axis=0)
        return (gx, gw) if b is None else (gx, gw, gb)

    return _record(out, inputs, bw)


def conv_transpose2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Upsample (h, w, Cin) by the kernel factors of w (Cin, kh, kw, Cout).

    Stride equals kernel, so each input cell expands to an independent
    kh-by-kw output block.
    """
    if w.ndim != 4:
        raise ShapeError(f"conv_transpose2d weight must be rank 4, got {w.shape}")
    return _deconv(x, w, b, nd=2)


def conv_transpose3d(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Upsample (t, h, w, Cin) by the kernel factors of w (Cin, kt, kh, kw, Cout)."""
    if w.ndim != 5:
        raise ShapeError(f"conv_transpose3d weight must be rank 5, got {w.shape}")
    return _deconv(x, w, b, nd=3)
