"""Functional transformer building blocks over named parameter dicts.

Parameters live in flat ``dict[str, Tensor]`` maps with dotted names, so
checkpoint manifests, freezing, and weight-copying are all dictionary
operations. Blocks are pre-LN: x + attn(ln(x)), then x + mlp(ln(x)).
LoRA adapters attach to any linear as an additive (x@A)@B with B
zero-initialized.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from .errors import ContractError, ShapeError
from .numerics import (Tensor, layer_norm, matmul, reshape, silu, softmax,
                       transpose)

_BLOCK_LINEARS = ("attn.wq", "attn.wk", "attn.wv", "attn.wo", "mlp.w1", "mlp.w2")


def init_linear(params: dict, name: str, d_in: int, d_out: int,
                rng: Optional[np.random.Generator], scale: Optional[float] = None,
                zero: bool = False, bias: bool = True) -> None:
    if zero:
        w = Tensor.zeros((d_in, d_out), requires_grad=True)
    else:
        if scale is None:
            scale = d_in ** -0.5
        w = Tensor.randn((d_in, d_out), rng, scale=scale, requires_grad=True)
    params[name + ".w"] = w
    if bias:
        params[name + ".b"] = Tensor.zeros((d_out,), requires_grad=True)


def linear(x: Tensor, params: dict, name: str, lora: Optional[dict] = None) -> Tensor:
    out = matmul(x, params[name + ".w"])
    b = params.get(name + ".b")
    if b is not None:
        out = out + b
    if lora is not None and (name + ".A") in lora:
        out = out + matmul(matmul(x, lora[name + ".A"]), lora[name + ".B"])
    return out


def init_layer_norm(params: dict, name: str, d: int) -> None:
    params[name + ".g"] = Tensor.ones((d,), requires_grad=True)
    params[name + ".b"] = Tensor.zeros((d,), requires_grad=True)


def init_block(params: dict, prefix: str, d: int, heads: int,
               rng: np.random.Generator, mlp_ratio: int = 4) -> None:
    if d % heads != 0:
        raise ContractError(f"hidden {d} not divisible by heads {heads}")
    init_layer_norm(params, f"{prefix}.ln1", d)
    for leaf in ("attn.wq", "attn.wk", "attn.wv"):
        init_linear(params, f"{prefix}.{leaf}", d, d, rng)
    # zero-init output projections keep residual streams tame at init
    init_linear(params, f"{prefix}.attn.wo", d, d, rng, scale=0.5 * d ** -0.5)
    init_layer_norm(params, f"{prefix}.ln2", d)
    init_linear(params, f"{prefix}.mlp.w1", d, mlp_ratio * d, rng)
    init_linear(params, f"{prefix}.mlp.w2", mlp_ratio * d, d, rng,
                scale=0.5 * (mlp_ratio * d) ** -0.5)


def init_block_lora(params: dict, prefix: str, d: int, rank: int,
                    rng: np.random.Generator, mlp_ratio: int = 4) -> None:
    """Adapters for every linear of one block; B = 0 makes them inert."""
    dims = {"attn.wq": (d, d), "attn.wk": (d, d), "attn.wv": (d, d),
            "attn.wo": (d, d), "mlp.w1": (d, mlp_ratio * d),
            "mlp.w2": (mlp_ratio * d, d)}
    for leaf, (di, do) in dims.items():
        params[f"{prefix}.{leaf}.A"] = Tensor.randn((di, rank), rng,
                                                    scale=di ** -0.5, requires_grad=True)
        params[f"{prefix}.{leaf}.B"] = Tensor.zeros((rank, do), requires_grad=True)


def _lora_view(params: dict, prefix: Optional[str]) -> Optional[dict]:
    if prefix is None:
        return None
    view = {}
    for leaf in _BLOCK_LINEARS:
        a = params.get(f"{prefix}.{leaf}.A")
        if a is not None:
            view[leaf + ".A"] = a
            view[leaf + ".B"] = params[f"{prefix}.{leaf}.B"]
    return view or None


def block_forward(x: Tensor, params: dict, prefix: str, heads: int,
                  lora_prefix: Optional[str] = None,
                  lora_params: Optional[dict] = None) -> Tensor:
    lora = _lora_view(lora_params if lora_params is not None else params,
                      lora_prefix) if lora_prefix is not None else None
    h = layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    x = x + _attn_with(h, params, prefix, heads, lora)
    h = layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    m = linear(h, params, f"{prefix}.mlp.w1", _pick(lora, "mlp.w1"))
    m = silu(m)
    m = linear(m, params, f"{prefix}.mlp.w2", _pick(lora, "mlp.w2"))
    return x + m


def _attn_with(x, params, prefix, heads, lora):
    n, d = x.shape
    dh = d // heads
    q = linear(x, params, f"{prefix}.attn.wq", _pick(lora, "attn.wq"))
    k = linear(x, params, f"{prefix}.attn.wk", _pick(lora, "attn.wk"))
    v = linear(x, params, f"{prefix}.attn.wv", _pick(lora, "attn.wv"))
    q = transpose(reshape(q, (n, heads, dh)), (1, 0, 2))
    k = transpose(reshape(k, (n, heads, dh)), (1, 0, 2))
    v = transpose(reshape(v, (n, heads, dh)), (1, 0, 2))
    scores = matmul(q, transpose(k, (0, 2, 1))) * Tensor(np.float32(dh ** -0.5))
    att = softmax(scores, axis=-1)
    out = reshape(transpose(matmul(att, v), (1, 0, 2)), (n, d))
    return linear(out, params, f"{prefix}.attn.wo", _pick(lora, "attn.wo"))


def _pick(lora: Optional[dict], leaf: str) -> Optional[dict]:
    if lora is None or (leaf + ".A") not in lora:
        return None
    return {leaf + ".A": lora[leaf + ".A"], leaf + ".B": lora[leaf + ".B"]}


def init_posemb_3d(params: dict, name: str, max_dims: tuple, d: int,
                   rng: np.random.Generator, scale: float = 0.02) -> None:
    mt, mh, mw = max_dims
    params[name + ".t"] = Tensor.randn((mt, d), rng, scale=scale, requires_grad=True)
    params[name + ".h"] = Tensor.randn((mh, d), rng, scale=scale, requires_grad=True)
    params[name + ".w"] = Tensor.randn((mw, d), rng, scale=scale, requires_grad=True)


def posemb_3d(params: dict, name: str, t: int, h: int, w: int) -> Tensor:
    """Factorized additive position table sliced to (t*h*w, d)."""
    et, eh, ew = params[name + ".t"], params[name + ".h"], params[name + ".w"]
    d = et.shape[1]
    if t > et.shape[0] or h > eh.shape[0] or w > ew.shape[0]:
        raise ShapeError(f"position table supports up to {et.shape[0]}x{eh.shape[0]}"
                         f"x{ew.shape[0]}, got {t}x{h}x{w}")
    grid = (reshape(et[:t], (t, 1, 1, d)) + reshape(eh[:h], (1, h, 1, d))
            + reshape(ew[:w], (1, 1, w, d)))
    return reshape(grid, (t * h * w, d))


def timestep_embedding(tau: int, d: int) -> np.ndarray:
    """Sinusoidal features of a scalar step index."""
    half = d // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(1, half - 1))
    ang = tau * freqs
    emb = np.concatenate([np.cos(ang), np.sin(ang)])
    if emb.size < d:
        emb = np.concatenate([emb, np.zeros(d - emb.size)])
    return emb.astype(np.float32)
