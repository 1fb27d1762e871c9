"""Central-difference gradient oracle.

Every differentiable primitive is validated against this independently of
the tape machinery: perturb one input element at a time, evaluate the
scalar function twice, and difference. Quotients are formed in float64
because the forward passes themselves round to float32.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import ContractError, NumericError
from .tensor import Tensor, suspend_tape


def _eval_scalar(f: Callable, arr: np.ndarray) -> float:
    out = f(Tensor(arr))
    v = out.item() if isinstance(out, Tensor) else float(out)
    if not np.isfinite(v):
        raise NumericError("finite_diff_grad: function returned a non-finite value")
    return v


def finite_diff_grad(f: Callable[[Tensor], "Tensor | float"], x: Tensor,
                     h: float = 1e-3) -> np.ndarray:
    """d f / d x by central differences, one element at a time.

    ``f`` must be deterministic and scalar-valued. Runs with recording
    suspended so repeated evaluations never touch an active tape.
    """
    if h <= 0:
        raise ContractError(f"finite_diff_grad step must be positive, got {h}")
    base = np.array(x.data, dtype=np.float32, copy=True)
    grad = np.zeros(base.size, dtype=np.float64)
    flat = base.reshape(-1)
    with suspend_tape():
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            fp = _eval_scalar(f, base)
            flat[i] = keep - h
            fm = _eval_scalar(f, base)
            flat[i] = keep
            grad[i] = (np.float64(fp) - np.float64(fm)) / (2.0 * h)
    return grad.reshape(base.shape)


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| normalized by the larger infinity norm of the two.

    Near-zero gradients on both sides compare equal rather than blowing
    up the quotient.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ContractError(f"gradient shapes disagree: {a.shape} vs {n.shape}")
    denom = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if denom < 1e-8:
        return 0.0
    return float(np.abs(a - n).max() / denom)
