"""Central finite differences as an independent oracle for backward()."""

from __future__ import annotations

from typing import Callable, Dict, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def finite_diff_grad(f: Callable[[], object], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` with respect to leaf ``x``.

    ``x.data`` is perturbed in place one element at a time and restored.
    """
    grad = np.zeros(x.shape, dtype=x.dtype)
    flat = x.data.reshape(-1)
    if not np.shares_memory(flat, x.data):
        x.data = np.ascontiguousarray(x.data)
        flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = _scalar(f())
            flat[i] = orig - eps
            fm = _scalar(f())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
    return grad


def _scalar(v):
    if isinstance(v, Tensor):
        v = v.data
    return np.asarray(v).sum()


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - b| / max(|a|, |b|, floor) over elements."""
    a = np.asarray(a, dtype=np.longdouble)
    b = np.asarray(b, dtype=np.longdouble)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def check_gradients(build: Callable[[], Tensor], leaves: Dict[str, Tensor],
                    rng: np.random.Generator, eps: float = 1e-5,
                    oracle_dtype=np.longdouble) -> Dict[str, float]:
    """Compare backward() against central differences for every leaf.

    The scalar under test is ``sum(build() * R)`` for a fixed random
    projection ``R``; returns the max relative error per leaf name.

    backward() runs at the leaves' own precision. The difference quotients
    are evaluated with the leaves cast to ``oracle_dtype`` (x87 extended by
    default): in float64 the rounding noise of ``f`` divided by ``2*eps``
    is ~1e-10, which is already a 1e-5 relative error on gradient entries
    of size 1e-5.
    """
    out = build()
    proj = rng.standard_normal(out.shape)
    for leaf in leaves.values():
        leaf.grad = None
    out.backward(proj)
    analytic = {n: (l.grad.copy() if l.grad is not None else np.zeros(l.shape))
                for n, l in leaves.items()}

    def f():
        return np.sum(build().data * proj)

    saved = {n: l.data for n, l in leaves.items()}
    errors = {}
    try:
        for leaf in leaves.values():
            leaf.data = leaf.data.astype(oracle_dtype)
        for name, leaf in leaves.items():
            numeric = finite_diff_grad(f, leaf, eps)
            errors[name] = max_relative_error(analytic[name], numeric)
    finally:
        for n, l in leaves.items():
            l.data = saved[n]
    return errors


def seed_linearity_error(build: Callable[[], Tensor], leaves: Sequence[Tensor],
                         rng: np.random.Generator, alpha: float = 3.5) -> float:
    """max relative deviation between backward(alpha*s) and alpha*backward(s)."""
    out = build()
    s = rng.standard_normal(out.shape)
    for leaf in leaves:
        leaf.grad = None
    out.backward(s)
    base = [leaf.grad.copy() for leaf in leaves]
    out = build()
    for leaf in leaves:
        leaf.grad = None
    out.backward(alpha * s)
    return max(max_relative_error(leaf.grad, alpha * g) for leaf, g in zip(leaves, base))
