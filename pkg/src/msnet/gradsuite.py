"""Finite-difference gradient suite over every primitive and a gated block.

Each case builds a small float64 graph from random leaves and compares
backward() against central differences (see ``core.gradcheck``).
"""

from __future__ import annotations

import time
from typing import Callable, Dict, Tuple

import numpy as np

from .blocks import SIBM, GlobalQuery, MSBlock, ms_block_forward
from .core import ops
from .core.gradcheck import check_gradients
from .core.tensor import Tensor

TOLERANCE = 1e-5

Case = Callable[[np.random.Generator], Tuple[Callable[[], Tensor], Dict[str, Tensor]]]


def _leaf(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _distinct(rng, *shape) -> Tensor:
    # well separated values so an eps nudge never changes a max-pool winner
    n = int(np.prod(shape))
    vals = rng.permutation(n).astype(np.float64) * 0.1 + rng.uniform(-0.01, 0.01, n)
    return Tensor(vals.reshape(shape), requires_grad=True)


def _conv_case(k, stride, padding, groups, cin, cout, bias):
    def case(rng):
        x = _leaf(rng, 2, cin, 6, 5)
        w = _leaf(rng, cout, cin // groups, k, k)
        leaves = {"x": x, "w": w}
        b = None
        if bias:
            b = leaves["b"] = _leaf(rng, cout)
        return (lambda: ops.conv2d(x, w, b, stride, padding, groups)), leaves
    return case


def _bn_case(training):
    def case(rng):
        x = _leaf(rng, 3, 4, 3, 3)
        g = _leaf(rng, 4)
        b = _leaf(rng, 4)
        rm = rng.standard_normal(4) * 0.1
        rv = rng.uniform(0.5, 2.0, 4)

        def build():
            # copies keep the running statistics fixed between evaluations
            return ops.batch_norm(x, g, b, rm.copy(), rv.copy(), training=training)
        return build, {"x": x, "gamma": g, "beta": b}
    return case


def _unary(fn, scale=2.0):
    def case(rng):
        x = _leaf(rng, 2, 3, 4, 4, scale=scale)
        return (lambda: fn(x)), {"x": x}
    return case


def _linear_case(rng):
    x, w, b = _leaf(rng, 3, 5), _leaf(rng, 4, 5), _leaf(rng, 4)
    return (lambda: ops.linear(x, w, b)), {"x": x, "w": w, "b": b}


def _maxpool_case(k, stride, padding):
    def case(rng):
        x = _distinct(rng, 1, 2, 7, 7)
        return (lambda: ops.max_pool2d(x, k, stride, padding)), {"x": x}
    return case


def _concat_case(rng):
    a, b = _leaf(rng, 2, 2, 3, 3), _leaf(rng, 2, 3, 3, 3)
    return (lambda: ops.channel_concat([a, b])), {"a": a, "b": b}


def _split_case(rng):
    x = _leaf(rng, 2, 6, 3, 3)

    def build():
        p = ops.channel_split(x, [1, 3, 2])
        return ops.channel_concat([p[2], ops.mul(p[0], p[0]), p[1]])
    return build, {"x": x}


def _broadcast_case(rng):
    a, b, c = _leaf(rng, 2, 3, 4, 4), _leaf(rng, 1, 3, 1, 1), _leaf(rng, 2, 1, 4, 4)
    return (lambda: ops.sub(ops.mul(ops.add(a, b), c), b)), {"a": a, "b": b, "c": c}


def _reduce_case(rng):
    x = _leaf(rng, 2, 3, 4)
    return (lambda: ops.add(ops.reshape(ops.sum(x), (1,)), ops.reshape(ops.mean(x), (1,)))), {"x": x}


def _reshape_case(rng):
    x = _leaf(rng, 2, 3, 4)
    return (lambda: ops.reshape(x, (4, 6))), {"x": x}


def _randomize(block: MSBlock, rng) -> None:
    for name, p in block.named_parameters():
        if name.endswith("gamma"):
            p.data = rng.uniform(0.5, 1.5, p.shape)
        elif name.endswith(("beta", "bias")):
            p.data = rng.standard_normal(p.shape) * 0.1
        else:
            p.data = rng.standard_normal(p.shape) * 0.3


def _block_case(gated: bool):
    def case(rng):
        block = MSBlock(8, 8, kernel=5, mode=SIBM, n_branches=3, gql_dim=16 if gated else None,
                        rng=np.random.default_rng(int(rng.integers(1 << 31))))
        _randomize(block, rng)
        block.train()
        x = _leaf(rng, 1, 8, 6, 6)
        leaves = {"x": x}
        query = None
        if gated:
            gq = GlobalQuery(3, 16, rng=rng)
            gq.query.data = rng.standard_normal(gq.query.shape)
            query = leaves["query"] = gq.query
        leaves.update(block.named_parameters())

        def build():
            return ms_block_forward(x, block, query)
        return build, leaves
    return case


CASES: Dict[str, Case] = {
    "conv2d_3x3": _conv_case(3, 1, 1, 1, 3, 4, True),
    "conv2d_3x3_stride2": _conv_case(3, 2, 1, 1, 2, 3, False),
    "conv2d_grouped": _conv_case(3, 1, 1, 2, 4, 6, False),
    "conv2d_depthwise_5x5": _conv_case(5, 1, 2, 3, 3, 3, False),
    "conv2d_depthwise_stride2": _conv_case(3, 2, 1, 4, 4, 4, True),
    "conv2d_pointwise": _conv_case(1, 1, 0, 1, 3, 5, True),
    "batch_norm_train": _bn_case(True),
    "batch_norm_eval": _bn_case(False),
    "silu": _unary(ops.silu),
    "sigmoid": _unary(ops.sigmoid),
    "global_avg_pool": _unary(ops.global_avg_pool),
    "upsample_nearest": _unary(ops.upsample_nearest),
    "linear": _linear_case,
    "max_pool2d_5": _maxpool_case(5, 1, 2),
    "max_pool2d_3_stride2": _maxpool_case(3, 2, 1),
    "channel_concat": _concat_case,
    "channel_split": _split_case,
    "broadcast_arith": _broadcast_case,
    "sum_mean": _reduce_case,
    "reshape": _reshape_case,
    "ms_block": _block_case(False),
    "ms_block_gql": _block_case(True),
}


def run_suite(seed: int = 0, cases=None, eps: float = 1e-5) -> dict:
    """Return ``{"cases": {name: {"max_rel_err", "leaves", "seconds"}}, "max_rel_err", "passed"}``."""
    names = list(CASES) if cases is None else list(cases)
    results = {}
    for i, name in enumerate(names):
        rng = np.random.default_rng([seed, i])
        build, leaves = CASES[name](rng)
        t0 = time.perf_counter()
        errs = check_gradients(build, leaves, rng, eps)
        results[name] = {"max_rel_err": max(errs.values()), "leaves": errs,
                         "seconds": time.perf_counter() - t0}
    worst = max(r["max_rel_err"] for r in results.values())
    return {"cases": results, "max_rel_err": worst, "tolerance": TOLERANCE,
            "passed": bool(worst <= TOLERANCE)}
