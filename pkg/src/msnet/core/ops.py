"""Differentiable primitives over :class:`Tensor`.

Every op validates shapes, computes its forward value with numpy, and records
a closure that maps the output adjoint to input adjoints. While a cost tracer
is active (see :mod:`msnet.analysis.cost`) ops skip the arithmetic, emit
zero-stride placeholders of the right shape and report their multiply-
accumulate counts instead.
"""

from __future__ import annotations

import builtins
from typing import List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, current_tracer, make_result

__all__ = [
    "as_tensor",
    "conv2d",
    "batch_norm",
    "silu",
    "sigmoid",
    "activation",
    "global_avg_pool",
    "linear",
    "max_pool2d",
    "channel_concat",
    "channel_split",
    "upsample_nearest",
    "add",
    "sub",
    "mul",
    "sum",
    "mean",
    "reshape",
]


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _placeholder(shape, dtype) -> Tensor:
    return Tensor(np.broadcast_to(np.zeros((), dtype=dtype), tuple(shape)))


def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# convolution


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _pointwise_forward(x, w2, stride):
    xs = x[:, :, ::stride, ::stride] if stride > 1 else x
    b, c, h, wd = xs.shape
    out = np.matmul(w2, xs.reshape(b, c, h * wd))
    return out.reshape(b, w2.shape[0], h, wd), xs


def _channel_blocks(n_ch: int, per_ch: int, budget: int = 1 << 15):
    # cache-sized channel blocks; the k*k shift loop is memory bound otherwise
    step = max(1, budget // max(per_ch, 1))
    for c0 in range(0, n_ch, step):
        yield slice(c0, min(n_ch, c0 + step))


def _depthwise_forward(xp, w, stride, ho, wo):
    k = w.shape[-1]
    out = np.zeros((xp.shape[0], xp.shape[1], ho, wo), dtype=np.result_type(xp, w))
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for cs in _channel_blocks(xp.shape[1], xp.shape[0] * ho * wo):
        o = out[:, cs]
        tmp = np.empty_like(o)
        for i in range(k):
            for j in range(k):
                win = xp[:, cs, i:i + hs:stride, j:j + ws:stride]
                np.multiply(win, w[None, cs, 0, i, j, None, None], out=tmp)
                o += tmp
    return out


def _im2col(xp, k, stride, ho, wo):
    # (B, C, Ho, Wo, k, k) view
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : stride * (ho - 1) + 1: stride, : stride * (wo - 1) + 1: stride]


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding and channel groups.

    ``weight`` has shape (out_ch, in_ch / groups, k, k) with odd ``k``.
    Depthwise convolution is ``groups == in_ch == out_ch``.
    """
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be rank 4 (N, C, H, W), got shape {x.shape}")
    if weight.ndim != 4:
        raise ValueError(f"conv2d weight must be rank 4, got shape {weight.shape}")
    if stride < 1 or padding < 0 or groups < 1:
        raise ValueError(f"invalid stride={stride}, padding={padding}, groups={groups}")
    b, c, h, wd = x.shape
    o, cg, kh, kw = weight.shape
    if kh != kw:
        raise ValueError(f"kernel must be square, got {kh}x{kw}")
    k = kh
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if c % groups:
        raise ValueError(f"input channels {c} not divisible by groups {groups}")
    if o % groups:
        raise ValueError(f"output channels {o} not divisible by groups {groups}")
    if cg != c // groups:
        raise ValueError(f"weight in-channel dimension is {cg}, expected in_ch/groups = {c // groups}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"bias shape {bias.shape} does not match out channels {o}")
    ho, wo = _conv_out(h, k, stride, padding), _conv_out(wd, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"kernel {k} with padding {padding} exceeds input extent {h}x{wd}")

    tracer = current_tracer()
    if tracer is not None:
        macs = k * k * cg * o * ho * wo * b
        tracer.record("conv2d", macs, (b, o, ho, wo), kernel=k, groups=groups, stride=stride)
        return _placeholder((b, o, ho, wo), x.dtype)

    xd, wdata = x.data, weight.data
    depthwise = groups == c and o == c and groups > 1
    pointwise = k == 1 and padding == 0 and groups == 1
    if pointwise:
        w2 = wdata[:, :, 0, 0]
        out, xs = _pointwise_forward(xd, w2, stride)
        cols = None
    else:
        xp = _pad(xd, padding)
        if depthwise:
            out = _depthwise_forward(xp, wdata, stride, ho, wo)
            cols = None
        else:
            cols = _im2col(xp, k, stride, ho, wo)
            outs = []
            for g in range(groups):
                cg_sl = slice(g * cg, (g + 1) * cg)
                og_sl = slice(g * (o // groups), (g + 1) * (o // groups))
                r = np.tensordot(cols[:, cg_sl], wdata[og_sl], axes=([1, 4, 5], [1, 2, 3]))
                outs.append(r.transpose(0, 3, 1, 2))
            out = outs[0] if groups == 1 else np.concatenate(outs, axis=1)
            out = np.ascontiguousarray(out)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        gx = gw = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if pointwise:
            bb, oo, hh, ww = g.shape
            g3 = g.reshape(bb, oo, hh * ww)
            if weight.requires_grad:
                gw = np.tensordot(g3, xs.reshape(bb, c, hh * ww), axes=([0, 2], [0, 2]))
                gw = gw.reshape(weight.shape)
            if x.requires_grad:
                gxs = np.matmul(w2.T, g3).reshape(bb, c, hh, ww)
                if stride > 1:
                    gx = np.zeros_like(xd)
                    gx[:, :, ::stride, ::stride] = gxs
                else:
                    gx = gxs
            return gx, gw, gb
        hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        gxp = np.zeros_like(xp) if x.requires_grad else None
        if depthwise:
            if weight.requires_grad:
                gw = np.empty_like(wdata)
                for i in range(k):
                    for j in range(k):
                        win = xp[:, :, i:i + hs:stride, j:j + ws:stride]
                        gw[:, 0, i, j] = np.einsum("bchw,bchw->c", g, win)
            if gxp is not None:
                for cs in _channel_blocks(c, g.shape[0] * ho * wo):
                    gc, gp = g[:, cs], gxp[:, cs]
                    tmp = np.empty_like(gc)
                    for i in range(k):
                        for j in range(k):
                            np.multiply(gc, wdata[None, cs, 0, i, j, None, None], out=tmp)
                            gp[:, :, i:i + hs:stride, j:j + ws:stride] += tmp
        else:
            og = o // groups
            gw = np.empty_like(wdata) if weight.requires_grad else None
            for gi in range(groups):
                cg_sl = slice(gi * cg, (gi + 1) * cg)
                og_sl = slice(gi * og, (gi + 1) * og)
                gg = g[:, og_sl]
                if gw is not None:
                    gw[og_sl] = np.tensordot(gg, cols[:, cg_sl], axes=([0, 2, 3], [0, 2, 3]))
                if gxp is not None:
                    # (B, Ho, Wo, cg, k, k)
                    gcols = np.tensordot(gg, wdata[og_sl], axes=([1], [0]))
                    for i in range(k):
                        for j in range(k):
                            gxp[:, cg_sl, i:i + hs:stride, j:j + ws:stride] += gcols[..., i, j].transpose(0, 3, 1, 2)
        if gxp is not None:
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "conv2d")


# ---------------------------------------------------------------------------
# normalization and activations


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, eps: float = 1e-5, momentum: float = 0.1,
               training: bool = True) -> Tensor:
    """Per-channel batch normalization over (batch, height, width).

    In training mode the batch statistics normalize the input and the running
    statistics are updated in place (``running_var`` tracks the unbiased
    variance). Eval mode applies the running statistics as a fixed affine map.
    """
    if x.ndim != 4:
        raise ValueError(f"batch_norm input must be rank 4, got shape {x.shape}")
    c = x.shape[1]
    for name, arr in (("gamma", gamma.data), ("beta", beta.data),
                      ("running_mean", running_mean), ("running_var", running_var)):
        if np.shape(arr) != (c,):
            raise ValueError(f"{name} has shape {np.shape(arr)}, expected ({c},)")
    if not eps > 0:
        raise ValueError("eps must be positive")

    tracer = current_tracer()
    if tracer is not None:
        tracer.record("batch_norm", 0, x.shape)
        return _placeholder(x.shape, x.dtype)

    xd = x.data
    gd = gamma.data[None, :, None, None]
    if training:
        n = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mu = xd.mean(axis=(0, 2, 3))
        xc = xd - mu[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv[None, :, None, None]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * (var * n / max(n - 1, 1))
    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (xd - running_mean[None, :, None, None]) * inv[None, :, None, None]
        inv = inv.astype(xd.dtype)
        xhat = xhat.astype(xd.dtype)
    out = xhat * gd + beta.data[None, :, None, None]

    def backward(g):
        gg = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        ggam = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            if training:
                nn_ = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
                s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                gx = (dxhat - s1 / nn_ - xhat * (s2 / nn_)) * inv[None, :, None, None]
            else:
                gx = dxhat * inv[None, :, None, None]
        return gx, ggam, gg

    return make_result(out, (x, gamma, beta), backward, "batch_norm")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    pos = 1.0 / (1.0 + e)
    return np.where(x >= 0, pos, e * pos)


def sigmoid(x: Tensor) -> Tensor:
    tracer = current_tracer()
    if tracer is not None:
        tracer.record("sigmoid", 0, x.shape)
        return _placeholder(x.shape, x.dtype)
    s = _sigmoid_np(x.data)

    def backward(g):
        return (g * s * (1.0 - s),)

    return make_result(s, (x,), backward, "sigmoid")


def silu(x: Tensor) -> Tensor:
    tracer = current_tracer()
    if tracer is not None:
        tracer.record("silu", 0, x.shape)
        return _placeholder(x.shape, x.dtype)
    xd = x.data
    s = _sigmoid_np(xd)

    def backward(g):
        return (g * (s * (1.0 + xd * (1.0 - s))),)

    return make_result(xd * s, (x,), backward, "silu")


def activation(x: Tensor, kind: str = "silu") -> Tensor:
    if kind == "silu":
        return silu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# pooling and dense


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over spatial positions: (N, C, H, W) -> (N, C)."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool input must be rank 4, got shape {x.shape}")
    b, c, h, w = x.shape
    if h * w == 0:
        raise ValueError("global_avg_pool on zero-sized spatial extent")
    tracer = current_tracer()
    if tracer is not None:
        tracer.record("global_avg_pool", 0, (b, c))
        return _placeholder((b, c), x.dtype)
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return make_result(out, (x,), backward, "global_avg_pool")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` on (batch, features_in) input."""
    if x.ndim != 2:
        raise ValueError(f"linear input must be rank 2 (batch, features), got shape {x.shape}")
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ValueError(f"linear weight shape {weight.shape} incompatible with input features {x.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear bias shape {bias.shape} does not match out features {weight.shape[0]}")
    b = x.shape[0]
    fo, fi = weight.shape
    tracer = current_tracer()
    if tracer is not None:
        tracer.record("linear", b * fi * fo, (b, fo))
        return _placeholder((b, fo), x.dtype)
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "linear")


def max_pool2d(x: Tensor, k: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Window maximum with -inf padding.

    The subgradient goes to the first maximal element of each window in
    row-major scan order.
    """
    if x.ndim != 4:
        raise ValueError(f"max_pool2d input must be rank 4, got shape {x.shape}")
    if k < 1 or stride < 1 or padding < 0:
        raise ValueError(f"invalid k={k}, stride={stride}, padding={padding}")
    if padding > k // 2:
        raise ValueError(f"padding {padding} exceeds half the window {k}; windows could hold only padding")
    b, c, h, w = x.shape
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ValueError(f"pool window {k} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    ho, wo = _conv_out(h, k, stride, padding), _conv_out(w, k, stride, padding)
    tracer = current_tracer()
    if tracer is not None:
        tracer.record("max_pool2d", 0, (b, c, ho, wo))
        return _placeholder((b, c, ho, wo), x.dtype)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf) if padding else x.data
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    out = np.full((b, c, ho, wo), -np.inf, dtype=x.dtype)
    arg = np.zeros((b, c, ho, wo), dtype=np.int32)
    for i in range(k):
        for j in range(k):
            win = xp[:, :, i:i + hs:stride, j:j + ws:stride]
            better = win > out
            out = np.where(better, win, out)
            arg[better] = i * k + j

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                mask = arg == i * k + j
                gxp[:, :, i:i + hs:stride, j:j + ws:stride] += np.where(mask, g, 0.0)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return (gx,)

    return make_result(out, (x,), backward, "max_pool2d")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"upsample input must be rank 4, got shape {x.shape}")
    b, c, h, w = x.shape
    shape = (b, c, h * factor, w * factor)
    tracer = current_tracer()
    if tracer is not None:
        tracer.record("upsample_nearest", 0, shape)
        return _placeholder(shape, x.dtype)
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return make_result(out, (x,), backward, "upsample_nearest")


# ---------------------------------------------------------------------------
# structural


def channel_concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis (axis 1)."""
    if not parts:
        raise ValueError("channel_concat needs at least one tensor")
    ref = parts[0].shape
    for idx, p in enumerate(parts):
        if p.ndim != len(ref) or p.shape[:1] + p.shape[2:] != ref[:1] + ref[2:]:
            raise ValueError(f"part {idx} has shape {p.shape}, incompatible with {ref} outside the channel axis")
    widths = [p.shape[1] for p in parts]
    shape = (ref[0], int(np.sum(widths))) + tuple(ref[2:])
    tracer = current_tracer()
    if tracer is not None:
        tracer.record("channel_concat", 0, shape)
        return _placeholder(shape, parts[0].dtype)
    out = np.concatenate([p.data for p in parts], axis=1)
    bounds = np.cumsum([0] + widths)

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return make_result(out, tuple(parts), backward, "channel_concat")


def channel_split(x: Tensor, widths: Sequence[int]) -> List[Tensor]:
    """Split along the channel axis into consecutive groups of ``widths``."""
    widths = [int(w) for w in widths]
    if any(w < 1 for w in widths):
        raise ValueError(f"split widths must be positive, got {widths}")
    if x.ndim < 2 or builtins.sum(widths) != x.shape[1]:
        raise ValueError(f"split widths sum to {builtins.sum(widths)} but input has {x.shape[1] if x.ndim > 1 else 0} channels")
    bounds = np.cumsum([0] + widths)
    tracer = current_tracer()
    outs = []
    for i, w in enumerate(widths):
        lo, hi = int(bounds[i]), int(bounds[i + 1])
        shape = (x.shape[0], w) + tuple(x.shape[2:])
        if tracer is not None:
            outs.append(_placeholder(shape, x.dtype))
            continue

        def backward(g, lo=lo, hi=hi):
            gx = np.zeros_like(x.data)
            gx[:, lo:hi] = g
            return (gx,)

        outs.append(make_result(x.data[:, lo:hi], (x,), backward, "channel_split"))
    return outs


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    tracer = current_tracer()
    if tracer is not None:
        return _placeholder(np.empty(x.shape, dtype=np.int8).reshape(shape).shape, x.dtype)
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return make_result(out, (x,), backward, "reshape")


# ---------------------------------------------------------------------------
# elementwise and reductions


def _binary_shape(a: Tensor, b: Tensor):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


def _coerce(a, b):
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    shape = _binary_shape(a, b)
    tracer = current_tracer()
    if tracer is not None:
        tracer.record("add", 0, shape)
        return _placeholder(shape, a.dtype)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    shape = _binary_shape(a, b)
    tracer = current_tracer()
    if tracer is not None:
        tracer.record("sub", 0, shape)
        return _placeholder(shape, a.dtype)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    shape = _binary_shape(a, b)
    tracer = current_tracer()
    if tracer is not None:
        tracer.record("mul", 0, shape)
        return _placeholder(shape, a.dtype)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad * bd, (a, b), backward, "mul")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    tracer = current_tracer()
    if tracer is not None:
        return _placeholder((), x.dtype)

    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(x.data.sum()), (x,), backward, "sum")


def mean(x: Tensor) -> Tensor:
    tracer = current_tracer()
    if tracer is not None:
        return _placeholder((), x.dtype)
    n = x.size

    def backward(g):
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return make_result(np.asarray(x.data.mean()), (x,), backward, "mean")
