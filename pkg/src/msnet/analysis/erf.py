"""Effective receptive field: contribution matrices and area scores.

For an output map ``F`` of a chosen stage and an input ``I``::

    P = max(sum_c dF(H'/2, W'/2, c)/dI, 0)
    A = log10(sum_c P + 1)

``P`` is averaged over inputs before the log and ``A`` is min-max normalized to [0, 1]. The score
``h(theta)`` is the fraction of entries of ``A`` strictly above ``theta``,
and ``h_bar`` averages it over theta = 0.50, 0.55, ..., 0.90.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from ..core.nn import BatchNorm2d, Module
from ..core.tensor import Tensor, no_grad

# integer hundredths so the grid is exact (0.55 is not 0.5 + 0.05 in binary)
THETAS = tuple(t / 100 for t in range(50, 91, 5))

FeatureFn = Callable[[Tensor], Tensor]


@dataclass
class ERFReport:
    stage: int
    A: np.ndarray
    h: Dict[float, float]
    h_bar: float
    meta: dict = field(default_factory=dict)

    def to_dict(self, include_matrix: bool = False) -> dict:
        out = {
            "stage": self.stage,
            "h": {f"{t:.2f}": v for t, v in self.h.items()},
            "h_bar": self.h_bar,
            "shape": list(self.A.shape),
            "meta": self.meta,
        }
        if include_matrix:
            out["A"] = self.A.tolist()
        return out


def _stage_fn(model: Module, stage: int) -> FeatureFn:
    backbone = getattr(model, "backbone", None)
    if backbone is None:
        raise ValueError("model has no backbone to tap")
    if stage not in (1, 2, 3, 4):
        raise ValueError(f"no tap for stage {stage}; choose 1..4")
    query = getattr(model, "query", None)
    return lambda x: backbone(x, query, upto=stage)[stage - 1]


def raw_contribution(fn: FeatureFn, image: np.ndarray) -> np.ndarray:
    """``sum_c P`` for one (1, C, H, W) input; float64, before the log."""
    x = Tensor(image, requires_grad=True)
    out = fn(x)
    if out.ndim != 4:
        raise ValueError(f"feature map must be rank 4, got shape {out.shape}")
    seed = np.zeros(out.shape, dtype=out.dtype)
    seed[:, :, out.shape[2] // 2, out.shape[3] // 2] = 1.0
    out.backward(seed)
    g = np.asarray(x.grad, dtype=np.float64)
    return np.maximum(g, 0.0).sum(axis=(0, 1))


def normalize(a: np.ndarray) -> np.ndarray:
    lo, hi = float(a.min()), float(a.max())
    if hi <= lo:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def contribution_matrix(model: Union[Module, FeatureFn], stage: Optional[int],
                        inputs: Iterable[np.ndarray], normalized: bool = True) -> np.ndarray:
    """Averaged contribution matrix ``A`` (H x W).

    ``model`` is either a graph with a backbone (then ``stage`` picks the tap)
    or any callable mapping an input tensor to a feature map.
    """
    if isinstance(model, Module):
        if stage is None:
            raise ValueError("stage is required when passing a model")
        model.eval()
        fn = _stage_fn(model, stage)
    else:
        fn = model
    # raw P is averaged over inputs before the log, as in the original ERF tooling
    acc, n = None, 0
    for image in inputs:
        image = np.asarray(image)
        if image.ndim == 3:
            image = image[None]
        p = raw_contribution(fn, image)
        acc = p if acc is None else acc + p
        n += image.shape[0]
    if n == 0:
        raise ValueError("no inputs given")
    # log1p keeps precision when the gradients are tiny
    A = np.log1p(acc / n) / math.log(10.0)
    return normalize(A) if normalized else A


def erf_score(A: np.ndarray, thetas: Sequence[float] = THETAS):
    """Return ``({theta: h(theta)}, h_bar)``."""
    A = np.asarray(A)
    size = A.size
    h = {float(t): float(np.count_nonzero(A > t)) / size for t in thetas}
    return h, float(np.mean(list(h.values())))


def noise_inputs(n: int, size: int, seed: int = 0, channels: int = 3,
                 dtype=np.float32) -> List[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((1, channels, size, size)).astype(dtype) for _ in range(n)]


def calibrate_batch_norm(model: Module, inputs: Sequence[np.ndarray]) -> Module:
    """Set every running statistic to the batch statistics of ``inputs``.

    Freshly initialized statistics (mean 0, var 1) let activations shrink
    stage after stage in a random network, so the contribution map ends up
    as a handful of spikes. Matching the statistics to the analysis inputs
    keeps every layer at unit scale, as training would.
    """
    batch = np.concatenate([np.asarray(x)[None] if np.ndim(x) == 3 else np.asarray(x) for x in inputs])
    norms = [m for m in model.modules() if isinstance(m, BatchNorm2d)]
    saved = [m.momentum for m in norms]
    for m in norms:
        m.momentum = 1.0
    model.train()
    try:
        with no_grad():
            model.backbone(Tensor(batch), getattr(model, "query", None))
    finally:
        for m, mom in zip(norms, saved):
            m.momentum = mom
        model.eval()
    return model


def erf_report(model: Module, stage: int, inputs: Sequence[np.ndarray], **meta) -> ERFReport:
    A = contribution_matrix(model, stage, inputs)
    h, h_bar = erf_score(A)
    meta.setdefault("n_inputs", len(inputs))
    return ERFReport(stage=stage, A=A, h=h, h_bar=h_bar, meta=meta)


def seed_averaged_hbar(build: Callable[[int], Module], stage: int, seeds: Sequence[int],
                       inputs: Sequence[np.ndarray], calibrate: bool = True) -> float:
    """Mean over weight seeds of the per-seed ``h_bar``."""
    scores = []
    for s in seeds:
        model = build(s)
        if calibrate:
            calibrate_batch_norm(model, inputs)
        _, h_bar = erf_score(contribution_matrix(model, stage, inputs))
        scores.append(h_bar)
    return float(np.mean(scores))


def write_pgm16(path, A: np.ndarray) -> None:
    """Dump a [0, 1] matrix as a 16-bit binary PGM."""
    A = np.clip(np.asarray(A, dtype=np.float64), 0.0, 1.0)
    h, w = A.shape
    pix = np.round(A * 65535).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(pix.tobytes())
