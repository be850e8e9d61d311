"""SGD with momentum and a synthetic overfit task.

The task regresses one scalar per image from a tiny backbone (every stage
built from gated multi-branch blocks) through global pooling and a linear
read-out. Reaching a small fraction of the initial loss shows that
gradients flow through the whole graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .architecture import KernelProtocol, ModelGraph, build_model
from .core import ops
from .core.nn import Linear, Module
from .core.tensor import Parameter, Tensor


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: OptimizerState) -> None:
    """In place: ``v <- mu*v + g``; ``p <- p - lr*v``."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {name}")
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p)
        v *= state.momentum
        v += g
        p -= state.lr * v


class SGD:
    def __init__(self, named_params: Dict[str, Parameter], lr: float, momentum: float = 0.9):
        self.params = dict(named_params)
        self.state = OptimizerState(lr=lr, momentum=momentum)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        sgd_step({n: p.data for n, p in self.params.items()},
                 {n: p.grad for n, p in self.params.items() if p.grad is not None},
                 self.state)


class ScalarRegressor(Module):
    """Backbone -> global average pool of the last stage -> linear -> one value."""

    def __init__(self, graph: ModelGraph, zero_head: bool = False, seed: int = 0):
        super().__init__()
        self.graph = graph
        width = graph.backbone.stages[-1].out_ch
        self.readout = Linear(width, 1, rng=np.random.default_rng(seed + 1), zero_init=zero_head)

    def forward(self, x: Tensor) -> Tensor:
        feats = self.graph.backbone(x, self.graph.query)
        return ops.reshape(self.readout(ops.global_avg_pool(feats[-1])), (x.shape[0],))


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = ops.sub(pred, Tensor(np.asarray(target, dtype=pred.dtype)))
    return ops.mean(ops.mul(diff, diff))


@dataclass
class OverfitResult:
    losses: List[float]
    diverged: bool = False

    @property
    def initial(self) -> float:
        return self.losses[0]

    @property
    def final(self) -> float:
        return self.losses[-1]

    @property
    def ratio(self) -> float:
        return self.final / self.initial if self.initial > 0 else 0.0

    def to_csv(self) -> str:
        return "step,loss\n" + "".join(f"{i},{v:.10g}\n" for i, v in enumerate(self.losses))


def toy_data(samples: int = 8, size: int = 64, seed: int = 0):
    rng = np.random.default_rng(seed)
    images = rng.standard_normal((samples, 3, size, size))
    targets = rng.uniform(-1.0, 1.0, size=samples)
    return images, targets


def overfit_toy(variant="tiny", protocol: Sequence[int] = (3, 5, 7, 9), steps: int = 500,
                samples: int = 8, size: int = 64, lr: float = 0.01, momentum: float = 0.9,
                seed: int = 0, targets: Optional[np.ndarray] = None, freeze_query: bool = False,
                zero_head: bool = False, head_bias: Optional[float] = None,
                dtype=np.float64) -> OverfitResult:
    """Full-batch SGD on ``samples`` random images with scalar targets."""
    graph = build_model(variant, KernelProtocol(tuple(protocol), neck=False, head=False),
                        parts="backbone", seed=seed)
    model = ScalarRegressor(graph, zero_head=zero_head, seed=seed)
    if head_bias is not None:
        model.readout.bias.data[...] = head_bias
    model.astype(dtype).train()
    images, default_targets = toy_data(samples, size, seed)
    targets = default_targets if targets is None else np.asarray(targets, dtype=np.float64)
    if targets.shape != (samples,):
        raise ValueError(f"targets must have shape ({samples},), got {targets.shape}")
    x = Tensor(images.astype(dtype))

    params = dict(model.named_parameters())
    if freeze_query:
        params = {n: p for n, p in params.items() if not n.endswith("gql.query")}
    opt = SGD(params, lr=lr, momentum=momentum)

    losses: List[float] = []
    above = 0
    for _ in range(steps + 1):
        model.zero_grad()
        loss = mse(model(x), targets)
        value = loss.item()
        losses.append(value)
        if not np.isfinite(value):
            return OverfitResult(losses, diverged=True)
        above = above + 1 if value > 10 * losses[0] else 0
        if above >= 50:
            return OverfitResult(losses, diverged=True)
        if len(losses) > steps:
            break
        loss.backward()
        opt.step()
    return OverfitResult(losses)
