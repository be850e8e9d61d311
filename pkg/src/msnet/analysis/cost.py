"""Parameter and multiply-accumulate accounting.

MACs are gathered by running the model's real forward under a tracer: every
primitive reports its count instead of computing. Conventions: a convolution
costs ``k*k*(C_in/groups)*C_out*H_out*W_out``, a linear layer
``features_in*features_out`` per batch row, everything else (batch norm,
activations, pooling, elementwise) costs 0.
"""

from __future__ import annotations

import contextlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from ..core.nn import Module
from ..core.tensor import Parameter, Tensor, _tracing


class CostTracer:
    def __init__(self) -> None:
        self.records: List[dict] = []
        self._scopes: List[str] = []

    @contextlib.contextmanager
    def scope(self, path: str):
        self._scopes.append(path)
        try:
            yield
        finally:
            self._scopes.pop()

    def record(self, op: str, macs: int, out_shape, **info) -> None:
        path = self._scopes[-1] if self._scopes else ""
        self.records.append({"layer": path, "op": op, "macs": int(macs),
                             "out_shape": list(out_shape), **info})


def stage_of(path: str) -> str:
    """Group key for a hierarchical parameter/module name."""
    parts = path.split(".")
    if parts[0] == "backbone" and len(parts) > 1:
        return ".".join(parts[:2])
    return parts[0] if parts[0] else "root"


@dataclass
class CostReport:
    input_size: Tuple[int, int]
    layers: List[dict] = field(default_factory=list)
    stages: Dict[str, dict] = field(default_factory=dict)
    total_params: int = 0
    total_macs: int = 0

    def to_dict(self) -> dict:
        return {
            "input_size": list(self.input_size),
            "layers": self.layers,
            "stages": self.stages,
            "total_params": self.total_params,
            "total_macs": self.total_macs,
        }


def trace_macs(model: Module, x: Tensor, forward: Optional[Callable] = None) -> List[dict]:
    model.assign_paths()
    tracer = CostTracer()
    forward = forward or (lambda m, inp: m(inp))
    with _tracing(tracer):
        forward(model, x)
    return tracer.records


def count_params_macs(model: Module, input_size=(640, 640), in_channels: int = 3, batch: int = 1,
                      forward: Optional[Callable] = None) -> CostReport:
    """Exact learnable-element count and MAC count at ``input_size``."""
    h, w = input_size
    x = Tensor(np.broadcast_to(np.zeros((), dtype=np.float32), (batch, in_channels, h, w)))
    records = trace_macs(model, x, forward)

    layers: "OrderedDict[str, dict]" = OrderedDict()
    for name, mod in model.named_modules():
        own = [v for v in vars(mod).values() if isinstance(v, Parameter)]
        if own:
            layers[name] = {"name": name, "type": type(mod).__name__,
                            "params": int(sum(p.size for p in own)), "macs": 0}
    for rec in records:
        if rec["macs"] == 0:
            continue
        entry = layers.setdefault(rec["layer"], {"name": rec["layer"], "type": rec["op"],
                                                 "params": 0, "macs": 0})
        entry["macs"] += rec["macs"]

    stages: Dict[str, dict] = OrderedDict()
    for entry in layers.values():
        s = stages.setdefault(stage_of(entry["name"]), {"params": 0, "macs": 0})
        s["params"] += entry["params"]
        s["macs"] += entry["macs"]
    report = CostReport(input_size=(h, w), layers=list(layers.values()), stages=dict(stages))
    report.total_params = int(sum(e["params"] for e in report.layers))
    report.total_macs = int(sum(e["macs"] for e in report.layers))
    return report
