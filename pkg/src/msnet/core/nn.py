"""Parameter containers: a small module tree in the style of torch.nn."""

from __future__ import annotations

from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import ops
from .tensor import Parameter, Tensor, current_tracer


class Module:
    """Base class; children, parameters and buffers are discovered from attributes.

    Attribute insertion order fixes the hierarchical names, so two models built
    the same way always enumerate parameters identically.
    """

    _buffer_names: Tuple[str, ...] = ()

    def __init__(self) -> None:
        self.training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        tracer = current_tracer()
        if tracer is None:
            return self.forward(*args, **kwargs)
        with tracer.scope(getattr(self, "_path", "")):
            return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, ModuleList):
                for i, m in enumerate(value):
                    yield f"{name}.{i}", m

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def modules(self) -> Iterator["Module"]:
        for _, m in self.named_modules():
            yield m

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for mod_name, mod in self.named_modules(prefix):
            for name, value in vars(mod).items():
                if isinstance(value, Parameter):
                    yield (f"{mod_name}.{name}" if mod_name else name), value

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for mod_name, mod in self.named_modules(prefix):
            for name in mod._buffer_names:
                yield (f"{mod_name}.{name}" if mod_name else name), getattr(mod, name)

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Parameters and buffers by hierarchical name (arrays are live references)."""
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        bad = sorted(n for n in set(own) & set(state) if np.shape(state[n]) != own[n].shape)
        if missing or unexpected or bad:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected} shape={bad}")
        params = dict(self.named_parameters())
        for name, value in state.items():
            if name in params:
                params[name].data = np.array(value, dtype=params[name].dtype)
            else:
                own[name][...] = value

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        """Cast every parameter and buffer to ``dtype`` in place."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        for m in self.modules():
            for name in m._buffer_names:
                setattr(m, name, getattr(m, name).astype(dtype))
        return self

    def assign_paths(self) -> None:
        for name, m in self.named_modules():
            m._path = name


class ModuleList(list):
    """A list of modules that participates in naming."""


def _he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int = 1, groups: int = 1,
                 bias: bool = False, padding: Optional[int] = None,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        if k % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {k}")
        if in_ch % groups or out_ch % groups:
            raise ValueError(f"channels {in_ch}->{out_ch} not divisible by groups {groups}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch, self.out_ch, self.k = in_ch, out_ch, k
        self.stride, self.groups = stride, groups
        self.padding = (k - 1) // 2 if padding is None else padding
        fan_in = in_ch // groups * k * k
        self.weight = Parameter(_he_normal(rng, (out_ch, in_ch // groups, k, k), fan_in))
        self.bias = Parameter(np.zeros(out_ch)) if bias else None

    @property
    def depthwise(self) -> bool:
        return self.groups > 1 and self.groups == self.in_ch == self.out_ch

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              self.eps, self.momentum, self.training)


class ConvBNAct(Module):
    """Convolution (no bias), batch norm, optional SiLU."""

    def __init__(self, in_ch: int, out_ch: int, k: int = 1, stride: int = 1, groups: int = 1,
                 act: bool = True, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, k, stride, groups, rng=rng)
        self.bn = BatchNorm2d(out_ch)
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        return ops.silu(y) if self.act else y


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 rng: Optional[np.random.Generator] = None, zero_init: bool = False):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        if zero_init:
            w = np.zeros((out_features, in_features))
        else:
            w = rng.normal(0.0, np.sqrt(1.0 / in_features), size=(out_features, in_features))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)
