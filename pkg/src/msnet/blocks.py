"""Hierarchical multi-branch block with inverted-bottleneck branches and query gating.

Chaining rule of the block (``X_i`` are the groups of the entry projection)::

    Y_1 = X_1
    Y_i = F(Y_{i-1} + X_i)        i > 1

where ``F`` is an inverted bottleneck (IBM: expand -> depthwise -> project)
or its simplified form without the projection (SIBM). SIBM widens a branch
from ``w`` to ``r*w``, so the carried sum is formed after the expansion:
``Y_i = DW(EXP(X_i) + Y_{i-1})`` with ``Y_1`` not carried (``Y_2 = DW(EXP(X_2))``).
"""

from __future__ import annotations

from typing import Callable, List, Optional, Sequence

import numpy as np

from .core import ops
from .core.nn import ConvBNAct, Linear, Module, ModuleList
from .core.tensor import Parameter, Tensor

IBM = "ibm"
SIBM = "sibm"


def make_divisible(value: float, divisor: int = 8, min_value: Optional[int] = None) -> int:
    """Round to the nearest multiple of ``divisor`` (never below ``min_value``)."""
    min_value = divisor if min_value is None else min_value
    return max(min_value, int(value / divisor + 0.5) * divisor)


class BranchOperator(Module):
    """One (S)IBM branch. Output width is ``width`` for IBM and ``expansion*width`` for SIBM."""

    def __init__(self, width: int, kernel: int, mode: str = IBM, expansion: int = 2,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        if mode not in (IBM, SIBM):
            raise ValueError(f"unknown branch mode {mode!r}")
        if kernel % 2 == 0 or kernel < 1:
            raise ValueError(f"branch kernel must be odd, got {kernel}")
        if expansion < 1:
            raise ValueError(f"expansion must be >= 1, got {expansion}")
        self.mode, self.width, self.kernel, self.expansion = mode, width, kernel, expansion
        hidden = expansion * width
        self.expand = ConvBNAct(width, hidden, 1, rng=rng)
        self.depthwise = ConvBNAct(hidden, hidden, kernel, groups=hidden, rng=rng)
        self.project = ConvBNAct(hidden, width, 1, rng=rng) if mode == IBM else None

    @property
    def out_width(self) -> int:
        return self.width if self.mode == IBM else self.expansion * self.width

    def forward(self, x: Tensor, carry: Optional[Tensor] = None) -> Tensor:
        return branch_forward(x, self, carry)


def branch_forward(x: Tensor, params: BranchOperator, carry: Optional[Tensor] = None) -> Tensor:
    """Apply one branch operator; ``carry`` is the previous branch output ``Y_{i-1}``."""
    if x.shape[1] != params.width:
        raise ValueError(f"branch expects {params.width} channels, got {x.shape[1]}")
    if params.mode == IBM:
        if carry is not None:
            x = ops.add(x, carry)
        return params.project(params.depthwise(params.expand(x)))
    h = params.expand(x)
    if carry is not None:
        if carry.shape[1] != h.shape[1]:
            raise ValueError(f"SIBM carry has {carry.shape[1]} channels, expected {h.shape[1]}")
        h = ops.add(h, carry)
    return params.depthwise(h)


class GlobalQuery(Module):
    """Learnable query shared by every gated block of a model, shape (branches, dim)."""

    def __init__(self, branches: int = 3, dim: int = 16, rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.query = Parameter(rng.uniform(-0.02, 0.02, size=(branches, dim)))

    @property
    def branches(self) -> int:
        return self.query.shape[0]

    @property
    def dim(self) -> int:
        return self.query.shape[1]


def gql_gates(y: Tensor, query: Tensor, proj: Linear) -> Tensor:
    """Per-branch gates ``sigmoid(Q . K)`` with ``K = proj(GAP(y))``; shape (batch, branches)."""
    if query.ndim != 2:
        raise ValueError(f"query must be rank 2, got shape {query.shape}")
    if proj.weight.shape[1] != y.shape[1]:
        raise ValueError(f"projection expects {proj.weight.shape[1]} channels, got {y.shape[1]}")
    if proj.weight.shape[0] != query.shape[1]:
        raise ValueError(f"projection emits {proj.weight.shape[0]} features but query dim is {query.shape[1]}")
    key = proj(ops.global_avg_pool(y))
    return ops.sigmoid(ops.linear(key, query))


def apply_branch_gates(branches: Sequence[Tensor], gates: Tensor) -> List[Tensor]:
    """Scale branch ``i`` of every batch element by ``gates[:, i]``."""
    if gates.ndim != 2 or gates.shape[1] != len(branches):
        raise ValueError(f"{len(branches)} branches but gates have shape {gates.shape}")
    if len(branches) == 1:
        cols = [gates]
    else:
        cols = ops.channel_split(gates, [1] * len(branches))
    b = gates.shape[0]
    return [ops.mul(y, ops.reshape(g, (b, 1, 1, 1))) for y, g in zip(branches, cols)]


class MSBlock(Module):
    """Entry 1x1 -> split into ``n_branches`` groups -> chained branches -> concat -> exit 1x1."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, mode: str = SIBM,
                 n_branches: int = 3, branch_width: Optional[int] = None, expansion: int = 2,
                 gql_dim: Optional[int] = None, rng: Optional[np.random.Generator] = None):
        super().__init__()
        if n_branches < 2:
            raise ValueError(f"a block needs at least 2 branches, got {n_branches}")
        if mode not in (IBM, SIBM):
            raise ValueError(f"unknown branch mode {mode!r}")
        w = branch_width if branch_width is not None else make_divisible(out_ch / n_branches)
        self.in_ch, self.out_ch, self.kernel, self.mode = in_ch, out_ch, kernel, mode
        self.n_branches, self.branch_width, self.expansion = n_branches, w, expansion
        self.entry = ConvBNAct(in_ch, n_branches * w, 1, rng=rng)
        self.branches = ModuleList(
            BranchOperator(w, kernel, mode, expansion, rng=rng) for _ in range(n_branches - 1))
        self.gql_proj = Linear(n_branches * w, gql_dim, rng=rng) if gql_dim else None
        self.exit = ConvBNAct(self.concat_width, out_ch, 1, rng=rng)
        self._recorder: Optional[list] = None

    @property
    def concat_width(self) -> int:
        return self.branch_width + sum(b.out_width for b in self.branches)

    def forward(self, z: Tensor, query: Optional[Tensor] = None) -> Tensor:
        return ms_block_forward(z, self, query)


BranchFn = Callable[[int, Tensor, Optional[Tensor]], Tensor]


def ms_block_forward(z: Tensor, block: MSBlock, query: Optional[Tensor] = None,
                     branch_fn: Optional[BranchFn] = None) -> Tensor:
    """Forward one block.

    ``query`` enables gating when the block owns a projection. ``branch_fn``
    replaces the branch operators (called as ``branch_fn(i, x_i, y_prev)``,
    ``i`` counting from 1) and applies the chaining rule literally; it exists
    for structural tests.
    """
    if z.ndim != 4 or z.shape[1] != block.in_ch:
        raise ValueError(f"block expects {block.in_ch} input channels, got shape {z.shape}")
    if query is not None:
        if block.gql_proj is None:
            raise ValueError("query given but block has no gating projection")
        if query.shape[0] != block.n_branches:
            raise ValueError(f"query has {query.shape[0]} rows but block has {block.n_branches} branches")
    x = block.entry(z)
    groups = ops.channel_split(x, [block.branch_width] * block.n_branches)
    outs = [groups[0]]
    for i in range(1, block.n_branches):
        if branch_fn is not None:
            outs.append(branch_fn(i + 1, groups[i], outs[-1]))
            continue
        op = block.branches[i - 1]
        carry = outs[-1] if (op.mode == IBM or i > 1) else None
        outs.append(op(groups[i], carry))
    if query is not None:
        outs = apply_branch_gates(outs, gql_gates(x, query, block.gql_proj))
    if block._recorder is not None:
        block._recorder.append([o.data for o in outs])
    return block.exit(ops.channel_concat(outs))
