"""Backbone + SPP + PAFPN neck + per-level head, assembled from MS-Blocks.

Layout for an ``H x W`` image (H, W divisible by 32)::

    stem 3x3/2 -> [down 3x3/2 -> stage1] -> down -> stage2 -> down -> stage3 + SPP
               -> down -> stage4

Stages 1-4 therefore run at strides 4, 8, 16 and 32. The neck fuses the
stage 2-4 outputs at half their channel width; the head runs per level.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .blocks import IBM, SIBM, GlobalQuery, MSBlock, make_divisible
from .core import ops
from .core.nn import Conv2d, ConvBNAct, Module, ModuleList
from .core.tensor import Tensor

PARTS = ("backbone", "neck", "full")
LEVELS = (2, 3, 4)  # backbone stages tapped by the neck


@dataclass(frozen=True)
class KernelProtocol:
    """Depthwise kernel size per stage; optionally carried into the neck and head levels."""

    kernels: Tuple[int, int, int, int] = (3, 5, 7, 9)
    neck: bool = True
    head: bool = True
    default_kernel: int = 3

    def __post_init__(self):
        ks = tuple(int(k) for k in self.kernels)
        if len(ks) != 4:
            raise ValueError(f"protocol needs 4 kernel sizes, got {len(ks)}")
        for k in ks + (self.default_kernel,):
            if k < 3 or k % 2 == 0:
                raise ValueError(f"kernel sizes must be odd and >= 3, got {k}")
        object.__setattr__(self, "kernels", ks)

    @classmethod
    def parse(cls, text: str, **kw) -> "KernelProtocol":
        return cls(tuple(int(t) for t in str(text).replace("[", "").replace("]", "").split(",")), **kw)

    def stage_kernel(self, stage: int) -> int:
        return self.kernels[stage - 1]

    def neck_kernel(self, level: int) -> int:
        return self.kernels[level - 1] if self.neck else self.default_kernel

    def head_kernel(self, level: int) -> int:
        return self.kernels[level - 1] if self.head else self.default_kernel


@dataclass(frozen=True)
class ModelVariant:
    """Declarative model configuration.

    ``module_types`` gives the branch type for stages 1-2 and for stages 3-4
    (the neck follows the type of its level's stage). ``base_channels`` are
    stem and stage 1-4 widths before ``widen`` scaling.
    """

    name: str = "custom"
    widen: float = 1.0
    module_types: Tuple[str, str] = (SIBM, SIBM)
    blocks_per_stage: Tuple[int, int, int, int] = (2, 2, 2, 2)
    expansion: int = 2
    base_channels: Tuple[int, int, int, int, int] = (32, 64, 128, 256, 512)
    n_branches: int = 3
    gql_stages: Tuple[int, ...] = (2, 3, 4)
    query_dim: int = 16
    num_classes: int = 80
    branch_ratio: Tuple[float, float, float, float] = (2.25, 2.25, 0.75, 0.75)
    head_units: int = 2
    head_towers: int = 1
    stem_convs: int = 1
    downsample_stage1: bool = True
    min_branch_width: int = 8

    def __post_init__(self):
        for t in self.module_types:
            if t not in (IBM, SIBM):
                raise ValueError(f"unknown module type {t!r}")
        if len(self.module_types) != 2:
            raise ValueError("module_types needs one entry per stage half")
        if len(self.blocks_per_stage) != 4 or min(self.blocks_per_stage) < 1:
            raise ValueError(f"blocks_per_stage must be 4 positive ints, got {self.blocks_per_stage}")
        if len(self.base_channels) != 5:
            raise ValueError("base_channels needs stem + 4 stage widths")
        if self.n_branches < 2:
            raise ValueError("n_branches must be >= 2")
        if any(s not in (1, 2, 3, 4) for s in self.gql_stages):
            raise ValueError(f"gql_stages must be a subset of 1..4, got {self.gql_stages}")
        if self.widen <= 0 or self.expansion < 1 or self.query_dim < 1:
            raise ValueError("widen, expansion and query_dim must be positive")

    @property
    def channels(self) -> Tuple[int, ...]:
        return tuple(make_divisible(c * self.widen) for c in self.base_channels)

    def module_type(self, stage: int) -> str:
        return self.module_types[0] if stage <= 2 else self.module_types[1]

    def branch_width(self, out_ch: int, level: int) -> int:
        ratio = self.branch_ratio[level - 1]
        return make_divisible(out_ch * ratio / self.n_branches, 8, self.min_branch_width)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


VARIANTS: Dict[str, ModelVariant] = {
    "xs": ModelVariant(name="xs", widen=1.050, module_types=(SIBM, SIBM)),
    "s": ModelVariant(name="s", widen=1.375, module_types=(SIBM, SIBM)),
    "m": ModelVariant(name="m", widen=2.175, module_types=(SIBM, IBM)),
    # toy scale for the trainability harness: every stage width <= 16
    "tiny": ModelVariant(name="tiny", widen=1.0, base_channels=(8, 8, 16, 16, 16),
                         blocks_per_stage=(1, 1, 1, 1), min_branch_width=4, branch_ratio=(1.0, 1.0, 1.0, 1.0),
                         num_classes=4),
}


def get_variant(name_or_variant) -> ModelVariant:
    if isinstance(name_or_variant, ModelVariant):
        return name_or_variant
    key = str(name_or_variant).lower()
    if key not in VARIANTS:
        raise ValueError(f"unknown variant {name_or_variant!r}; choose from {sorted(VARIANTS)}")
    return VARIANTS[key]


# ---------------------------------------------------------------------------
# components


class SPP(Module):
    """Parallel stride-1 max pools concatenated with the input, fused by a 1x1 conv."""

    def __init__(self, channels: int, pool_sizes: Sequence[int] = (5, 9, 13), rng=None):
        super().__init__()
        self.pool_sizes = tuple(pool_sizes)
        self.fuse = ConvBNAct(channels * (len(self.pool_sizes) + 1), channels, 1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return spp_forward(x, self)


def spp_pools(x: Tensor, pool_sizes: Sequence[int]) -> List[Tensor]:
    # same-padding: a k-window always fits an extent >= 1 padded by k // 2
    return [x] + [ops.max_pool2d(x, k, 1, k // 2) for k in pool_sizes]


def spp_forward(x: Tensor, params: SPP) -> Tensor:
    return params.fuse(ops.channel_concat(spp_pools(x, params.pool_sizes)))


class Stage(Module):
    def __init__(self, index: int, in_ch: int, out_ch: int, variant: ModelVariant, kernel: int,
                 downsample: bool, gql: bool, spp: bool, rng=None):
        super().__init__()
        self.index, self.kernel, self.gql, self.out_ch = index, kernel, gql, out_ch
        self.down = ConvBNAct(in_ch, out_ch, 3, stride=2, rng=rng) if downsample else None
        c = out_ch if downsample else in_ch
        blocks = []
        for _ in range(variant.blocks_per_stage[index - 1]):
            blocks.append(MSBlock(c, out_ch, kernel, variant.module_type(index), variant.n_branches,
                                  variant.branch_width(out_ch, index), variant.expansion,
                                  gql_dim=variant.query_dim if gql else None, rng=rng))
            c = out_ch
        self.blocks = ModuleList(blocks)
        self.spp = SPP(out_ch, rng=rng) if spp else None

    def forward(self, x: Tensor, query: Optional[Tensor] = None) -> Tensor:
        if self.down is not None:
            x = self.down(x)
        for block in self.blocks:
            x = block(x, query if self.gql else None)
        if self.spp is not None:
            x = self.spp(x)
        return x


class Stem(Module):
    """3x3 stride-2 conv, optionally followed by two stride-1 3x3 convs."""

    def __init__(self, out_ch: int, n_convs: int = 1, rng=None):
        super().__init__()
        if n_convs not in (1, 3):
            raise ValueError(f"stem supports 1 or 3 convs, got {n_convs}")
        if n_convs == 1:
            self.layers = ModuleList([ConvBNAct(3, out_ch, 3, stride=2, rng=rng)])
        else:
            mid = make_divisible(out_ch / 2)
            self.layers = ModuleList([ConvBNAct(3, mid, 3, stride=2, rng=rng),
                                      ConvBNAct(mid, mid, 3, rng=rng),
                                      ConvBNAct(mid, out_ch, 3, rng=rng)])

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


class Backbone(Module):
    def __init__(self, variant: ModelVariant, protocol: KernelProtocol, rng=None):
        super().__init__()
        ch = variant.channels
        self.stem = Stem(ch[0], variant.stem_convs, rng=rng)
        for i in range(1, 5):
            setattr(self, f"stage{i}", Stage(i, ch[i - 1], ch[i], variant, protocol.stage_kernel(i),
                                             downsample=(i > 1 or variant.downsample_stage1),
                                             gql=i in variant.gql_stages, spp=(i == 3), rng=rng))

    @property
    def stages(self) -> List["Stage"]:
        return [self.stage1, self.stage2, self.stage3, self.stage4]

    def forward(self, x: Tensor, query: Optional[Tensor] = None, upto: int = 4) -> List[Tensor]:
        """Return the outputs of stages 1..``upto``."""
        x = self.stem(x)
        feats = []
        for stage in self.stages[:upto]:
            x = stage(x, query)
            feats.append(x)
        return feats


class PAFPN(Module):
    """Top-down then bottom-up fusion over stage 2-4 features at halved width.

    Each fusion node concatenates (nearest x2 upsample | 3x3 stride-2 conv)
    output with the lateral feature and runs one MS-Block.
    """

    def __init__(self, in_channels: Sequence[int], variant: ModelVariant, protocol: KernelProtocol, rng=None):
        super().__init__()
        c2, c3, c4 = in_channels
        n2, n3, n4 = (make_divisible(c / 2) for c in in_channels)
        self.out_channels = (n2, n3, n4)
        k2, k3, k4 = (protocol.neck_kernel(lv) for lv in LEVELS)

        def block(cin, cout, k, level):
            return MSBlock(cin, cout, k, variant.module_type(level), variant.n_branches,
                           variant.branch_width(cout, level), variant.expansion, rng=rng)

        self.lateral2 = ConvBNAct(c2, n2, 1, rng=rng)
        self.lateral3 = ConvBNAct(c3, n3, 1, rng=rng)
        self.lateral4 = ConvBNAct(c4, n4, 1, rng=rng)
        self.reduce4 = ConvBNAct(n4, n3, 1, rng=rng)
        self.top_down3 = block(2 * n3, n3, k3, 3)
        self.reduce3 = ConvBNAct(n3, n2, 1, rng=rng)
        self.top_down2 = block(2 * n2, n2, k2, 2)
        self.down2 = ConvBNAct(n2, n2, 3, stride=2, rng=rng)
        self.bottom_up3 = block(n2 + n3, n3, k3, 3)
        self.down3 = ConvBNAct(n3, n3, 3, stride=2, rng=rng)
        self.bottom_up4 = block(n3 + n4, n4, k4, 4)

    def forward(self, feats: Sequence[Tensor]) -> List[Tensor]:
        c2, c3, c4 = feats
        l2, l3, l4 = self.lateral2(c2), self.lateral3(c3), self.lateral4(c4)
        t3 = self.top_down3(ops.channel_concat([ops.upsample_nearest(self.reduce4(l4)), l3]))
        o2 = self.top_down2(ops.channel_concat([ops.upsample_nearest(self.reduce3(t3)), l2]))
        o3 = self.bottom_up3(ops.channel_concat([self.down2(o2), t3]))
        o4 = self.bottom_up4(ops.channel_concat([self.down3(o3), l4]))
        return [o2, o3, o4]


class HeadLevel(Module):
    """Depthwise kxk + pointwise units feeding a 1x1 prediction conv.

    With one tower a shared stack emits classes and box values together; with
    two towers classification and box regression get separate stacks.
    """

    def __init__(self, channels: int, kernel: int, units: int, num_classes: int, towers: int = 1, rng=None):
        super().__init__()
        if towers not in (1, 2):
            raise ValueError(f"head supports 1 or 2 towers, got {towers}")
        self.kernel, self.towers = kernel, towers

        def tower():
            layers = []
            for _ in range(units):
                layers.append(ConvBNAct(channels, channels, kernel, groups=channels, rng=rng))
                layers.append(ConvBNAct(channels, channels, 1, rng=rng))
            return ModuleList(layers)

        self.cls_tower = tower()
        self.reg_tower = tower() if towers == 2 else None
        if towers == 1:
            self.pred = Conv2d(channels, num_classes + 4, 1, bias=True, rng=rng)
        else:
            self.cls_pred = Conv2d(channels, num_classes, 1, bias=True, rng=rng)
            self.reg_pred = Conv2d(channels, 4, 1, bias=True, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        c = x
        for layer in self.cls_tower:
            c = layer(c)
        if self.towers == 1:
            return self.pred(c)
        r = x
        for layer in self.reg_tower:
            r = layer(r)
        return ops.channel_concat([self.cls_pred(c), self.reg_pred(r)])


class Head(Module):
    """Per-level heads emitting ``num_classes + 4`` values per cell."""

    def __init__(self, channels: Sequence[int], variant: ModelVariant, protocol: KernelProtocol, rng=None):
        super().__init__()
        self.out_per_cell = variant.num_classes + 4
        self.levels = ModuleList(
            HeadLevel(c, protocol.head_kernel(lv), variant.head_units, variant.num_classes,
                      variant.head_towers, rng=rng)
            for c, lv in zip(channels, LEVELS))

    def forward(self, feats: Sequence[Tensor]) -> List[Tensor]:
        return [level(f) for level, f in zip(self.levels, feats)]


class ModelGraph(Module):
    """A constructed model: backbone (+ neck (+ head)) with a shared global query."""

    def __init__(self, variant: ModelVariant, protocol: KernelProtocol, parts: str = "full", seed: int = 0):
        super().__init__()
        if parts not in PARTS:
            raise ValueError(f"unknown parts {parts!r}; choose from {PARTS}")
        rng = np.random.default_rng(seed)
        self.variant, self.protocol, self.parts, self.seed = variant, protocol, parts, seed
        self.gql = GlobalQuery(variant.n_branches, variant.query_dim, rng=rng) if variant.gql_stages else None
        self.backbone = Backbone(variant, protocol, rng=rng)
        ch = variant.channels
        self.neck = PAFPN(ch[2:5], variant, protocol, rng=rng) if parts in ("neck", "full") else None
        self.head = Head(self.neck.out_channels, variant, protocol, rng=rng) if parts == "full" else None
        self.assign_paths()

    @property
    def query(self) -> Optional[Tensor]:
        return self.gql.query if self.gql is not None else None

    def metadata(self) -> dict:
        v = self.variant
        stages = []
        for st in self.backbone.stages:
            b0 = st.blocks[0]
            stages.append({"stage": st.index, "channels": b0.out_ch, "kernel": st.kernel,
                           "blocks": len(st.blocks), "module_type": b0.mode,
                           "branch_width": b0.branch_width, "gql": st.gql, "spp": st.spp is not None})
        meta = {"variant": v.name, "widen": v.widen, "protocol": list(self.protocol.kernels),
                "neck_hks": self.protocol.neck, "head_hks": self.protocol.head,
                "parts": self.parts, "seed": self.seed, "stem_channels": v.channels[0], "stages": stages}
        if self.neck is not None:
            meta["neck_channels"] = list(self.neck.out_channels)
        return meta

    def forward(self, image: Tensor) -> Dict[str, List[Tensor]]:
        return forward_features(self, image)


def build_model(variant="xs", protocol=(3, 5, 7, 9), parts: str = "full", seed: int = 0) -> ModelGraph:
    """Construct a model deterministically from ``seed``."""
    variant = get_variant(variant)
    if not isinstance(protocol, KernelProtocol):
        protocol = KernelProtocol(tuple(protocol))
    return ModelGraph(variant, protocol, parts, seed)


def forward_features(model: ModelGraph, image: Tensor) -> Dict[str, List[Tensor]]:
    """Stage outputs, plus neck and head outputs when those parts were built."""
    if image.ndim != 4 or image.shape[1] != 3:
        raise ValueError(f"image must be (N, 3, H, W), got shape {image.shape}")
    h, w = image.shape[2], image.shape[3]
    if h % 32 or w % 32 or h == 0 or w == 0:
        raise ValueError(f"image extents must be positive multiples of 32, got {h}x{w}")
    out = {"stages": model.backbone(image, model.query)}
    if model.neck is not None:
        out["neck"] = model.neck(out["stages"][1:4])
    if model.head is not None:
        out["head"] = model.head(out["neck"])
    return out


def depthwise_kernels(model: ModelGraph) -> Dict[str, int]:
    """Kernel size of every depthwise convolution, keyed by module path."""
    return {name: m.k for name, m in model.named_modules() if isinstance(m, Conv2d) and m.depthwise}
