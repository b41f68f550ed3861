"""Inverted-bottleneck backbones with lite residual side branches.

A block runs expand (1x1) -> depthwise (k x k) -> project (1x1), each conv
followed by group norm and a learnable per-channel bias; the bias sits
after the norm so it survives standardization. Stride-1 blocks with equal
channel counts take an identity skip. A lite residual branch taps the
block input, works at reduced resolution and width (2x2 pooling, a single
grouped conv), and is upsampled back onto the block output:

    out = main(x) + x (if skip) + lite(x) (if present)

The branch's final norm scale starts at zero, so a freshly built model
computes exactly what the branch-free model computes; the branch fades in
through training.

Parameters are drawn per-name from a seeded stream, which keeps shared
layers bit-identical across variants that add or remove branches.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .autograd import Parameter, Tape, Tensor, add
from .layers import (
    ConvSpec,
    NormSpec,
    activation,
    avg_pool2,
    bias_add,
    bilinear_upsample,
    conv2d,
    global_avg_pool,
    group_norm,
)
from .autograd import linear_forward
from .layers import _group_stats

__all__ = [
    "GROUP_WEIGHT",
    "GROUP_BIAS",
    "GROUP_NORM",
    "GROUP_LITE",
    "GROUP_HEAD",
    "PARAM_GROUPS",
    "LiteResidualSpec",
    "MBBlockSpec",
    "ArchitectureSpec",
    "ConvUnit",
    "LiteBranch",
    "MBBlock",
    "Head",
    "Model",
    "build_backbone",
    "capture_norm_stats",
]

GROUP_WEIGHT = "weight"
GROUP_BIAS = "bias"
GROUP_NORM = "norm"
GROUP_LITE = "lite"
GROUP_HEAD = "head"
PARAM_GROUPS = (GROUP_WEIGHT, GROUP_BIAS, GROUP_NORM, GROUP_LITE, GROUP_HEAD)


@dataclass(frozen=True)
class LiteResidualSpec:
    kernel: int = 5
    groups: int = 2
    downsample: int = 2

    def __post_init__(self):
        if self.kernel % 2 != 1:
            raise ValueError("lite branch kernel must be odd")
        if self.downsample < 1 or self.downsample & (self.downsample - 1):
            raise ValueError("downsample must be a power of two")

    @property
    def pool_steps(self) -> int:
        return self.downsample.bit_length() - 1


@dataclass(frozen=True)
class MBBlockSpec:
    in_channels: int
    out_channels: int
    expand: int
    kernel: int
    stride: int = 1
    lite: LiteResidualSpec | None = None

    @property
    def mid_channels(self) -> int:
        return self.in_channels * self.expand

    @property
    def has_skip(self) -> bool:
        return self.stride == 1 and self.in_channels == self.out_channels


@dataclass(frozen=True)
class ArchitectureSpec:
    stem_channels: int
    stages: tuple
    stem_kernel: int = 3
    stem_stride: int = 2
    in_channels: int = 3
    resolution: int = 224

    def validate(self) -> "ArchitectureSpec":
        if self.stem_stride not in (1, 2):
            raise ValueError(f"stem stride must be 1 or 2, got {self.stem_stride}")
        prev = self.stem_channels
        for si, stage in enumerate(self.stages):
            if not stage:
                raise ValueError(f"stage {si} is empty")
            for bi, blk in enumerate(stage):
                if bi == 0:
                    if blk.in_channels != prev:
                        raise ValueError(
                            f"stage {si} block 0 expects {blk.in_channels} input channels, "
                            f"previous stage produces {prev}"
                        )
                else:
                    if blk.stride != 1:
                        raise ValueError(f"stage {si} block {bi}: only the first block may downsample")
                    if blk.in_channels != blk.out_channels or blk.in_channels != prev:
                        raise ValueError(f"stage {si} block {bi}: interior blocks keep the stage width")
                if blk.lite is not None and blk.lite.downsample < blk.stride:
                    # the branch must not end up finer than the block output,
                    # upsampling only enlarges
                    raise ValueError(
                        f"stage {si} block {bi}: lite downsample {blk.lite.downsample} "
                        f"is below the block stride {blk.stride}"
                    )
                prev = blk.out_channels
        return self

    @property
    def final_channels(self) -> int:
        return self.stages[-1][-1].out_channels

    def all_blocks(self):
        for stage in self.stages:
            yield from stage


def _param_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class _RandomInit:
    """He fan-in normals for conv/linear weights, ones for norm scales
    (zero for the lite branch's final scale), zeros for every bias."""

    def __init__(self, seed: int, dtype):
        self.seed = seed
        self.dtype = dtype

    def __call__(self, name: str, shape: tuple, group: str, kind: str, fan_in: int) -> Parameter:
        if kind == "weight":
            data = _param_rng(self.seed, name).normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif kind == "scale":
            data = np.ones(shape)
        else:  # "zeros" covers biases, norm shifts, and zeroed scales
            data = np.zeros(shape)
        return Parameter(name, data.astype(self.dtype), group)


class _CopyInit:
    """Copies named arrays from a source store; anything absent (a fresh
    head, newly attached branches) falls back to the random rules."""

    def __init__(self, source: dict, seed: int, dtype):
        self.source = source
        self.fallback = _RandomInit(seed, dtype)
        self.dtype = dtype

    def __call__(self, name, shape, group, kind, fan_in):
        if name in self.source:
            data = np.array(self.source[name], dtype=self.dtype)
            if data.shape != tuple(shape):
                raise ValueError(f"source parameter {name!r} has shape {data.shape}, expected {shape}")
            return Parameter(name, data, group)
        return self.fallback(name, shape, group, kind, fan_in)


class ConvUnit:
    """conv -> group norm -> bias (-> activation)."""

    def __init__(self, name, conv_spec: ConvSpec, act: str | None, make):
        self.name = name
        self.conv_spec = conv_spec
        self.norm_spec = NormSpec(conv_spec.out_channels)
        self.act = act
        group = make.group
        self.weight = make(f"{name}.weight", conv_spec.weight_shape(),
                           group or GROUP_WEIGHT, "weight",
                           (conv_spec.in_channels // conv_spec.groups) * conv_spec.kernel ** 2)
        scale_kind = "zeros" if make.zero_scale else "scale"
        self.gamma = make(f"{name}.norm.gamma", (conv_spec.out_channels,), group or GROUP_NORM, scale_kind, 0)
        self.beta = make(f"{name}.norm.beta", (conv_spec.out_channels,), group or GROUP_NORM, "zeros", 0)
        self.bias = make(f"{name}.bias", (conv_spec.out_channels,), group or GROUP_BIAS, "zeros", 0)

    def parameters(self):
        return [self.weight, self.gamma, self.beta, self.bias]

    def forward(self, x: Tensor, tape, stats_cache=None, gates=None) -> Tensor:
        t = conv2d(x, self.conv_spec, self.weight, None, tape)
        st = None
        if stats_cache is not None and not self.gamma.trainable:
            key = f"{self.name}.norm"
            st = stats_cache.get(key)
            if st is None:
                st = _group_stats(t.data, self.norm_spec)
                stats_cache[key] = st
        t = group_norm(t, self.norm_spec, self.gamma, self.beta, tape, stats=st)
        t = bias_add(t, self.bias, tape)
        if self.act:
            t = activation(t, self.act, tape, gates)
        return t


class _Maker:
    """Parameter factory bound to a group override and scale policy."""

    def __init__(self, factory, group=None, zero_scale=False):
        self.factory = factory
        self.group = group
        self.zero_scale = zero_scale

    def __call__(self, name, shape, group, kind, fan_in):
        return self.factory(name, shape, group, kind, fan_in)


class LiteBranch:
    """pool -> grouped conv -> norm (zero scale at init) -> bias -> relu -> upsample."""

    def __init__(self, name, block_spec: MBBlockSpec, make_factory):
        spec = block_spec.lite
        self.name = name
        self.spec = spec
        self.conv_spec = ConvSpec(
            block_spec.in_channels,
            block_spec.out_channels,
            spec.kernel,
            stride=1,
            groups=spec.groups,
            weight_standardized=True,
        )
        make = _Maker(make_factory, group=GROUP_LITE, zero_scale=True)
        self.unit = ConvUnit(name, self.conv_spec, "relu", make)

    def parameters(self):
        return self.unit.parameters()

    def forward(self, x: Tensor, out_hw: tuple, tape, stats_cache=None, gates=None) -> Tensor:
        t = x
        for _ in range(self.spec.pool_steps):
            t = avg_pool2(t, tape)
        t = self.unit.forward(t, tape, stats_cache, gates)
        return bilinear_upsample(t, out_hw[0], out_hw[1], tape)


class MBBlock:
    def __init__(self, name, spec: MBBlockSpec, make_factory):
        self.name = name
        self.spec = spec
        make = _Maker(make_factory)
        mid = spec.mid_channels
        self.expand_unit = ConvUnit(
            f"{name}.expand", ConvSpec(spec.in_channels, mid, 1, weight_standardized=True), "relu", make
        )
        self.depthwise_unit = ConvUnit(
            f"{name}.depthwise",
            ConvSpec(mid, mid, spec.kernel, stride=spec.stride, groups=mid, weight_standardized=True),
            "relu",
            make,
        )
        self.project_unit = ConvUnit(
            f"{name}.project", ConvSpec(mid, spec.out_channels, 1, weight_standardized=True), None, make
        )
        self.lite = LiteBranch(f"{name}.lite", spec, make_factory) if spec.lite else None

    @property
    def units(self):
        return [self.expand_unit, self.depthwise_unit, self.project_unit]

    def parameters(self):
        ps = []
        for u in self.units:
            ps.extend(u.parameters())
        if self.lite:
            ps.extend(self.lite.parameters())
        return ps

    def forward(self, x: Tensor, tape, stats_cache=None, gates=None) -> Tensor:
        t = self.expand_unit.forward(x, tape, stats_cache, gates)
        t = self.depthwise_unit.forward(t, tape, stats_cache, gates)
        t = self.project_unit.forward(t, tape, stats_cache, gates)
        if self.spec.has_skip:
            t = add(t, x, tape)
        if self.lite is not None:
            branch = self.lite.forward(x, t.data.shape[2:], tape, stats_cache, gates)
            t = add(t, branch, tape)
        return t


class Head:
    """Global average pool into a dense classifier; always trainable."""

    def __init__(self, in_features: int, n_classes: int, make_factory):
        self.in_features = in_features
        self.n_classes = n_classes
        self.weight = make_factory("head.weight", (in_features, n_classes), GROUP_HEAD, "weight", in_features)
        self.bias = make_factory("head.bias", (n_classes,), GROUP_HEAD, "zeros", 0)

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x: Tensor, tape) -> Tensor:
        t = global_avg_pool(x, tape)
        return linear_forward(t, self.weight, self.bias, tape)


class Model:
    def __init__(self, arch: ArchitectureSpec, stem: ConvUnit, stages, head: Head, dtype):
        self.arch = arch
        self.stem = stem
        self.stages = stages
        self.head = head
        self.dtype = dtype

    def blocks(self):
        for stage in self.stages:
            yield from stage

    def parameters(self) -> list:
        ps = list(self.stem.parameters())
        for blk in self.blocks():
            ps.extend(blk.parameters())
        ps.extend(self.head.parameters())
        return ps

    def param(self, name: str) -> Parameter:
        for p in self.parameters():
            if p.name == name:
                return p
        raise KeyError(name)

    def forward(self, x, tape: Tape | None = None, stats_cache=None, gates=None) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if gates is not None and gates.mode == "replay":
            gates.rewind()
        t = self.stem.forward(x, tape, stats_cache, gates)
        for blk in self.blocks():
            t = blk.forward(t, tape, stats_cache, gates)
        return self.head.forward(t, tape)

    def state(self) -> dict:
        return {p.name: np.array(p.data) for p in self.parameters()}


def build_backbone(
    arch: ArchitectureSpec,
    n_classes: int,
    seed: int = 0,
    init: str = "random_zero_scale",
    source: dict | None = None,
    include_lite: bool = True,
    dtype=np.float32,
) -> Model:
    """Materialize a model from an architecture spec.

    ``random_zero_scale`` draws every parameter from a per-name seeded
    stream; ``pretrained_copy`` copies from ``source`` (a name -> array
    store) and falls back to the random rules for anything absent, which
    is how a plain backbone picks up fresh branches or a new head.
    ``include_lite=False`` builds the branch-free twin; shared parameters
    come out bit-identical because draws are keyed by name.
    """
    arch.validate()
    if callable(init):
        factory = init
    elif init == "random_zero_scale":
        factory = _RandomInit(seed, dtype)
    elif init == "pretrained_copy":
        if source is None:
            raise ValueError("pretrained_copy needs a source parameter store")
        factory = _CopyInit(source, seed, dtype)
    else:
        raise ValueError(f"unknown init strategy {init!r}")

    make = _Maker(factory)
    stem_spec = ConvSpec(arch.in_channels, arch.stem_channels, arch.stem_kernel,
                         stride=arch.stem_stride, weight_standardized=True)
    stem = ConvUnit("stem", stem_spec, "relu", make)
    stages = []
    for si, stage in enumerate(arch.stages):
        built = []
        for bi, blk_spec in enumerate(stage):
            if not include_lite:
                blk_spec = MBBlockSpec(
                    blk_spec.in_channels, blk_spec.out_channels, blk_spec.expand,
                    blk_spec.kernel, blk_spec.stride, lite=None,
                )
            built.append(MBBlock(f"s{si}.b{bi}", blk_spec, factory))
        stages.append(built)
    head = Head(arch.final_channels, n_classes, factory)
    return Model(arch, stem, stages, head, dtype)


def capture_norm_stats(model: Model, x, gates=None) -> dict:
    """One forward that pins (mean, inv-std) for every frozen-scale norm.

    Feeding the returned cache back into ``model.forward`` makes those
    nodes fixed affine maps, which is the function the tape differentiates
    when their scale is frozen. Finite-difference checks for frozen-scale
    policies run against this pinned forward.
    """
    cache: dict = {}
    model.forward(x, tape=None, stats_cache=cache, gates=gates)
    return cache
