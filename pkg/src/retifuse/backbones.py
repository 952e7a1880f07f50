"""Mini residual and dense feature extractors for 2-D and 3-D inputs.

Four presets stand in for ResNet50/101 and DenseNet121/169 at desk scale:
same family topology, far fewer channels and blocks, with the ``-b`` variant
of each family deeper than its ``-a`` variant.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .nn import BatchNorm, Conv, Module

FAMILIES = ("residual", "dense")


class SizingError(ShapeError):
    """Input too small for the number of downsampling steps in a backbone."""


@dataclass(frozen=True)
class ResidualStage:
    blocks: int
    width: int


@dataclass(frozen=True)
class DenseStage:
    blocks: int
    growth_rate: int
    compression: float = 0.5


@dataclass(frozen=True)
class BackboneSpec:
    family: str
    spatial_rank: int
    stem_channels: int
    stages: tuple = field(default_factory=tuple)
    name: str | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown backbone family {self.family!r}")
        if self.spatial_rank not in (2, 3):
            raise ValueError(f"spatial_rank must be 2 or 3, got {self.spatial_rank}")
        if self.stem_channels < 1:
            raise ValueError("stem_channels must be >= 1")
        if not self.stages:
            raise ValueError("a backbone needs at least one stage")
        stage_type = ResidualStage if self.family == "residual" else DenseStage
        for i, st in enumerate(self.stages, 1):
            if not isinstance(st, stage_type):
                raise TypeError(f"stage {i} is {type(st).__name__}, expected {stage_type.__name__}")
            if st.blocks < 1:
                raise ValueError(f"stage {i} needs at least one block")
            if isinstance(st, DenseStage):
                if st.growth_rate < 1:
                    raise ValueError(f"stage {i}: growth_rate must be >= 1")
                if not 0 < st.compression <= 1:
                    raise ValueError(f"stage {i}: compression must lie in (0, 1]")
            elif st.width < 1:
                raise ValueError(f"stage {i}: width must be >= 1")

    def with_rank(self, spatial_rank: int) -> "BackboneSpec":
        return BackboneSpec(self.family, spatial_rank, self.stem_channels, self.stages, self.name)


_PRESETS = {
    # ResNet50 -> ResNet101 only deepens the third stage; mirrored here
    "mini-res-a": ("residual", 8, (ResidualStage(1, 8), ResidualStage(1, 16), ResidualStage(1, 32))),
    "mini-res-b": ("residual", 8, (ResidualStage(1, 8), ResidualStage(1, 16), ResidualStage(3, 32))),
    "mini-dense-a": ("dense", 8, (DenseStage(2, 6), DenseStage(3, 6), DenseStage(3, 6))),
    "mini-dense-b": ("dense", 8, (DenseStage(2, 6), DenseStage(3, 6), DenseStage(5, 6))),
}
PRESETS = tuple(_PRESETS)


def preset(name: str, spatial_rank: int = 3) -> BackboneSpec:
    try:
        family, stem, stages = _PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown backbone preset {name!r}; choose from {', '.join(PRESETS)}") from None
    return BackboneSpec(family, spatial_rank, stem, stages, name)


def downsample_strides(extents: Sequence[int], where: str = "input") -> tuple[int, ...]:
    """Stride 2 on every axis within a factor of two of the largest extent.

    A thin depth axis is left alone until the en-face axes have shrunk to
    match it, so 16x64x64 becomes 16x32x32, then 16x16x16, then 8x8x8.
    """
    top = max(extents)
    if top < 2:
        raise SizingError(f"{where}: spatial extents {tuple(extents)} are too small to downsample")
    return tuple(2 if 2 * e > top else 1 for e in extents)


def _auto(where: str):
    return functools.partial(downsample_strides, where=where)


class ResidualBlock(Module):
    """conv-bn-relu, conv-bn, plus shortcut, then relu."""

    def __init__(self, in_channels: int, out_channels: int, spatial_rank: int,
                 downsample: bool = False, where: str = "block", rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        stride = _auto(where) if downsample else 1
        self.conv1 = Conv(spatial_rank, in_channels, out_channels, 3, stride, rng=rng)
        self.bn1 = BatchNorm(out_channels)
        self.conv2 = Conv(spatial_rank, out_channels, out_channels, 3, 1, rng=rng)
        self.bn2 = BatchNorm(out_channels)
        self.proj = None
        if downsample or in_channels != out_channels:
            self.proj = Conv(spatial_rank, in_channels, out_channels, 1, stride, padding=0, rng=rng)
            self.proj_bn = BatchNorm(out_channels)

    def branch(self, x: Tensor) -> Tensor:
        y = ag.relu(self.bn1(self.conv1(x)))
        return self.bn2(self.conv2(y))

    def forward(self, x: Tensor) -> Tensor:
        skip = x if self.proj is None else self.proj_bn(self.proj(x))
        return ag.relu(ag.add(self.branch(x), skip))


class DenseLayer(Module):
    def __init__(self, in_channels: int, growth_rate: int, spatial_rank: int, rng=None):
        super().__init__()
        self.bn = BatchNorm(in_channels)
        self.conv = Conv(spatial_rank, in_channels, growth_rate, 3, 1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(ag.relu(self.bn(x)))


class DenseBlock(Module):
    """Each layer sees the concatenation of the block input and every earlier layer's output."""

    def __init__(self, in_channels: int, layers: int, growth_rate: int, spatial_rank: int, rng=None):
        super().__init__()
        if layers < 1 or growth_rate < 1:
            raise ValueError("a dense block needs layers >= 1 and growth_rate >= 1")
        rng = rng or np.random.default_rng(0)
        self.in_channels = in_channels
        self.growth_rate = growth_rate
        self.layers = []
        for i in range(layers):
            layer = DenseLayer(in_channels + i * growth_rate, growth_rate, spatial_rank, rng)
            self.add_module(f"layer{i}", layer)
            self.layers.append(layer)
        self.out_channels = in_channels + layers * growth_rate

    def forward(self, x: Tensor) -> Tensor:
        features = [x]
        for layer in self.layers:
            joined = features[0] if len(features) == 1 else ag.concat(features, axis=1)
            features.append(layer(joined))
        return ag.concat(features, axis=1)


class Transition(Module):
    """bn-relu-1x1 conv (channel compression) then average pooling."""

    def __init__(self, in_channels: int, compression: float, spatial_rank: int, where: str, rng=None):
        super().__init__()
        self.out_channels = max(1, int(np.floor(in_channels * compression)))
        self.bn = BatchNorm(in_channels)
        self.conv = Conv(spatial_rank, in_channels, self.out_channels, 1, 1, padding=0, rng=rng)
        self.where = where

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv(ag.relu(self.bn(x)))
        strides = downsample_strides(y.shape[2:], self.where)
        return ag.avg_pool(y, strides, strides)


def build_residual_block(channels: int, spatial_rank: int, rng=None) -> ResidualBlock:
    if channels < 1:
        raise ValueError("channels must be >= 1")
    return ResidualBlock(channels, channels, spatial_rank, rng=rng)


def build_dense_block(in_channels: int, layers: int, growth_rate: int, spatial_rank: int, rng=None) -> DenseBlock:
    return DenseBlock(in_channels, layers, growth_rate, spatial_rank, rng)


class FeatureExtractor(Module):
    """Stem, stages, global average pool: ``[N, C, *spatial] -> [N, feature_dim]``."""

    def __init__(self, spec: BackboneSpec, in_channels: int, seed: int = 0):
        super().__init__()
        if in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        self.spec = spec
        self.in_channels = in_channels
        rank = spec.spatial_rank
        rng = np.random.default_rng(seed)
        self.stem_conv = Conv(rank, in_channels, spec.stem_channels, 3, _auto("stem"), rng=rng)
        self.stem_bn = BatchNorm(spec.stem_channels)
        self.stages: list[Module] = []
        channels = spec.stem_channels
        for i, st in enumerate(spec.stages, 1):
            where = f"stage {i}"
            if spec.family == "residual":
                blocks = []
                for b in range(st.blocks):
                    blk = ResidualBlock(channels, st.width, rank, downsample=(i > 1 and b == 0),
                                        where=where, rng=rng)
                    self.add_module(f"stage{i}.block{b}", blk)
                    blocks.append(blk)
                    channels = st.width
                self.stages.extend(blocks)
            else:
                if i > 1:
                    trans = Transition(channels, spec.stages[i - 2].compression, rank, where, rng)
                    self.add_module(f"stage{i}.transition", trans)
                    self.stages.append(trans)
                    channels = trans.out_channels
                blk = DenseBlock(channels, st.blocks, st.growth_rate, rank, rng)
                self.add_module(f"stage{i}.dense", blk)
                self.stages.append(blk)
                channels = blk.out_channels
        if spec.family == "dense":
            self.final_bn = BatchNorm(channels)
        self.feature_dim = channels

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != self.spec.spatial_rank + 2:
            raise ShapeError(f"expected [N, C, {self.spec.spatial_rank} spatial dims], got {x.shape}")
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        y = ag.relu(self.stem_bn(self.stem_conv(x)))
        pool = downsample_strides(y.shape[2:], "stem pool")
        y = ag.max_pool(y, pool, pool)
        for stage in self.stages:
            y = stage(y)
        if self.spec.family == "dense":
            y = ag.relu(self.final_bn(y))
        return ag.global_avg_pool(y)


def build_backbone(spec: BackboneSpec | str, in_channels: int, seed: int = 0,
                   spatial_rank: int | None = None) -> FeatureExtractor:
    if isinstance(spec, str):
        spec = preset(spec, spatial_rank or 3)
    elif spatial_rank is not None and spatial_rank != spec.spatial_rank:
        spec = spec.with_rank(spatial_rank)
    return FeatureExtractor(spec, in_channels, seed)
