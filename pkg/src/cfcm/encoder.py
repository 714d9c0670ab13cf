"""Residual encoder that exposes one feature tap per stage, ordered coarse to fine."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .layers import TRAIN, ConvBNReLU, ConvLayer, Module, NormLayer, batchnorm_forward
from .tensor import DEFAULT_DTYPE, ShapeError, Tensor, add, max_pool2, relu

BLOCK_LAYOUT = {
    18: ("basic", (2, 2, 2, 2)),
    34: ("basic", (3, 4, 6, 3)),
    50: ("bottleneck", (3, 4, 6, 3)),
    101: ("bottleneck", (3, 4, 23, 3)),
}
BASE_WIDTHS = (64, 128, 256, 512)
BOTTLENECK_EXPANSION = 4


def parse_width(value) -> Fraction:
    """Accepts 0.125, "1/8" or Fraction(1, 8)."""
    frac = Fraction(value).limit_denominator(1024) if not isinstance(value, str) else Fraction(value)
    if frac <= 0:
        raise ValueError(f"width_mult must be positive, got {value}")
    return frac


def scaled(channels: int, width_mult) -> int:
    c = Fraction(channels) * parse_width(width_mult)
    if c.denominator != 1 or c < 1:
        raise ValueError(f"width_mult {width_mult} turns {channels} channels into {c}, not an integer >= 1")
    return int(c)


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 18
    width_mult: Fraction | float | str = 1
    in_channels: int = 1

    def __post_init__(self):
        if self.depth not in BLOCK_LAYOUT:
            raise ValueError(f"unsupported depth {self.depth}; choose from {sorted(BLOCK_LAYOUT)}")
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        for c in BASE_WIDTHS:
            scaled(c, self.width_mult)

    @property
    def block_kind(self) -> str:
        return BLOCK_LAYOUT[self.depth][0]

    @property
    def stem_channels(self) -> int:
        return scaled(64, self.width_mult)

    def stage_channels(self) -> list[int]:
        """Output channels of the four stages, fine to coarse."""
        widths = [scaled(c, self.width_mult) for c in BASE_WIDTHS]
        if self.block_kind == "bottleneck":
            return [w * BOTTLENECK_EXPANSION for w in widths]
        return widths

    def tap_channels(self) -> list[int]:
        """Channels of the pyramid levels, coarse to fine."""
        return self.stage_channels()[::-1]


class SeedStream:
    """Hands out a deterministic sequence of 63-bit seeds."""

    def __init__(self, seed: int):
        self._rng = np.random.default_rng(seed)

    def __call__(self) -> int:
        return int(self._rng.integers(0, 2**63 - 1))


class ResidualBlock(Module):
    """``relu(F(x) + shortcut(x))`` with a projected shortcut when stride or width change."""

    def __init__(self, kind: str, c_in: int, c_mid: int, c_out: int, stride: int, seeds: SeedStream,
                 dtype=DEFAULT_DTYPE):
        self.kind = kind
        if kind == "basic":
            self.layers = [
                ConvBNReLU(c_in, c_out, 3, stride, seed=seeds(), dtype=dtype),
                ConvLayer(c_out, c_out, 3, bias=False, seed=seeds(), dtype=dtype),
            ]
        elif kind == "bottleneck":
            self.layers = [
                ConvBNReLU(c_in, c_mid, 1, seed=seeds(), dtype=dtype),
                ConvBNReLU(c_mid, c_mid, 3, stride, seed=seeds(), dtype=dtype),
                ConvLayer(c_mid, c_out, 1, bias=False, seed=seeds(), dtype=dtype),
            ]
        else:
            raise ValueError(f"unknown block kind {kind!r}")
        self.out_norm = NormLayer(c_out, dtype=dtype)
        if stride != 1 or c_in != c_out:
            self.proj = ConvLayer(c_in, c_out, 1, stride, pad=0, bias=False, seed=seeds(), dtype=dtype)
            self.proj_norm = NormLayer(c_out, dtype=dtype)
        else:
            self.proj = None
            self.proj_norm = None

    def __call__(self, x: Tensor, mode: str = TRAIN) -> Tensor:
        return residual_block_forward(self, x, mode)


def residual_block_forward(block: ResidualBlock, x: Tensor, mode: str = TRAIN) -> Tensor:
    h = x
    for layer in block.layers[:-1]:
        h = layer(h, mode)
    h = batchnorm_forward(block.layers[-1](h), block.out_norm, mode)
    shortcut = x if block.proj is None else batchnorm_forward(block.proj(x), block.proj_norm, mode)
    return relu(add(h, shortcut))


class Encoder(Module):
    def __init__(self, config: EncoderConfig, seed: int = 0, dtype=DEFAULT_DTYPE):
        self.config = config
        seeds = SeedStream(seed)
        kind, counts = BLOCK_LAYOUT[config.depth]
        self.stem = ConvBNReLU(config.in_channels, config.stem_channels, 7, stride=2, seed=seeds(), dtype=dtype)
        widths = [scaled(c, config.width_mult) for c in BASE_WIDTHS]
        self.stages = []
        c_in = config.stem_channels
        for stage, (mid, n_blocks) in enumerate(zip(widths, counts)):
            c_out = mid * BOTTLENECK_EXPANSION if kind == "bottleneck" else mid
            blocks = []
            for b in range(n_blocks):
                stride = 2 if (b == 0 and stage > 0) else 1
                blocks.append(ResidualBlock(kind, c_in, mid, c_out, stride, seeds, dtype))
                c_in = c_out
            self.stages.append(Stage(blocks))

    def __call__(self, x: Tensor, mode: str = TRAIN) -> list[Tensor]:
        return encoder_forward(self, x, mode)


class Stage(Module):
    def __init__(self, blocks: list[ResidualBlock]):
        self.blocks = blocks

    def __call__(self, x: Tensor, mode: str = TRAIN) -> Tensor:
        for block in self.blocks:
            x = block(x, mode)
        return x


def build_encoder(config: EncoderConfig, seed: int = 0, dtype=DEFAULT_DTYPE) -> Encoder:
    return Encoder(config, seed, dtype)


def encoder_forward(enc: Encoder, x: Tensor, mode: str = TRAIN) -> list[Tensor]:
    """Feature pyramid: one tap per stage, deepest (coarsest) first."""
    n, c, h, w = x.shape
    if h % 32 or w % 32:
        raise ShapeError(f"encoder input spatial size must be divisible by 32, got {h}x{w}")
    if c != enc.config.in_channels:
        raise ShapeError(f"encoder expects {enc.config.in_channels} input channels, got {c}")
    out = max_pool2(enc.stem(x, mode))
    taps = []
    for stage in enc.stages:
        out = stage(out, mode)
        taps.append(out)
    return taps[::-1]
