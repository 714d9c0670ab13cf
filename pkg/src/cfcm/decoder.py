"""Decoders over the encoder's feature pyramid, plus the assembled segmentation network.

``CFCMDecoder`` steps one ConvLSTM cell per pyramid level, coarse to fine,
carrying an upsampled (hidden, cell) state between levels. ``SkipDecoder`` is
the plain skip-connection baseline fusing by summation or concatenation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from .convlstm import ConvLSTMCell, LSTMState, cell_step, upsample_state
from .encoder import Encoder, EncoderConfig, SeedStream, build_encoder, parse_width, scaled
from .layers import TRAIN, ConvBNReLU, ConvLayer, Module, count_parameters
from .tensor import DEFAULT_DTYPE, ShapeError, Tensor, add, concat_channels, relu, upsample, upsample2

DECODER_KINDS = ("cfcm", "skip_sum", "skip_concat")
FINAL_UPSAMPLE = 4


class Head(Module):
    """3x3 conv + relu, then 1x1 conv to class logits."""

    def __init__(self, c_in: int, c_mid: int, num_classes: int, seeds: SeedStream, dtype=DEFAULT_DTYPE):
        self.conv1 = ConvLayer(c_in, c_mid, 3, bias=True, seed=seeds(), dtype=dtype)
        self.conv2 = ConvLayer(c_mid, num_classes, 1, bias=True, seed=seeds(), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv2(relu(self.conv1(x)))


def _check_pyramid(pyr: list[Tensor], channels: list[int]) -> None:
    if len(pyr) != len(channels):
        raise ShapeError(f"pyramid has {len(pyr)} levels, decoder expects {len(channels)}")
    for i, (level, c) in enumerate(zip(pyr, channels)):
        if level.shape[1] != c:
            raise ShapeError(f"pyramid level {i} has {level.shape[1]} channels, decoder expects {c}")


class CFCMDecoder(Module):
    def __init__(self, level_channels: list[int], hidden: int, num_classes: int, seed: int = 0,
                 upsample_mode: str = "nearest", dtype=DEFAULT_DTYPE):
        seeds = SeedStream(seed)
        self.level_channels = list(level_channels)
        self.hidden = hidden
        self.upsample_mode = upsample_mode
        self.cells = [ConvLSTMCell(c, hidden, seed=seeds(), dtype=dtype) for c in level_channels]
        self.head = Head(hidden, hidden, num_classes, seeds, dtype)

    def __call__(self, pyr: list[Tensor], mode: str = TRAIN) -> Tensor:
        return cfcm_forward(self, pyr, mode)


def cfcm_forward(dec: CFCMDecoder, pyr: list[Tensor], mode: str = TRAIN) -> Tensor:
    """Logits at ``FINAL_UPSAMPLE`` times the finest tap's resolution.

    ``mode`` is accepted for interface symmetry; the decoder has no batchnorm.
    """
    _check_pyramid(pyr, dec.level_channels)
    n, _, h, w = pyr[0].shape
    state = LSTMState.zeros(n, dec.hidden, h, w, dtype=pyr[0].dtype)
    for i, (cell, level) in enumerate(zip(dec.cells, pyr)):
        if i:
            state = upsample_state(state, dec.upsample_mode)
        state = cell_step(cell, level, state)
    return upsample(dec.head(state.hidden), FINAL_UPSAMPLE, "bilinear")


class FusionBlock(Module):
    """Upsampled coarse features merged with one skip tap, then conv-bn-relu."""

    def __init__(self, fusion: str, c_up: int, c_tap: int, seeds: SeedStream, dtype=DEFAULT_DTYPE):
        self.fusion = fusion
        if fusion == "sum":
            self.adapt = ConvLayer(c_up, c_tap, 1, bias=False, seed=seeds(), dtype=dtype) if c_up != c_tap else None
            self.mix = ConvBNReLU(c_tap, c_tap, 3, seed=seeds(), dtype=dtype)
        elif fusion == "concat":
            self.adapt = None
            self.mix = ConvBNReLU(c_up + c_tap, c_tap, 3, seed=seeds(), dtype=dtype)
        else:
            raise ValueError(f"unknown fusion {fusion!r}")

    def fuse(self, up: Tensor, tap: Tensor) -> Tensor:
        if self.fusion == "sum":
            return add(up if self.adapt is None else self.adapt(up), tap)
        return concat_channels(up, tap)

    def __call__(self, up: Tensor, tap: Tensor, mode: str = TRAIN) -> Tensor:
        return self.mix(self.fuse(up, tap), mode)


class SkipDecoder(Module):
    def __init__(self, level_channels: list[int], num_classes: int, fusion: str = "sum", seed: int = 0,
                 dtype=DEFAULT_DTYPE):
        seeds = SeedStream(seed)
        self.level_channels = list(level_channels)
        self.fusion = fusion
        self.blocks = [
            FusionBlock(fusion, c_up, c_tap, seeds, dtype)
            for c_up, c_tap in zip(level_channels[:-1], level_channels[1:])
        ]
        finest = level_channels[-1]
        self.head = Head(finest, finest, num_classes, seeds, dtype)

    def __call__(self, pyr: list[Tensor], mode: str = TRAIN) -> Tensor:
        return skip_forward(self, pyr, mode)


def skip_forward(dec: SkipDecoder, pyr: list[Tensor], mode: str = TRAIN) -> Tensor:
    _check_pyramid(pyr, dec.level_channels)
    x = pyr[0]
    for block, tap in zip(dec.blocks, pyr[1:]):
        x = block(upsample2(x, "bilinear"), tap, mode)
    return upsample(dec.head(x), FINAL_UPSAMPLE, "bilinear")


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 18
    width_mult: Fraction | float | str = Fraction(1, 8)
    in_channels: int = 1
    num_classes: int = 1
    decoder: str = "cfcm"
    hidden: int | None = None
    upsample_mode: str = "nearest"
    encoder: EncoderConfig = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.decoder not in DECODER_KINDS:
            raise ValueError(f"unknown decoder {self.decoder!r}; choose from {DECODER_KINDS}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.upsample_mode not in ("nearest", "bilinear"):
            raise ValueError(f"unknown upsample mode {self.upsample_mode!r}")
        object.__setattr__(self, "width_mult", parse_width(self.width_mult))
        object.__setattr__(self, "encoder", EncoderConfig(self.depth, self.width_mult, self.in_channels))
        if self.hidden is not None and self.hidden < 1:
            raise ValueError("hidden must be >= 1")

    @property
    def hidden_channels(self) -> int:
        return self.hidden if self.hidden is not None else scaled(32, self.width_mult)


class SegmentationNet(Module):
    def __init__(self, config: ModelConfig, seed: int = 0, dtype=DEFAULT_DTYPE):
        self.config = config
        seeds = SeedStream(seed)
        self.encoder = build_encoder(config.encoder, seeds(), dtype)
        taps = config.encoder.tap_channels()
        if config.decoder == "cfcm":
            self.decoder = CFCMDecoder(taps, config.hidden_channels, config.num_classes, seeds(),
                                       config.upsample_mode, dtype)
        else:
            fusion = config.decoder.split("_", 1)[1]
            self.decoder = SkipDecoder(taps, config.num_classes, fusion, seeds(), dtype)

    def __call__(self, x: Tensor, mode: str = TRAIN) -> Tensor:
        return self.decoder(self.encoder(x, mode), mode)


def build_model(config: ModelConfig, seed: int = 0, dtype=DEFAULT_DTYPE) -> SegmentationNet:
    return SegmentationNet(config, seed, dtype)


__all__ = [
    "CFCMDecoder",
    "SkipDecoder",
    "SegmentationNet",
    "ModelConfig",
    "build_model",
    "cfcm_forward",
    "skip_forward",
    "count_parameters",
    "Encoder",
]
