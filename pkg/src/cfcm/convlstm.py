"""Convolutional LSTM cell used as the coarse-to-fine context memory."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import ConvLayer, Module
from .tensor import (
    DEFAULT_DTYPE,
    ShapeError,
    Tensor,
    add,
    concat_channels,
    mul,
    sigmoid,
    slice_channels,
    tanh,
    upsample2,
)

GATE_ORDER = ("i", "f", "g", "o")


@dataclass
class LSTMState:
    hidden: Tensor
    cell: Tensor

    def __post_init__(self):
        if self.hidden.shape != self.cell.shape:
            raise ShapeError(f"hidden {self.hidden.shape} and cell {self.cell.shape} differ")

    @classmethod
    def zeros(cls, n: int, channels: int, h: int, w: int, dtype=DEFAULT_DTYPE) -> "LSTMState":
        shape = (n, channels, h, w)
        return cls(Tensor(np.zeros(shape, dtype=dtype)), Tensor(np.zeros(shape, dtype=dtype)))


class ConvLSTMCell(Module):
    """One fused 3x3 gate convolution over ``concat(x, hidden)`` producing ``4 * c_h`` channels.

    Channel blocks are ordered (input, forget, candidate, output). The forget
    block of the bias starts at ``forget_bias``.
    """

    def __init__(self, c_x: int, c_h: int, seed: int = 0, forget_bias: float = 1.0, dtype=DEFAULT_DTYPE):
        self.c_x = c_x
        self.c_h = c_h
        self.gate_conv = ConvLayer(c_x + c_h, 4 * c_h, 3, stride=1, pad=1, bias=True, seed=seed, dtype=dtype)
        self.gate_conv.bias.data[c_h : 2 * c_h] = forget_bias

    def __call__(self, x: Tensor, state: LSTMState) -> LSTMState:
        return cell_step(self, x, state)


def gate_activations(cell: ConvLSTMCell, x: Tensor, state: LSTMState) -> dict[str, Tensor]:
    if x.shape[0] != state.hidden.shape[0] or x.shape[2:] != state.hidden.shape[2:]:
        raise ShapeError(f"input {x.shape} not aligned with state {state.hidden.shape}")
    if x.shape[1] != cell.c_x:
        raise ShapeError(f"cell expects {cell.c_x} input channels, got {x.shape[1]}")
    if state.hidden.shape[1] != cell.c_h:
        raise ShapeError(f"cell expects hidden width {cell.c_h}, got {state.hidden.shape[1]}")
    z = cell.gate_conv(concat_channels(x, state.hidden))
    c_h = cell.c_h
    pre = {name: slice_channels(z, k * c_h, (k + 1) * c_h) for k, name in enumerate(GATE_ORDER)}
    return {
        "i": sigmoid(pre["i"]),
        "f": sigmoid(pre["f"]),
        "g": tanh(pre["g"]),
        "o": sigmoid(pre["o"]),
    }


def cell_step(cell: ConvLSTMCell, x: Tensor, state: LSTMState) -> LSTMState:
    gates = gate_activations(cell, x, state)
    new_cell = add(mul(gates["f"], state.cell), mul(gates["i"], gates["g"]))
    new_hidden = mul(gates["o"], tanh(new_cell))
    return LSTMState(new_hidden, new_cell)


def upsample_state(state: LSTMState, mode: str = "nearest") -> LSTMState:
    return LSTMState(upsample2(state.hidden, mode), upsample2(state.cell, mode))
