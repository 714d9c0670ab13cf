"""Finite-difference suites for every differentiable primitive and the end-to-end model.

All suites run in float64. Each returns the largest relative error found by
:func:`cfcm.tensor.finite_diff_check` over sampled coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .convlstm import ConvLSTMCell, LSTMState, cell_step
from .decoder import ModelConfig, build_model
from .layers import EVAL, TRAIN, NormLayer, batchnorm_forward
from .tensor import (
    Tensor,
    add,
    concat_channels,
    conv2d,
    finite_diff_check,
    max_pool2,
    mul,
    reduce,
    relu,
    sigmoid,
    slice_channels,
    tanh,
    upsample,
)
from .training import soft_dice_loss

F64 = np.float64
PRIMITIVE_TOL = 1e-4
END_TO_END_TOL = 1e-3
EPS = 1e-6


def _param(rng, shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=F64)


def _probe(y: Tensor, seed: int) -> Tensor:
    """Random fixed linear functional of ``y`` so every output element matters differently."""
    weights = np.random.default_rng(seed + 1000).standard_normal(y.shape)
    return reduce("sum", mul(y, Tensor(weights, dtype=F64)))


def check_conv(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    errs = []
    for stride, pad in ((1, 1), (2, 0), (2, 3)):
        x = _param(rng, (2, 2, 5, 5))
        w = _param(rng, (3, 2, 3, 3))
        b = _param(rng, (3,))
        errs.append(finite_diff_check(lambda: _probe(conv2d(x, w, b, stride, pad), seed), [x, w, b], EPS, None))
    return max(errs)


def check_pool(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    # distinct values spaced far beyond eps keep every window's argmax stable
    x = Tensor(rng.permutation(2 * 3 * 6 * 6).reshape(2, 3, 6, 6) * 0.1, requires_grad=True, dtype=F64)
    return finite_diff_check(lambda: _probe(max_pool2(x), seed), [x], EPS, None)


def check_upsample(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    x = _param(rng, (2, 2, 3, 4))
    errs = [
        finite_diff_check(lambda m=m, f=f: _probe(upsample(x, f, m), seed), [x], EPS, None)
        for m in ("nearest", "bilinear")
        for f in (2, 4)
    ]
    return max(errs)


def check_channels(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    a = _param(rng, (2, 2, 3, 3))
    b = _param(rng, (2, 3, 3, 3))
    return finite_diff_check(lambda: _probe(slice_channels(concat_channels(a, b), 1, 4), seed), [a, b], EPS, None)


def check_pointwise(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    x = _param(rng, (2, 2, 4, 4))
    y = _param(rng, (2, 2, 4, 4))
    # keep relu inputs away from the kink
    x.data[np.abs(x.data) < 0.05] += 0.1

    def f():
        return _probe(add(mul(sigmoid(x), tanh(y)), relu(x)), seed) + reduce("mean", mul(x, y))

    return finite_diff_check(f, [x, y], EPS, None)


def check_batchnorm(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    x = _param(rng, (4, 3, 5, 5), 2.0)
    layer = NormLayer(3, dtype=F64)
    layer.gamma.data = rng.standard_normal(3) + 1.0
    layer.beta.data = rng.standard_normal(3)
    layer.running_var.data = rng.uniform(0.5, 2.0, 3)
    errs = []
    for mode in (TRAIN, EVAL):
        saved = (layer.running_mean.data.copy(), layer.running_var.data.copy())

        def f(mode=mode):
            # running statistics must not drift between finite-difference evaluations
            layer.running_mean.data, layer.running_var.data = saved[0].copy(), saved[1].copy()
            return _probe(batchnorm_forward(x, layer, mode), seed)

        errs.append(finite_diff_check(f, [x, layer.gamma, layer.beta], EPS, None))
    return max(errs)


def check_convlstm(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    cell = ConvLSTMCell(2, 3, seed=seed, dtype=F64)
    x = _param(rng, (2, 2, 4, 4))
    h0 = _param(rng, (2, 3, 4, 4), 0.5)
    c0 = _param(rng, (2, 3, 4, 4))

    def f():
        st = cell_step(cell, x, LSTMState(h0, c0))
        return add(_probe(st.hidden, seed), _probe(st.cell, seed + 1))

    return finite_diff_check(f, [cell.gate_conv.weight, cell.gate_conv.bias, x, h0, c0], EPS, None)


def check_dice(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    multi = _param(rng, (1, 3, 8, 8))
    binary = _param(rng, (1, 1, 8, 8))
    t_multi = rng.integers(0, 3, size=(1, 8, 8))
    t_bin = rng.integers(0, 2, size=(1, 8, 8))
    return max(
        finite_diff_check(lambda: soft_dice_loss(multi, t_multi), [multi], EPS, None),
        finite_diff_check(lambda: soft_dice_loss(binary, t_bin), [binary], EPS, None),
    )


def check_cfcm(seed: int = 0, coords: int = 4) -> float:
    """Dice loss through encoder + CFCM decoder on a (4, 1, 32, 32) input.

    Four samples keep the coarsest (1x1) batchnorm from normalising over just
    two values, where the loss curvature swamps central differences.
    """
    rng = np.random.default_rng(seed)
    model = build_model(ModelConfig(depth=18, width_mult="1/16", hidden=3, decoder="cfcm"), seed).astype(F64)
    x = Tensor(rng.random((4, 1, 32, 32)), dtype=F64)
    target = (rng.random((4, 32, 32)) > 0.6).astype(np.uint8)
    saved = {k: t.data.copy() for k, t in model.named_tensors() if not t.requires_grad}
    buffers = {k: t for k, t in model.named_tensors() if not t.requires_grad}

    def f():
        for k, t in buffers.items():
            t.data = saved[k].copy()
        return soft_dice_loss(model(x, TRAIN), target)

    return finite_diff_check(f, model.parameters(), EPS, coords, seed)


@dataclass(frozen=True)
class Suite:
    name: str
    run: Callable[[], float]
    tol: float


SUITES = {
    s.name: s
    for s in (
        Suite("conv", check_conv, PRIMITIVE_TOL),
        Suite("pool", check_pool, PRIMITIVE_TOL),
        Suite("upsample", check_upsample, PRIMITIVE_TOL),
        Suite("channels", check_channels, PRIMITIVE_TOL),
        Suite("pointwise", check_pointwise, PRIMITIVE_TOL),
        Suite("batchnorm", check_batchnorm, PRIMITIVE_TOL),
        Suite("convlstm", check_convlstm, PRIMITIVE_TOL),
        Suite("dice", check_dice, PRIMITIVE_TOL),
        Suite("cfcm", check_cfcm, END_TO_END_TOL),
    )
}


def run_suites(only: list[str] | None = None) -> list[tuple[str, float, float, bool]]:
    names = list(SUITES) if not only else only
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown gradcheck suite {unknown[0]!r}; choose from {', '.join(SUITES)}")
    results = []
    for name in names:
        suite = SUITES[name]
        err = suite.run()
        results.append((name, err, suite.tol, bool(err < suite.tol)))
    return results
