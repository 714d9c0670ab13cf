"""Parameterised layers: convolution, batch normalisation, and the Module container."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import DEFAULT_DTYPE, ShapeError, Tensor, _emit, backward_rule, conv2d, relu

TRAIN = "train"
EVAL = "eval"


def he_init(shape: tuple[int, ...], seed: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Zero-mean normal draw with variance ``2 / fan_in`` (fan_in = c_in * k_h * k_w)."""
    fan_in = int(np.prod(shape[1:]))
    rng = np.random.default_rng(seed)
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Module:
    """Minimal parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad``; buffers are
    ``Tensor`` attributes without it (batchnorm running statistics). Child
    modules may sit in attributes or in lists. Iteration order is attribute
    definition order, which makes names and checkpoints stable.
    """

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_tensors(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_tensors(f"{name}.{i}.")

    def named_parameters(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.named_tensors() if t.requires_grad}

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.named_tensors()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_tensors())
        for name, t in own.items():
            if name not in state:
                raise KeyError(f"missing tensor {name!r} in state")
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise ShapeError(f"tensor {name!r}: expected shape {t.shape}, got {arr.shape}")
            t.data = np.ascontiguousarray(arr, dtype=t.dtype)
        extra = sorted(set(state) - set(own))
        if extra:
            raise KeyError(f"unexpected tensor {extra[0]!r} in state")

    def astype(self, dtype) -> "Module":
        for _, t in self.named_tensors():
            t.data = t.data.astype(dtype)
            t.grad = None
        return self

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None


def count_parameters(model: Module) -> int:
    return int(sum(t.size for t in model.parameters()))


class ConvLayer(Module):
    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1, pad: int | None = None,
                 bias: bool = False, seed: int = 0, dtype=DEFAULT_DTYPE):
        if k not in (1, 3, 7):
            raise ValueError(f"kernel size must be 1, 3 or 7, got {k}")
        self.weight = Tensor(he_init((c_out, c_in, k, k), seed, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True) if bias else None
        self.stride = stride
        self.pad = k // 2 if pad is None else pad

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.pad)


class NormLayer(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=DEFAULT_DTYPE):
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels, dtype=dtype))
        self.running_var = Tensor(np.ones(channels, dtype=dtype))
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, mode: str = TRAIN) -> Tensor:
        return batchnorm_forward(x, self, mode)


def batchnorm_forward(x: Tensor, layer: NormLayer, mode: str = TRAIN) -> Tensor:
    """Per-channel normalisation over ``(n, h, w)``.

    Train mode uses batch statistics (biased variance) and folds them into the
    running averages; eval mode applies the running statistics as a fixed affine map.
    """
    c = layer.gamma.shape[0]
    if x.data.ndim != 4 or x.shape[1] != c:
        raise ShapeError(f"batchnorm over {c} channels got input {x.shape}")
    if mode == TRAIN:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = layer.momentum
        layer.running_mean.data = ((1 - m) * layer.running_mean.data + m * mean).astype(layer.running_mean.dtype)
        layer.running_var.data = ((1 - m) * layer.running_var.data + m * var).astype(layer.running_var.dtype)
    elif mode == EVAL:
        mean = layer.running_mean.data
        var = layer.running_var.data
    else:
        raise ValueError(f"unknown mode {mode!r}")
    invstd = (1.0 / np.sqrt(var + layer.eps)).astype(x.dtype)
    xhat = (x.data - mean[None, :, None, None].astype(x.dtype)) * invstd[None, :, None, None]
    out = xhat * layer.gamma.data[None, :, None, None] + layer.beta.data[None, :, None, None]
    saved = {"xhat": xhat, "invstd": invstd, "gamma": layer.gamma.data, "train": mode == TRAIN}
    return _emit("batchnorm", (x, layer.gamma, layer.beta), out.astype(x.dtype), saved)


@backward_rule("batchnorm")
def _batchnorm_backward(g: np.ndarray, s: dict):
    xhat, invstd, gamma = s["xhat"], s["invstd"], s["gamma"]
    dgamma = (g * xhat).sum(axis=(0, 2, 3))
    dbeta = g.sum(axis=(0, 2, 3))
    dxhat = g * gamma[None, :, None, None]
    if s["train"]:
        count = g.shape[0] * g.shape[2] * g.shape[3]
        dx = invstd[None, :, None, None] / count * (
            count * dxhat
            - dxhat.sum(axis=(0, 2, 3), keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        )
    else:
        dx = dxhat * invstd[None, :, None, None]
    return dx, dgamma, dbeta


class ConvBNReLU(Module):
    def __init__(self, c_in: int, c_out: int, k: int = 3, stride: int = 1, seed: int = 0, dtype=DEFAULT_DTYPE):
        self.conv = ConvLayer(c_in, c_out, k, stride, bias=False, seed=seed, dtype=dtype)
        self.norm = NormLayer(c_out, dtype=dtype)

    def __call__(self, x: Tensor, mode: str = TRAIN) -> Tensor:
        return conv_bn_relu(x, self.conv, self.norm, mode)


def conv_bn_relu(x: Tensor, conv: ConvLayer, norm: NormLayer, mode: str = TRAIN) -> Tensor:
    return relu(batchnorm_forward(conv(x), norm, mode))
