"""Rank-4 tensors with a reverse-mode gradient tape.

Every differentiable primitive appends one node ``(kind, input handles, saved
arrays)`` to the active :class:`Tape`. Backward rules live in the ``BACKWARD``
registry keyed by op kind, so a rule can be swapped out (the gradient-check
harness relies on that to prove it catches a broken rule).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op."""


class TapeError(RuntimeError):
    pass


class Tensor:
    """Dense array of rank 4 ``(n, c, h, w)``, rank 1 (per-channel vectors) or rank 0."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim not in (0, 1, 4):
            raise ShapeError(f"tensors are rank 4, 1 or 0; got shape {arr.shape}")
        if arr.ndim and min(arr.shape) < 1:
            raise ShapeError(f"all shape components must be >= 1, got {arr.shape}")
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"


def zeros(shape: Sequence[int], dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


@dataclass
class Node:
    kind: str
    inputs: tuple[int | None, ...]
    saved: dict = field(default_factory=dict)
    leaf: Tensor | None = None


_local = threading.local()


def _stack() -> list["Tape"]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Append-only op record for one forward pass.

    Use as a context manager; ops executed inside record onto it whenever an
    input requires a gradient. ``backward`` may be called once per ``reset``.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.gradients: dict[int, np.ndarray] = {}
        self._leaf_ids: dict[int, int] = {}
        self._done = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().remove(self)

    def reset(self) -> None:
        for node in self.nodes:
            if node.leaf is not None and node.leaf._tape is self:
                node.leaf._tape = None
                node.leaf.node_id = None
        self.nodes.clear()
        self.gradients = {}
        self._leaf_ids.clear()
        self._done = False

    def handle(self, t: Tensor) -> int | None:
        """Node index of ``t`` on this tape, registering grad-requiring leaves."""
        if t._tape is self:
            return t.node_id
        if not t.requires_grad:
            return None
        idx = self._leaf_ids.get(id(t))
        if idx is None:
            idx = len(self.nodes)
            self.nodes.append(Node("leaf", (), leaf=t))
            self._leaf_ids[id(t)] = idx
        t._tape = self
        t.node_id = idx
        return idx

    def record(self, kind: str, inputs: Sequence[Tensor], out: np.ndarray, saved: dict) -> Tensor:
        handles = tuple(self.handle(t) for t in inputs)
        res = Tensor(out, dtype=out.dtype)
        if all(h is None for h in handles):
            return res
        saved["needs"] = tuple(h is not None for h in handles)
        self.nodes.append(Node(kind, handles, saved))
        res.requires_grad = True
        res._tape = self
        res.node_id = len(self.nodes) - 1
        return res

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        if loss.data.ndim != 0:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._done:
            raise TapeError("backward already ran on this tape; call reset() first")
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones((), dtype=loss.dtype)}
        for idx in range(loss.node_id, -1, -1):
            g = grads.get(idx)
            node = self.nodes[idx]
            if g is None or node.leaf is not None:
                continue
            in_grads = BACKWARD[node.kind](g, node.saved)
            for h, ig in zip(node.inputs, in_grads):
                if h is None or ig is None:
                    continue
                if h in grads:
                    grads[h] = grads[h] + ig
                else:
                    grads[h] = ig
        for node_idx, node in enumerate(self.nodes):
            if node.leaf is not None and node_idx in grads:
                node.leaf.grad = np.asarray(grads[node_idx], dtype=node.leaf.dtype).reshape(node.leaf.shape)
        self.gradients = grads
        self._done = True
        return grads


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Run the tape that produced ``loss`` backwards, filling ``.grad`` on leaves."""
    if loss._tape is None:
        raise TapeError("loss was not recorded on any tape")
    return loss._tape.backward(loss)


def _emit(kind: str, inputs: Sequence[Tensor], out: np.ndarray, saved: dict | None = None) -> Tensor:
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor(out, dtype=out.dtype)
    return tape.record(kind, inputs, out, saved if saved is not None else {})


BACKWARD: dict[str, Callable[[np.ndarray, dict], tuple]] = {}


def backward_rule(kind: str):
    def register(fn):
        BACKWARD[kind] = fn
        return fn

    return register


# --------------------------------------------------------------------------- conv


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    # (n, c, H, W) padded -> (n*oh*ow, c*kh*kw)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    n, c = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding, computed as one GEMM over gathered windows."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    c_out, c_in, kh, kw = w.shape
    if c != c_in:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"invalid stride={stride} / pad={pad}")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ShapeError(f"kernel {w.shape} larger than padded input {x.shape} (pad={pad})")
    if b is not None and b.shape != (c_out,):
        raise ShapeError(f"conv2d bias shape {b.shape} does not match weight {w.shape}")
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(wd, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    wmat = w.data.reshape(c_out, -1)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out = np.ascontiguousarray(out.reshape(n, oh, ow, c_out).transpose(0, 3, 1, 2))
    inputs = (x, w) if b is None else (x, w, b)
    saved = {"cols": cols, "w": w.data, "x_shape": x.shape, "stride": stride, "pad": pad, "has_bias": b is not None}
    return _emit("conv2d", inputs, out, saved)


@backward_rule("conv2d")
def _conv2d_backward(g: np.ndarray, s: dict):
    n, c, h, wd = s["x_shape"]
    w = s["w"]
    c_out, _, kh, kw = w.shape
    stride, pad = s["stride"], s["pad"]
    oh, ow = g.shape[2:]
    gmat = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
    needs = s["needs"]
    dx = dw = db = None
    if needs[1]:
        dw = (gmat.T @ s["cols"]).reshape(w.shape)
    if s["has_bias"] and needs[2]:
        db = gmat.sum(axis=0)
    if needs[0]:
        dcols = (gmat @ w.reshape(c_out, -1)).reshape(n, oh, ow, c, kh, kw)
        dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        dx = dxp[:, :, pad : pad + h, pad : pad + wd]
    return (dx, dw, db) if s["has_bias"] else (dx, dw)


def conv2d_reference(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Direct nested-loop convolution; slow, kept only to cross-check :func:`conv2d`."""
    n, c, h, wd = x.shape
    c_out, c_in, kh, kw = w.shape
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(wd, kw, stride, pad)
    out = np.zeros((n, c_out, oh, ow), dtype=np.result_type(x, w))
    for bi in range(n):
        for co in range(c_out):
            for oi in range(oh):
                for oj in range(ow):
                    acc = 0.0
                    for ci in range(c_in):
                        for ki in range(kh):
                            for kj in range(kw):
                                r = oi * stride + ki - pad
                                q = oj * stride + kj - pad
                                if 0 <= r < h and 0 <= q < wd:
                                    acc += x[bi, ci, r, q] * w[co, ci, ki, kj]
                    out[bi, co, oi, oj] = acc + (b[co] if b is not None else 0.0)
    return out


# ----------------------------------------------------------------------- pooling


def max_pool2(x: Tensor) -> Tensor:
    """2x2 / stride-2 max pooling; ties resolve to the first window element in row-major order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2 needs even spatial size, got {x.shape}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return _emit("max_pool2", (x,), np.ascontiguousarray(out), {"arg": arg, "x_shape": x.shape})


@backward_rule("max_pool2")
def _max_pool2_backward(g: np.ndarray, s: dict):
    n, c, h, w = s["x_shape"]
    win = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
    np.put_along_axis(win, s["arg"][..., None], g[..., None], axis=-1)
    dx = win.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    return (dx,)


# --------------------------------------------------------------------- upsampling


def interp_matrix(n_in: int, factor: int, mode: str, dtype=np.float64) -> np.ndarray:
    """(n_in*factor, n_in) linear map along one axis.

    Bilinear follows the half-pixel (align-corners-false) convention:
    ``src = (dst + 0.5) / factor - 0.5`` clamped to ``[0, n_in - 1]``.
    """
    n_out = n_in * factor
    m = np.zeros((n_out, n_in), dtype=dtype)
    if mode == "nearest":
        m[np.arange(n_out), np.arange(n_out) // factor] = 1.0
        return m
    if mode != "bilinear":
        raise ValueError(f"unknown upsample mode {mode!r}")
    src = np.clip((np.arange(n_out) + 0.5) / factor - 0.5, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    np.add.at(m, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    return m


def upsample(x: Tensor, factor: int = 2, mode: str = "nearest") -> Tensor:
    n, c, h, w = x.shape
    if mode == "nearest":
        out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
        return _emit("upsample_nearest", (x,), out, {"factor": factor, "x_shape": x.shape})
    mh = interp_matrix(h, factor, mode).astype(x.dtype)
    mw = interp_matrix(w, factor, mode).astype(x.dtype)
    out = np.ascontiguousarray(np.matmul(np.matmul(mh, x.data), mw.T))
    return _emit("upsample_bilinear", (x,), out, {"mh": mh, "mw": mw})


def upsample2(x: Tensor, mode: str = "nearest") -> Tensor:
    return upsample(x, 2, mode)


@backward_rule("upsample_nearest")
def _upsample_nearest_backward(g: np.ndarray, s: dict):
    n, c, h, w = s["x_shape"]
    f = s["factor"]
    return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)


@backward_rule("upsample_bilinear")
def _upsample_bilinear_backward(g: np.ndarray, s: dict):
    return (np.matmul(np.matmul(s["mh"].T, g), s["mw"]),)


# ------------------------------------------------------------------ channel ops


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError(f"concat_channels expects rank-4 tensors, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels batch/spatial mismatch: {a.shape} vs {b.shape}")
    out = np.concatenate([a.data, b.data], axis=1)
    return _emit("concat", (a, b), out, {"split": a.shape[1]})


@backward_rule("concat")
def _concat_backward(g: np.ndarray, s: dict):
    k = s["split"]
    return g[:, :k], g[:, k:]


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    c = x.shape[1]
    if not 0 <= start < stop <= c:
        raise ShapeError(f"channel slice [{start}:{stop}] out of range for {x.shape}")
    out = np.ascontiguousarray(x.data[:, start:stop])
    return _emit("slice", (x,), out, {"start": start, "stop": stop, "x_shape": x.shape})


@backward_rule("slice")
def _slice_backward(g: np.ndarray, s: dict):
    dx = np.zeros(s["x_shape"], dtype=g.dtype)
    dx[:, s["start"] : s["stop"]] = g
    return (dx,)


# -------------------------------------------------------------------- pointwise


def _same_shape(x: Tensor, y: Tensor, kind: str) -> None:
    if x.shape != y.shape:
        raise ShapeError(f"{kind}: shape mismatch {x.shape} vs {y.shape}")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", (x,), x.data * mask, {"mask": mask})


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _emit("sigmoid", (x,), out, {"out": out})


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _emit("tanh", (x,), out, {"out": out})


def add(x: Tensor, y: Tensor) -> Tensor:
    _same_shape(x, y, "add")
    return _emit("add", (x, y), x.data + y.data)


def mul(x: Tensor, y: Tensor) -> Tensor:
    _same_shape(x, y, "mul")
    return _emit("mul", (x, y), x.data * y.data, {"x": x.data, "y": y.data})


def pointwise(kind: str, x: Tensor, y: Tensor | None = None) -> Tensor:
    unary = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}
    binary = {"add": add, "mul": mul}
    if kind in unary:
        return unary[kind](x)
    if kind in binary:
        if y is None:
            raise ShapeError(f"{kind} needs two operands")
        return binary[kind](x, y)
    raise ValueError(f"unknown pointwise kind {kind!r}")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@backward_rule("relu")
def _relu_backward(g, s):
    return (g * s["mask"],)


@backward_rule("sigmoid")
def _sigmoid_backward(g, s):
    y = s["out"]
    return (g * y * (1 - y),)


@backward_rule("tanh")
def _tanh_backward(g, s):
    y = s["out"]
    return (g * (1 - y * y),)


@backward_rule("add")
def _add_backward(g, s):
    return g, g


@backward_rule("mul")
def _mul_backward(g, s):
    return g * s["y"], g * s["x"]


# -------------------------------------------------------------------- reductions


def reduce(kind: str, x: Tensor) -> Tensor:
    if kind == "sum":
        out = np.asarray(x.data.sum(), dtype=x.dtype)
    elif kind == "mean":
        out = np.asarray(x.data.sum() / x.size, dtype=x.dtype)
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    return _emit("reduce", (x,), out, {"kind": kind, "x_shape": x.shape})


def sum_all(x: Tensor) -> Tensor:
    return reduce("sum", x)


def mean_all(x: Tensor) -> Tensor:
    return reduce("mean", x)


@backward_rule("reduce")
def _reduce_backward(g, s):
    shape = s["x_shape"]
    scale = 1.0 if s["kind"] == "sum" else 1.0 / int(np.prod(shape))
    return (np.full(shape, g * scale, dtype=g.dtype),)


# ------------------------------------------------------------ gradient checking


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-6,
    max_coords: int | None = 20,
    seed: int = 0,
) -> float:
    """Largest relative error between tape gradients and central differences.

    ``f`` re-evaluates the scalar objective from the current parameter values.
    At most ``max_coords`` coordinates per parameter are sampled (all when None).
    Relative error is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    params = list(params)
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        if max_coords is None or flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f().data)
            flat[i] = orig - eps
            down = float(f().data)
            flat[i] = orig
            num = (up - down) / (2 * eps)
            ana = float(a.reshape(-1)[i])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
