"""Soft-dice objective, Adam, the epoch loop and the binary checkpoint format."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable

import numpy as np

from .data import Dataset
from .decoder import ModelConfig, SegmentationNet, build_model
from .layers import EVAL, TRAIN, Module
from .tensor import ShapeError, Tape, Tensor, _emit, _sigmoid, backward_rule

DICE_EPS = 1e-7


# ---------------------------------------------------------------------- dice loss


def class_probabilities(logits: np.ndarray) -> np.ndarray:
    """Sigmoid for a single logit channel, channel softmax otherwise."""
    if logits.shape[1] == 1:
        return _sigmoid(logits)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def one_hot(target: np.ndarray, channels: int, dtype=np.float64) -> np.ndarray:
    """(n, h, w) labels -> (n, channels, h, w); a single channel means the foreground indicator."""
    target = np.asarray(target)
    if channels == 1:
        return (target == 1)[:, None].astype(dtype)
    return (target[:, None] == np.arange(channels)[None, :, None, None]).astype(dtype)


def dice_classes(channels: int) -> list[int]:
    # the background channel is left out of the multi-class mean
    return [0] if channels == 1 else list(range(1, channels))


def dice_from_probs(p: np.ndarray, g: np.ndarray, eps: float = DICE_EPS) -> np.ndarray:
    """Per-channel soft dice ``2 sum(p g) / (sum p^2 + sum g^2 + eps)`` over all other axes."""
    axes = (0,) + tuple(range(2, p.ndim))
    num = 2.0 * (p * g).sum(axis=axes)
    den = (p * p).sum(axis=axes) + (g * g).sum(axis=axes) + eps
    return num / den


def _validate_target(target: np.ndarray, logits_shape: tuple[int, ...]) -> np.ndarray:
    target = np.asarray(target)
    n, c, h, w = logits_shape
    if target.shape != (n, h, w):
        raise ShapeError(f"target shape {target.shape} does not match logits {logits_shape}")
    limit = 2 if c == 1 else c
    if target.size and (target.min() < 0 or target.max() >= limit):
        raise ValueError(f"labels must lie in [0, {limit}), found range [{target.min()}, {target.max()}]")
    return target


def soft_dice_loss(logits: Tensor, target: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """``1 - mean_k dice_k`` with probabilities from :func:`class_probabilities`."""
    target = _validate_target(target, logits.shape)
    p = class_probabilities(logits.data)
    g = one_hot(target, logits.shape[1], p.dtype)
    classes = dice_classes(logits.shape[1])
    d = dice_from_probs(p, g, eps)
    loss = np.asarray(1.0 - d[classes].mean(), dtype=logits.dtype)
    return _emit("soft_dice", (logits,), loss, {"p": p, "g": g, "eps": eps, "classes": classes})


@backward_rule("soft_dice")
def _soft_dice_backward(grad: np.ndarray, s: dict):
    p, g, eps, classes = s["p"], s["g"], s["eps"], s["classes"]
    axes = (0, 2, 3)
    num = (p * g).sum(axis=axes)
    den = (p * p).sum(axis=axes) + (g * g).sum(axis=axes) + eps
    # d dice_k / d p_k = 2 g / den - 4 num p / den^2
    dd = 2.0 * g / den[None, :, None, None] - 4.0 * (num / den**2)[None, :, None, None] * p
    weight = np.zeros(p.shape[1])
    weight[classes] = -1.0 / len(classes)
    dp = grad * dd * weight[None, :, None, None]
    if p.shape[1] == 1:
        dz = dp * p * (1.0 - p)
    else:
        dz = p * (dp - (dp * p).sum(axis=1, keepdims=True))
    return (dz,)


def predict_labels(logits: np.ndarray) -> np.ndarray:
    """Hard labels: threshold at logit 0 for one channel, channel argmax otherwise."""
    if logits.shape[1] == 1:
        return (logits[:, 0] > 0).astype(np.uint8)
    return logits.argmax(axis=1).astype(np.uint8)


def hard_dice(pred: np.ndarray, target: np.ndarray, channels: int) -> float:
    """Mean foreground dice of hard predictions pooled over the batch."""
    labels = [1] if channels == 1 else list(range(1, channels))
    scores = []
    for k in labels:
        a, b = pred == k, target == k
        total = a.sum() + b.sum()
        scores.append(1.0 if total == 0 else 2.0 * np.logical_and(a, b).sum() / total)
    return float(np.mean(scores))


# -------------------------------------------------------------------------- Adam


class Adam:
    """Bias-corrected Adam over a name -> Tensor mapping."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.step_count = 0

    def step(self, lr: float) -> None:
        adam_step(self.params, {k: p.grad for k, p in self.params.items()}, self, lr)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"optim.m.{k}": v for k, v in self.m.items()}
        out.update({f"optim.v.{k}": v for k, v in self.v.items()})
        return out


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: Adam, lr: float) -> None:
    for name in params:
        if grads.get(name) is None:
            raise KeyError(f"no gradient for parameter {name!r}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


# ------------------------------------------------------------------ training loop


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 1e-5
    epochs: int = 30
    seed: int = 0
    num_classes: int = 1
    width_mult: Fraction | float | str = Fraction(1, 8)
    depth: int = 18
    decoder_kind: str = "cfcm"
    input_size: int = 64
    in_channels: int = 1
    hidden: int | None = None
    upsample_mode: str = "nearest"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        self.model_config()

    def model_config(self) -> ModelConfig:
        try:
            return ModelConfig(
                depth=self.depth,
                width_mult=self.width_mult,
                in_channels=self.in_channels,
                num_classes=self.num_classes,
                decoder=self.decoder_kind,
                hidden=self.hidden,
                upsample_mode=self.upsample_mode,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def as_text(self) -> str:
        items = asdict(self)
        items["width_mult"] = str(Fraction(self.model_config().width_mult))
        return "".join(f"{k}={'' if v is None else v}\n" for k, v in items.items())

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        raw = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        kwargs = {}
        for f in cls.__dataclass_fields__.values():
            if f.name not in raw:
                continue
            val = raw[f.name]
            if f.name == "learning_rate":
                kwargs[f.name] = float(val)
            elif f.name in ("decoder_kind", "upsample_mode", "width_mult"):
                kwargs[f.name] = val
            elif f.name == "hidden":
                kwargs[f.name] = int(val) if val else None
            else:
                kwargs[f.name] = int(val)
        return cls(**kwargs)


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    mean_train_dice: float
    steps: list[tuple[int, int, float, float]] = field(default_factory=list)


def train_step(model: Module, optimizer: Adam, images: np.ndarray, masks: np.ndarray, lr: float) -> tuple[float, float]:
    x = Tensor(images)
    with Tape() as tape:
        logits = model(x, TRAIN)
        loss = soft_dice_loss(logits, masks)
        tape.backward(loss)
    optimizer.step(lr)
    dice = hard_dice(predict_labels(logits.data), masks, logits.shape[1])
    return float(loss.data), dice


def train_epoch(model: Module, dataset: Dataset, cfg: TrainConfig, optimizer: Adam, epoch: int) -> EpochStats:
    """One pass over ``dataset`` in a (seed, epoch)-determined order, dropping the last partial batch."""
    n = len(dataset)
    if n == 0:
        raise ConfigError("dataset is empty")
    if n < cfg.batch_size:
        raise ConfigError(f"dataset of {n} samples is smaller than one batch of {cfg.batch_size}")
    order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
    stats = EpochStats(epoch, 0.0, 0.0)
    for step in range(n // cfg.batch_size):
        idx = np.sort(order[step * cfg.batch_size : (step + 1) * cfg.batch_size])
        loss, dice = train_step(model, optimizer, dataset.images[idx], dataset.masks[idx], cfg.learning_rate)
        stats.steps.append((epoch, step, loss, dice))
    stats.mean_loss = float(np.mean([s[2] for s in stats.steps]))
    stats.mean_train_dice = float(np.mean([s[3] for s in stats.steps]))
    return stats


def predict(model: Module, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Eval-mode logits for an (N, C, H, W) stack."""
    outs = []
    for start in range(0, images.shape[0], batch_size):
        outs.append(model(Tensor(images[start : start + batch_size]), EVAL).data)
    return np.concatenate(outs, axis=0)


def evaluate_dice(model: Module, dataset: Dataset, batch_size: int = 16) -> float:
    """Mean over samples of the per-sample mean foreground dice."""
    from .metrics import foreground_dice

    labels = predict_labels(predict(model, dataset.images, batch_size))
    return float(np.mean([foreground_dice(p, t, dataset.label_count) for p, t in zip(labels, dataset.masks)]))


@dataclass
class FitResult:
    model: SegmentationNet
    optimizer: Adam
    epochs: list[EpochStats]
    val_dice: list[float]


def fit(cfg: TrainConfig, train_set: Dataset, val_set: Dataset | None = None,
        on_epoch: Callable[[EpochStats, float | None], None] | None = None) -> FitResult:
    if len(train_set) < cfg.batch_size:
        raise ConfigError(f"dataset of {len(train_set)} samples is smaller than one batch of {cfg.batch_size}")
    model = build_model(cfg.model_config(), cfg.seed)
    optimizer = Adam(model.named_parameters())
    history, val_history = [], []
    for epoch in range(cfg.epochs):
        stats = train_epoch(model, train_set, cfg, optimizer, epoch)
        val = evaluate_dice(model, val_set) if val_set is not None and len(val_set) else None
        history.append(stats)
        if val is not None:
            val_history.append(val)
        if on_epoch is not None:
            on_epoch(stats, val)
    return FitResult(model, optimizer, history, val_history)


# -------------------------------------------------------------------- checkpoints

MAGIC = b"CFCM"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    version: int
    config_text: str
    tensors: dict[str, np.ndarray]

    @property
    def config(self) -> dict[str, str]:
        return dict(line.split("=", 1) for line in self.config_text.splitlines() if "=" in line)


def encode_checkpoint(config_text: str, tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    cfg_bytes = config_text.encode("utf-8")
    parts += [struct.pack("<I", len(cfg_bytes)), cfg_bytes, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        arr = np.asarray(arr)
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<I", arr.ndim)]
        parts += [struct.pack(f"<{arr.ndim}I", *arr.shape)]
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint: {what} needs {n} bytes at offset {pos}, "
                                  f"file has {len(buf)}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    def u32(what: str) -> int:
        return struct.unpack("<I", take(4, what))[0]

    if take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic: not a CFCM checkpoint")
    version = u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    try:
        config_text = take(u32("config length"), "config text").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"config text is not UTF-8: {exc}") from exc
    tensors = {}
    for _ in range(u32("tensor count")):
        name = take(u32("name length"), "tensor name").decode("utf-8", errors="replace")
        rank = u32(f"rank of {name!r}")
        if rank > 4:
            raise CheckpointError(f"tensor {name!r} has unsupported rank {rank}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name!r}"))
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * count, f"data of {name!r}"), dtype="<f4").reshape(dims)
        tensors[name] = data.astype(np.float32)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after tensor table")
    return Checkpoint(version, config_text, tensors)


def save_checkpoint(model: Module, optimizer: Adam | None, cfg: TrainConfig, path) -> None:
    text = cfg.as_text()
    tensors = model.state_dict()
    if optimizer is not None:
        text += f"optim_step={optimizer.step_count}\n"
        tensors.update(optimizer.state_tensors())
    Path(path).write_bytes(encode_checkpoint(text, tensors))


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())


def load_checkpoint(path, model: Module | None = None) -> Module:
    """Restore model tensors; builds the model from the embedded config when none is given."""
    ckpt = read_checkpoint(path)
    if model is None:
        cfg = TrainConfig.from_text(ckpt.config_text)
        model = build_model(cfg.model_config(), cfg.seed)
    model_state = {k: v for k, v in ckpt.tensors.items() if not k.startswith("optim.")}
    model.load_state_dict(model_state)
    return model


def load_optimizer(ckpt: Checkpoint, model: Module) -> Adam | None:
    if "optim_step" not in ckpt.config:
        return None
    opt = Adam(model.named_parameters())
    opt.step_count = int(ckpt.config["optim_step"])
    for k in opt.m:
        opt.m[k] = ckpt.tensors[f"optim.m.{k}"].copy()
        opt.v[k] = ckpt.tensors[f"optim.v.{k}"].copy()
    return opt
