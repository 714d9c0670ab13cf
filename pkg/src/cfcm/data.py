"""Synthetic segmentation corpora, PGM/PPM I/O, resizing and cross-validation folds."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .tensor import interp_matrix


class ImageFormatError(ValueError):
    """Malformed or unsupported PGM/PPM content. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    masks: np.ndarray  # (N, H, W) uint8 labels
    ids: list[str]
    folds: np.ndarray
    groups: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4 or self.masks.ndim != 3:
            raise ValueError("images must be (N,C,H,W) and masks (N,H,W)")
        if self.images.shape[0] != self.masks.shape[0] or self.images.shape[2:] != self.masks.shape[1:]:
            raise ValueError(f"image stack {self.images.shape} and mask stack {self.masks.shape} disagree")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def label_count(self) -> int:
        """Distinct mask labels: 2 for binary, otherwise ``num_classes``."""
        return 2 if self.num_classes == 1 else self.num_classes

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.images[idx], self.masks[idx], [self.ids[i] for i in idx], self.folds[idx],
                       self.groups[idx], self.num_classes)


@dataclass(frozen=True)
class SynthConfig:
    count: int = 64
    image_size: int = 64
    num_classes: int = 1
    blobs: tuple[int, int] = (2, 2)
    noise: float = 0.08
    seed: int = 0
    folds: int = 5
    groups: int = 4

    def __post_init__(self):
        if self.num_classes not in (1, 3):
            raise ValueError(f"num_classes must be 1 (binary) or 3, got {self.num_classes}")
        if self.image_size < 32 or self.image_size % 32:
            raise ValueError(f"image_size must be a positive multiple of 32, got {self.image_size}")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        lo, hi = self.blobs
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid blob count range {self.blobs}")
        if self.noise < 0:
            raise ValueError("noise amplitude must be non-negative")


def _texture(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    t = gaussian_filter(rng.standard_normal((size, size)), sigma)
    return t / (t.std() + 1e-12)


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    return np.mgrid[0:size, 0:size].astype(np.float64) + 0.0


def _blob_sample(rng: np.random.Generator, cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    s = cfg.image_size
    yy, xx = _grid(s)
    count = int(rng.integers(cfg.blobs[0], cfg.blobs[1] + 1))
    level = np.zeros((s, s))
    mask = np.zeros((s, s), dtype=bool)
    for k in range(count):
        ry = rng.uniform(0.22, 0.30) * s
        rx = rng.uniform(0.10, 0.15) * s
        theta = rng.uniform(-0.3, 0.3)
        if count == 2:
            # paired lobes, left and right of the midline
            cx = (0.29 if k == 0 else 0.71) * s + rng.uniform(-0.04, 0.04) * s
            cy = rng.uniform(0.44, 0.56) * s
        else:
            cx = rng.uniform(0.3, 0.7) * s
            cy = rng.uniform(0.3, 0.7) * s
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        r = np.sqrt((u / rx) ** 2 + (v / ry) ** 2)
        level = np.maximum(level, 1.0 / (1.0 + np.exp(-(1.0 - r) * 12.0)))
        mask |= r <= 1.0
    body = 0.55 + 0.1 * _texture(rng, s, 6.0)
    image = body - 0.35 * level + cfg.noise * _texture(rng, s, 1.0)
    return np.clip(image, 0.0, 1.0)[None], mask.astype(np.uint8)


def _capsule(yy, xx, p0, p1, radius) -> np.ndarray:
    d = np.asarray(p1) - np.asarray(p0)
    t = ((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / max(float(d @ d), 1e-12)
    t = np.clip(t, 0.0, 1.0)
    py, px = p0[0] + t * d[0], p0[1] + t * d[1]
    return (yy - py) ** 2 + (xx - px) ** 2 <= radius**2


def _rod_sample(rng: np.random.Generator, cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    s = cfg.image_size
    yy, xx = _grid(s)
    while True:
        # shaft enters from a random border and ends inside; the tip bends off its end
        side = rng.integers(4)
        pos = rng.uniform(0.2, 0.8) * s
        start = [(-2.0, pos), (pos, s + 1.0), (s + 1.0, pos), (pos, -2.0)][side]
        inward = np.array([(1, 0), (0, -1), (-1, 0), (0, 1)][side], dtype=float)
        ang = rng.uniform(-0.5, 0.5)
        rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
        direction = rot @ inward
        shaft_len = rng.uniform(0.45, 0.6) * s
        joint = np.asarray(start) + direction * shaft_len
        bend = rng.uniform(0.3, 0.7) * rng.choice([-1.0, 1.0])
        rot2 = np.array([[np.cos(bend), -np.sin(bend)], [np.sin(bend), np.cos(bend)]])
        tip_end = joint + (rot2 @ direction) * rng.uniform(0.16, 0.24) * s
        margin = 0.08 * s
        if np.all((tip_end > margin) & (tip_end < s - margin)) and np.all((joint > margin) & (joint < s - margin)):
            break
    shaft_r = rng.uniform(0.055, 0.075) * s
    tip_r = rng.uniform(0.08, 0.1) * s
    shaft = _capsule(yy, xx, start, joint, shaft_r)
    tip = _capsule(yy, xx, joint, tip_end, tip_r)
    mask = np.zeros((s, s), dtype=np.uint8)
    mask[shaft] = 1
    mask[tip] = 2

    tissue = np.stack([0.62, 0.30, 0.28])[:, None, None] + 0.08 * _texture(rng, s, 5.0)[None]
    image = tissue.copy()
    for _ in range(int(rng.integers(cfg.blobs[0], cfg.blobs[1] + 1))):
        # clutter: soft tissue-coloured patches that never reach instrument intensity
        cy, cx = rng.uniform(0, s, size=2)
        rad = rng.uniform(0.05, 0.12) * s
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * rad**2))
        image = image + np.array([0.15, 0.05, 0.02])[:, None, None] * blob[None]
    image[:, shaft] = np.array([0.80, 0.80, 0.85])[:, None]
    image[:, tip] = np.array([0.45, 0.45, 0.55])[:, None]
    image = gaussian_filter(image, sigma=(0, 0.7, 0.7))
    image = image + cfg.noise * rng.standard_normal(image.shape)
    return np.clip(image, 0.0, 1.0), mask


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    """Deterministic per ``cfg.seed``; each sample is drawn from its own ``(seed, index)`` stream.

    Binary corpora (``num_classes == 1``) hold paired soft-edged ellipses over
    textured noise. Three-class corpora hold an RGB articulated rod: label 1
    for the shaft, label 2 for the tip.
    """
    make = _blob_sample if cfg.num_classes == 1 else _rod_sample
    channels = 1 if cfg.num_classes == 1 else 3
    images = np.zeros((cfg.count, channels, cfg.image_size, cfg.image_size), dtype=np.float32)
    masks = np.zeros((cfg.count, cfg.image_size, cfg.image_size), dtype=np.uint8)
    for i in range(cfg.count):
        img, m = make(np.random.default_rng([cfg.seed, i]), cfg)
        # quantise to 8 bits so the corpus survives a PGM/PPM round trip unchanged
        images[i] = np.round(img * 255.0).astype(np.float32) / np.float32(255)
        masks[i] = m
    folds = np.zeros(cfg.count, dtype=int)
    if cfg.folds >= 2 and cfg.count >= cfg.folds:
        for f, (_, test) in enumerate(kfold_split(cfg.count, cfg.folds, cfg.seed)):
            folds[test] = f
    groups = (np.arange(cfg.count) * max(cfg.groups, 1)) // cfg.count
    ids = [f"{i:05d}" for i in range(cfg.count)]
    return Dataset(images, masks, ids, folds, groups, cfg.num_classes)


# ------------------------------------------------------------------------ PGM / PPM


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos : pos + 1]
        if ch == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ImageFormatError("unexpected end of header", start)
    return buf[start:pos], pos


def decode_pnm(buf: bytes) -> tuple[np.ndarray, int]:
    """Raw 8-bit samples of a binary P5/P6 file as ((C, H, W) uint8, maxval)."""
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r}; expected P5 or P6", 0)
    fields = []
    for label in ("width", "height", "maxval"):
        start = pos
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit() or int(tok) < 1:
            raise ImageFormatError(f"invalid {label} {tok!r}", start)
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval > 255:
        raise ImageFormatError(f"unsupported depth: maxval {maxval} > 255", pos)
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise ImageFormatError("missing whitespace after header", pos)
    pos += 1
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    payload = buf[pos : pos + need]
    if len(payload) < need:
        raise ImageFormatError(f"truncated payload: need {need} bytes, have {len(payload)}", pos + len(payload))
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    if arr.max(initial=0) > maxval:
        raise ImageFormatError(f"sample exceeds maxval {maxval}", pos)
    return arr.transpose(2, 0, 1).copy(), maxval


def encode_pnm(samples: np.ndarray) -> bytes:
    samples = np.asarray(samples)
    if samples.ndim == 2:
        samples = samples[None]
    c, h, w = samples.shape
    if c not in (1, 3):
        raise ValueError(f"PNM holds 1 or 3 channels, got {c}")
    magic = b"P5" if c == 1 else b"P6"
    header = magic + f"\n{w} {h}\n255\n".encode()
    return header + np.ascontiguousarray(samples.astype(np.uint8).transpose(1, 2, 0)).tobytes()


def load_pgm(path) -> np.ndarray:
    """Image as (C, H, W) float32 scaled to [0, 1]."""
    raw, maxval = decode_pnm(Path(path).read_bytes())
    return (raw.astype(np.float32) / np.float32(maxval)).astype(np.float32)


def save_pgm(path, image: np.ndarray) -> None:
    """Write a [0, 1] image of shape (H, W) or (C, H, W) as 8-bit P5/P6."""
    q = np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(path).write_bytes(encode_pnm(q))


def save_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.min(initial=0) < 0 or mask.max(initial=0) > 255:
        raise ValueError("mask labels must fit in 8 bits")
    Path(path).write_bytes(encode_pnm(mask.astype(np.uint8)))


def load_mask(path) -> np.ndarray:
    raw, _ = decode_pnm(Path(path).read_bytes())
    if raw.shape[0] != 1:
        raise ImageFormatError("label masks must be single-channel P5", 0)
    return raw[0]


# ------------------------------------------------------------------------- resizing


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    if n_out % n_in == 0:
        return interp_matrix(n_in, n_out // n_in, "bilinear")
    src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    return m


def resize_bilinear(image: np.ndarray, target_size) -> np.ndarray:
    """Half-pixel bilinear resize of an (H, W) or (C, H, W) image."""
    th, tw = (target_size, target_size) if np.isscalar(target_size) else target_size
    image = np.asarray(image)
    h, w = image.shape[-2:]
    if (h, w) == (th, tw):
        return image.copy()
    out = _resize_matrix(h, th) @ image.astype(np.float64) @ _resize_matrix(w, tw).T
    return out.astype(image.dtype if image.dtype.kind == "f" else np.float64)


def resize_nearest(mask: np.ndarray, target_size) -> np.ndarray:
    """Nearest-neighbour resize; labels stay integral."""
    th, tw = (target_size, target_size) if np.isscalar(target_size) else target_size
    h, w = mask.shape[-2:]
    rows = np.minimum(((np.arange(th) + 0.5) * h / th).astype(int), h - 1)
    cols = np.minimum(((np.arange(tw) + 0.5) * w / tw).astype(int), w - 1)
    return mask[..., rows[:, None], cols[None, :]]


# -------------------------------------------------------------------------- folds


def kfold_split(n: int, k: int, seed: int = 0, groups=None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Seeded k-fold partition of ``range(n)``.

    With ``groups`` every group lands whole in one test fold (groups are dealt
    to folds round-robin after a seeded shuffle), so ``k == #groups`` gives
    leave-one-group-out.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if n < k:
        raise ValueError(f"cannot split {n} items into {k} folds")
    ids = np.arange(n)
    rng = np.random.default_rng(seed)
    if groups is None:
        parts = np.array_split(rng.permutation(n), k)
    else:
        groups = np.asarray(groups)
        if groups.shape != (n,):
            raise ValueError("groups must hold one label per item")
        labels = np.unique(groups)
        if len(labels) < k:
            raise ValueError(f"{len(labels)} groups cannot fill {k} folds")
        order = labels[rng.permutation(len(labels))] if len(labels) > k else labels
        parts = [ids[np.isin(groups, order[f::k])] for f in range(k)]
    out = []
    for test in parts:
        test = np.sort(test)
        out.append((np.setdiff1d(ids, test), test))
    return out


# ------------------------------------------------------------ dataset directories


def write_dataset(ds: Dataset, root) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    ext = ".pgm" if ds.images.shape[1] == 1 else ".ppm"
    for i, sid in enumerate(ds.ids):
        save_pgm(root / "images" / f"{sid}{ext}", ds.images[i])
        save_mask(root / "masks" / f"{sid}.pgm", ds.masks[i])
    with open(root / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "fold", "group"])
        for sid, fold, group in zip(ds.ids, ds.folds, ds.groups):
            writer.writerow([sid, int(fold), int(group)])
    return root


def read_dataset(root, num_classes: int | None = None) -> Dataset:
    root = Path(root)
    manifest = root / "manifest.csv"
    if not manifest.is_file():
        raise FileNotFoundError(f"no manifest.csv in {root}")
    with open(manifest, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{manifest} lists no samples")
    images, masks = [], []
    for row in rows:
        sid = row["id"]
        img_path = root / "images" / f"{sid}.pgm"
        if not img_path.exists():
            img_path = root / "images" / f"{sid}.ppm"
        images.append(load_pgm(img_path))
        masks.append(load_mask(root / "masks" / f"{sid}.pgm"))
    masks_arr = np.stack(masks)
    if num_classes is None:
        num_classes = 1 if masks_arr.max() <= 1 else int(masks_arr.max()) + 1
    return Dataset(
        np.stack(images).astype(np.float32),
        masks_arr,
        [r["id"] for r in rows],
        np.array([int(r["fold"]) for r in rows]),
        np.array([int(r["group"]) for r in rows]),
        num_classes,
    )


def ensure_writable_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if not os.access(path, os.W_OK):
        raise PermissionError(f"cannot write to {path}")
    return path
