"""Datasets: IDX reader/writer, synthetic blob images, seed derivation."""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class LabeledSet:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "LabeledSet":
        return LabeledSet(self.images[idx], self.labels[idx])


def derive_seed(master: int, *names: str) -> np.random.SeedSequence:
    """Stable child seed for a named stage.

    Children are keyed by CRC32 of their names rather than by position, so
    adding a new stage never shifts another stage's stream.
    """
    key = tuple(zlib.crc32(n.encode("utf-8")) for n in names)
    return np.random.SeedSequence(int(master), spawn_key=key)


def rng_for(master: int, *names: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *names))


# ---------------------------------------------------------------- IDX

def read_idx(path: str | Path) -> np.ndarray:
    """Raw IDX payload as uint8 with the file's dimensions."""
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise IdxFormatError("file shorter than the magic number", len(buf))
    (magic,) = struct.unpack_from(">I", buf, 0)
    if magic not in (IMAGES_MAGIC, LABELS_MAGIC):
        raise IdxFormatError(
            f"bad magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x} (images) "
            f"or 0x{LABELS_MAGIC:08x} (labels)", 0)
    ndim = magic & 0xFF
    if len(buf) < 4 + 4 * ndim:
        raise IdxFormatError("truncated dimension header", len(buf))
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    start = 4 + 4 * ndim
    need = int(np.prod(dims, dtype=np.int64))
    if len(buf) - start < need:
        raise IdxFormatError(f"truncated payload: need {need} bytes, have {len(buf) - start}", len(buf))
    if len(buf) - start > need:
        raise IdxFormatError(f"{len(buf) - start - need} trailing bytes", start + need)
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=start).reshape(dims)


def load_idx(path: str | Path) -> np.ndarray:
    """Images as float32 (N,1,H,W) scaled to [0,1], or labels as int64 (N,)."""
    raw = read_idx(path)
    if raw.ndim == 1:
        return raw.astype(np.int64)
    return (raw.astype(np.float32) / np.float32(255.0))[:, None, :, :]


def write_idx(path: str | Path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise TypeError("write_idx stores unsigned bytes only")
    magic = LABELS_MAGIC if arr.ndim == 1 else IMAGES_MAGIC
    if arr.ndim not in (1, 3):
        raise ValueError(f"expected (N,) labels or (N,H,W) images, got shape {arr.shape}")
    header = struct.pack(f">I{arr.ndim}I", magic, *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def load_idx_pair(images_path: str | Path, labels_path: str | Path) -> LabeledSet:
    return LabeledSet(load_idx(images_path), load_idx(labels_path))


# ---------------------------------------------------------------- synthetic

def synth_dataset(num_classes: int, n_per_class: int, image_size=(1, 28, 28),
                  sigma: float = 0.08, seed: int = 0, jitter: float = 0.04,
                  noise: float = 0.03) -> LabeledSet:
    """Gaussian intensity blobs, one class-specific position per class.

    Class centres sit on a circle around the image centre. Each sample jitters
    the centre, width and amplitude and adds low-level pixel noise. ``sigma``
    and ``jitter`` are fractions of the image height.
    """
    if isinstance(image_size, int):
        image_size = (1, image_size, image_size)
    c, h, w = image_size
    rng = np.random.default_rng(seed)
    n = num_classes * n_per_class
    labels = np.repeat(np.arange(num_classes), n_per_class)
    angle = 2 * np.pi * labels / max(num_classes, 1)
    radius = 0.0 if num_classes == 1 else 0.28
    cy = 0.5 + radius * np.sin(angle) + rng.normal(0, jitter, n)
    cx = 0.5 + radius * np.cos(angle) + rng.normal(0, jitter, n)
    width = sigma * rng.uniform(0.8, 1.25, n)
    amp = rng.uniform(0.6, 1.0, n)
    yy = (np.arange(h) + 0.5) / h
    xx = (np.arange(w) + 0.5) / w
    dy = (yy[None, :] - cy[:, None]) ** 2
    dx = (xx[None, :] - cx[:, None]) ** 2
    blob = amp[:, None, None] * np.exp(-(dy[:, :, None] + dx[:, None, :]) / (2 * width[:, None, None] ** 2))
    img = np.repeat(blob[:, None], c, axis=1)
    img = img + rng.uniform(0, noise, img.shape)
    img = np.clip(img, 0, 1).astype(np.float32)
    order = rng.permutation(n)
    return LabeledSet(img[order], labels[order].astype(np.int64))
