"""Image datasets: binary container, PGM directories, resizing and synthetic blobs.

Binary layout (little endian)::

    b"UDLB" | u32 version | u32 n | u32 h | u32 w | u32 channels | u32 class_count
    | n*h*w*channels float32 pixels (NHWC) | n int32 labels
"""

from __future__ import annotations

import logging
import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import DataFormatError

logger = logging.getLogger(__name__)

__all__ = [
    "ImageDataset",
    "save_binary",
    "load_binary",
    "load_image_dir",
    "downsample",
    "synth_blobs",
    "save_labels",
    "load_labels",
]

MAGIC = b"UDLB"
VERSION = 1
_HEADER = struct.Struct("<4s6I")
_NAME = re.compile(r"^(?P<cls>.+?)_+(?P<idx>\d+)$")
IMAGE_SUFFIXES = (".pgm", ".pnm", ".png")


@dataclass
class ImageDataset:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = ""
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim == 3:
            self.images = self.images[..., None]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataFormatError(f"images must be [n, h, w, c], got shape {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataFormatError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataFormatError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataFormatError(f"labels must lie in [0, {self.class_count})")

    @property
    def n(self):
        return self.images.shape[0]

    @property
    def shape(self):
        return self.images.shape[1:]

    def __len__(self):
        return self.n


def save_binary(ds: ImageDataset, path):
    n, h, w, c = ds.images.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, h, w, c, ds.class_count))
        fh.write(ds.images.astype("<f4").tobytes())
        fh.write(ds.labels.astype("<i4").tobytes())


def load_binary(path, name=None) -> ImageDataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataFormatError(f"{path}: file too short for header ({len(raw)} bytes)")
    magic, version, n, h, w, c, k = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * n * h * w * c + 4 * n
    if len(raw) != expected:
        raise DataFormatError(f"{path}: truncated or oversized payload: expected {expected} bytes, got {len(raw)}")
    off = _HEADER.size
    pixels = np.frombuffer(raw, "<f4", n * h * w * c, off).reshape(n, h, w, c)
    labels = np.frombuffer(raw, "<i4", n, off + 4 * pixels.size)
    if n and (labels.min() < 0 or labels.max() >= k):
        raise DataFormatError(f"{path}: label {int(labels.max())} out of range for {k} classes")
    if n and (pixels.min() < 0 or pixels.max() > 1):
        raise DataFormatError(f"{path}: pixel values outside [0, 1]")
    prov = {"source": str(path), "format": "udll-binary"}
    if n == 0:
        logger.warning("%s: dataset is empty", path)
        prov["empty"] = True
    return ImageDataset(pixels.astype(np.float64), labels, k, name or Path(path).stem, prov)


def _natural_key(token):
    return [(0, int(t), "") if t.isdigit() else (1, 0, t) for t in re.split(r"(\d+)", token)]


def _read_pgm(path):
    with Image.open(path) as img:
        if img.mode not in ("L", "I", "I;16", "I;16B", "1"):
            raise DataFormatError(f"{path}: not a grayscale image (format {img.format}, mode {img.mode})")
        peak = 1.0 if img.mode == "1" else (255.0 if img.mode == "L" else 65535.0)
        return np.asarray(img, dtype=np.float64) / peak


def load_image_dir(path, pattern=None, target_hw=None, name=None) -> ImageDataset:
    """Read grayscale ``<class>_<index>`` images in (class, index) order.

    By default every ``.pgm``, ``.pnm`` and ``.png`` file is read; ``pattern``
    selects files by glob instead. Repeated underscores are allowed, as in
    ``obj3__12.png``. Numeric class tokens are used as labels directly;
    otherwise the distinct tokens are numbered from 0 in natural order.
    """
    entries = []
    for f in Path(path).glob(pattern or "*"):
        if pattern is None and f.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        m = _NAME.match(f.stem)
        if not m:
            raise DataFormatError(f"{f.name}: expected a '<class>_<index>' file name")
        entries.append((m["cls"], int(m["idx"]), f))
    if not entries:
        raise DataFormatError(f"{path}: no image files found")
    numeric = all(c.isdigit() for c, _, _ in entries)
    if numeric:
        classes = {c: int(c) for c, _, _ in entries}
    else:
        classes = {c: i for i, c in enumerate(sorted({c for c, _, _ in entries}, key=_natural_key))}
    entries.sort(key=lambda e: (classes[e[0]], e[1], e[2].name))
    images = []
    for _, _, f in entries:
        img = _read_pgm(f)
        if target_hw is not None:
            img = downsample(img, *target_hw)
        images.append(img)
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DataFormatError(f"{path}: images have differing sizes {sorted(shapes)}; pass target_hw")
    labels = np.array([classes[c] for c, _, _ in entries])
    prov = {
        "source": str(path),
        "format": "image-directory",
        "normalization": "pixel / maxval -> [0, 1]",
        "downsample": None if target_hw is None else {"method": "bilinear", "size": list(target_hw)},
    }
    return ImageDataset(np.stack(images)[..., None], labels, int(labels.max()) + 1, name or Path(path).name, prov)


def _interp_matrix(src, dst):
    """Linear interpolation weights sampling ``dst`` pixel centres from ``src`` pixels."""
    M = np.zeros((dst, src))
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0, src - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    M[np.arange(dst), lo] += 1 - frac
    M[np.arange(dst), hi] += frac
    return M


def downsample(image, target_h, target_w):
    """Bilinear resize of a 2-d (or ``[h, w, 1]``) image, sampling at pixel centres."""
    image = np.asarray(image, dtype=np.float64)
    squeeze = image.ndim == 3
    img = image[..., 0] if squeeze else image
    h, w = img.shape
    if target_h < 1 or target_w < 1:
        raise ValueError("target dimensions must be positive")
    if target_h > h or target_w > w:
        raise ValueError(f"target {(target_h, target_w)} exceeds source {(h, w)}")
    out = _interp_matrix(h, target_h) @ img @ _interp_matrix(w, target_w).T
    out = np.clip(out, 0.0, 1.0)
    return out[..., None] if squeeze else out


def synth_blobs(classes=3, per_class=30, h=16, w=16, noise_sigma=0.05, seed=0) -> ImageDataset:
    """One bright rectangle per class on a dark grid, plus clamped Gaussian noise.

    Class ``c`` occupies cell ``c`` of a ``ceil(sqrt(classes))``-square grid.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    g = math.ceil(math.sqrt(classes))
    ch, cw = h // g, w // g
    if ch < 2 or cw < 2:
        raise ValueError(f"{h}x{w} images are too small for {classes} classes")
    templates = np.zeros((classes, h, w))
    for c in range(classes):
        r0, c0 = (c // g) * ch, (c % g) * cw
        templates[c, r0 : r0 + ch - 1, c0 : c0 + cw - 1] = 1.0
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), per_class)
    images = templates[labels] + noise_sigma * rng.standard_normal((labels.size, h, w))
    images = np.clip(images, 0.0, 1.0)
    prov = {"generator": "synth_blobs", "classes": classes, "per_class": per_class, "noise_sigma": noise_sigma, "seed": seed}
    return ImageDataset(images[..., None], labels, classes, "synth_blobs", prov)


def save_labels(labels, path):
    Path(path).write_text("".join(f"{int(v)}\n" for v in labels))


def load_labels(path):
    text = Path(path).read_text().split()
    try:
        return np.array([int(t) for t in text], dtype=np.int64)
    except ValueError as exc:
        raise DataFormatError(f"{path}: labels must be integers, one per line") from exc
