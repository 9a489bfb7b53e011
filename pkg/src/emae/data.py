"""Procedural labelled images and the EMAEDS1 on-disk dataset format.

Layout (little-endian)::

    b"EMAEDS1\\n"                       8 bytes
    count, H, W, C, n_classes         5 x u32
    pixels                            count*H*W*C x u8 (image-major, then H, W, C)
    labels                            count x u32
"""
from __future__ import annotations

import colorsys
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import FormatError, InvalidConfiguration

MAGIC = b"EMAEDS1\n"
_HEADER = struct.Struct("<8s5I")
HEADER_SIZE = _HEADER.size
KINDS = ("shapes", "gradients", "textures")
NOISE_STD = 0.004
HUE_JITTER = 0.1  # hue bands are 0.25 wide, so class bands do not overlap


@dataclass(frozen=True)
class DatasetHeader:
    count: int
    height: int
    width: int
    channels: int
    n_classes: int

    @property
    def image_bytes(self):
        return self.height * self.width * self.channels

    @property
    def file_size(self):
        return HEADER_SIZE + self.count * self.image_bytes + 4 * self.count


@dataclass(frozen=True)
class SynthSpec:
    n_images: int = 512
    image_size: int = 32
    channels: int = 3
    n_classes: int = 4
    seed: int = 0
    kind: str = "shapes"

    def __post_init__(self):
        if self.n_classes < 2:
            raise InvalidConfiguration(f"n_classes must be >= 2, got {self.n_classes}")
        if self.kind not in KINDS:
            raise InvalidConfiguration(f"unknown generator kind {self.kind!r}; expected one of {KINDS}")
        if self.n_images < 1 or self.image_size < 4:
            raise InvalidConfiguration("need n_images >= 1 and image_size >= 4")


# ---------------------------------------------------------------------------
# Generators. Each returns a float image in [0, 1] of shape [S, S, 3].


def _coords(size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy + 0.5, xx + 0.5


def _shape_mask(shape_id, size, g):
    yy, xx = _coords(size)
    r = g.uniform(0.18, 0.32) * size
    cy, cx = g.uniform(0.3, 0.7, size=2) * size
    dy, dx = yy - cy, xx - cx
    if shape_id == 0:  # square
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if shape_id == 1:  # disk
        return dy * dy + dx * dx <= r * r
    if shape_id == 2:  # upward triangle
        top = cy - r
        return (yy >= top) & (yy <= cy + r) & (np.abs(dx) <= (yy - top) * 0.6)
    arm = max(r * 0.3, 1.0)  # cross
    return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))


def _rgb(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def _shapes(label, n_classes, size, g):
    # shape = label % 4, foreground hue drawn from the class band
    if n_classes > 4:
        band, n_bands = label // 4, -(-n_classes // 4)
    else:
        band, n_bands = label, n_classes
    hue = band / n_bands + g.uniform(-HUE_JITTER, HUE_JITTER)
    fg = _rgb(hue, g.uniform(0.6, 1.0), g.uniform(0.7, 1.0))
    # strong linear background ramp in a random direction: every background
    # patch has real structure rather than quantisation noise
    bg0 = _rgb(g.uniform(), g.uniform(0.0, 0.5), g.uniform(0.0, 0.15))
    bg1 = _rgb(g.uniform(), g.uniform(0.0, 0.5), g.uniform(0.45, 0.6))
    angle = g.uniform(0, 2 * np.pi)
    yy, xx = _coords(size)
    t = (np.cos(angle) * (xx - size / 2) + np.sin(angle) * (yy - size / 2)) / (size * 0.71) + 0.5
    t = np.clip(t, 0.0, 1.0)[..., None]
    img = bg0 * (1 - t) + bg1 * t
    mask = _shape_mask(label % 4, size, g)
    img = np.where(mask[..., None], fg, img)
    return img + g.normal(0.0, NOISE_STD, size=img.shape)


def _gradients(label, n_classes, size, g):
    angle = np.pi * (label + g.uniform(-0.3, 0.3)) / n_classes
    yy, xx = _coords(size)
    t = (np.cos(angle) * xx + np.sin(angle) * yy) / size
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    c0 = _rgb(g.uniform(), g.uniform(0.3, 1.0), g.uniform(0.2, 0.6))
    c1 = _rgb(g.uniform(), g.uniform(0.3, 1.0), g.uniform(0.6, 1.0))
    img = c0 * (1 - t[..., None]) + c1 * t[..., None]
    return img + g.normal(0.0, NOISE_STD, size=img.shape)


def _textures(label, n_classes, size, g):
    freq = 2.0 + 2.0 * label + g.uniform(-0.5, 0.5)
    theta = g.uniform(0, np.pi)
    yy, xx = _coords(size)
    wave = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) / size + g.uniform(0, 2 * np.pi))
    c0 = _rgb(g.uniform(), g.uniform(0.2, 0.9), g.uniform(0.1, 0.4))
    c1 = _rgb(g.uniform(), g.uniform(0.2, 0.9), g.uniform(0.6, 1.0))
    img = c0 * (1 - wave[..., None]) + c1 * wave[..., None]
    return img + g.normal(0.0, NOISE_STD, size=img.shape)


_GENERATORS = {"shapes": _shapes, "gradients": _gradients, "textures": _textures}


def synth_image(spec: SynthSpec, index: int):
    """Deterministic ``(uint8 image [S, S, C], label)`` for one index."""
    label = index % spec.n_classes
    g = rng.stream(spec.seed, 0xDA7A, index)
    img = _GENERATORS[spec.kind](label, spec.n_classes, spec.image_size, g)
    if spec.channels == 1:
        img = img.mean(axis=-1, keepdims=True)
    elif spec.channels != 3:
        img = np.repeat(img.mean(axis=-1, keepdims=True), spec.channels, axis=-1)
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8), label


def synthesize(spec: SynthSpec):
    images = np.empty((spec.n_images, spec.image_size, spec.image_size, spec.channels), dtype=np.uint8)
    labels = np.empty(spec.n_images, dtype=np.uint32)
    for i in range(spec.n_images):
        images[i], labels[i] = synth_image(spec, i)
    return images, labels


# ---------------------------------------------------------------------------
# File format


def encode(images, labels, n_classes) -> bytes:
    images = np.ascontiguousarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype="<u4")
    if images.ndim != 4 or labels.shape != (images.shape[0],):
        raise InvalidConfiguration(f"images {images.shape} / labels {labels.shape} mismatch")
    if labels.size and labels.max() >= n_classes:
        raise InvalidConfiguration(f"label {labels.max()} out of range for {n_classes} classes")
    n, h, w, c = images.shape
    return _HEADER.pack(MAGIC, n, h, w, c, n_classes) + images.tobytes() + labels.tobytes()


def write(path, images, labels, n_classes) -> DatasetHeader:
    blob = encode(images, labels, n_classes)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    n, h, w, c = np.shape(images)
    return DatasetHeader(n, h, w, c, n_classes)


def generate(spec: SynthSpec, out_path) -> DatasetHeader:
    images, labels = synthesize(spec)
    return write(out_path, images, labels, spec.n_classes)


@dataclass(frozen=True, eq=False)
class Dataset:
    header: DatasetHeader
    pixels: np.ndarray  # uint8 [count, H, W, C]
    labels: np.ndarray  # int64 [count]

    def __len__(self):
        return self.header.count

    @property
    def images(self):
        """Pixels scaled to [0, 1] as float64."""
        return self.pixels.astype(np.float64) / 255.0

    def __iter__(self):
        for px, lab in zip(self.pixels, self.labels):
            yield px.astype(np.float64) / 255.0, int(lab)

    def subset(self, idx):
        idx = np.asarray(idx)
        h = self.header
        return Dataset(DatasetHeader(len(idx), h.height, h.width, h.channels, h.n_classes), self.pixels[idx], self.labels[idx])


def decode(blob: bytes) -> Dataset:
    if len(blob) < HEADER_SIZE:
        raise FormatError(f"truncated header: expected {HEADER_SIZE} bytes, got {len(blob)}", len(blob))
    magic, n, h, w, c, k = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    header = DatasetHeader(n, h, w, c, k)
    if len(blob) != header.file_size:
        raise FormatError(
            f"file length mismatch: expected {header.file_size} bytes, got {len(blob)}",
            min(len(blob), header.file_size),
        )
    off = HEADER_SIZE
    pixels = np.frombuffer(blob, dtype=np.uint8, count=n * h * w * c, offset=off).reshape(n, h, w, c)
    off += n * h * w * c
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=off).astype(np.int64)
    if n and labels.max() >= k:
        bad = int(np.argmax(labels >= k))
        raise FormatError(f"label {labels[bad]} >= n_classes={k}", off + 4 * bad)
    return Dataset(header, pixels, labels)


def load(path) -> Dataset:
    with open(path, "rb") as fh:
        return decode(fh.read())
