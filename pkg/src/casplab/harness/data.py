"""Synthetic glyph datasets and the packed CDSF dataset file.

CDSF layout (little-endian)::

    b"CDSF"  u32 version=1  u32 record_count  u16 height  u16 width  u8 channels  u8 reserved
    record_count x ( u32 class_id, height*width*channels u8 pixels, row-major HWC )
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..rng import Rng
from .errors import BadMagicError, FormatError, TruncatedError, VersionError

__all__ = [
    "Dataset",
    "GlyphSpec",
    "SHAPES",
    "PATTERNS",
    "SCALES",
    "family_capacity",
    "generate_synthetic_dataset",
    "write_cdsf",
    "read_cdsf",
    "cdsf_bytes",
    "parse_cdsf",
]

CDSF_MAGIC = b"CDSF"
CDSF_VERSION = 1
_HEADER = struct.Struct("<4sIIHHBB")

SHAPES = ("circle", "square", "diamond", "triangle", "hexagon", "plus", "cross", "hellipse", "vellipse", "bars")
PATTERNS = ("outline", "filled", "striped", "dashed")
SCALES = (6.0, 8.5, 11.0)

# per-sample variation
POSITION_JITTER = 2.5
ROTATION_JITTER = 0.2
PIXEL_NOISE = 0.1


def family_capacity() -> int:
    return len(SHAPES) * len(PATTERNS) * len(SCALES)


@dataclass
class Dataset:
    """Grayscale (or multi-channel) uint8 images [M, H, W, C] with integer labels."""

    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def classes(self) -> list[int]:
        return sorted(set(self.labels.tolist()))

    def indices_of(self, cls: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cls)

    def split_indices(self, cls: int, train_fraction: float = 0.75) -> tuple[np.ndarray, np.ndarray]:
        """File-order train/test split of one class's records."""
        idx = self.indices_of(cls)
        n_train = int(round(len(idx) * train_fraction))
        return idx[:n_train], idx[n_train:]

    def as_float(self, idx=None) -> np.ndarray:
        """Images scaled to [-1, 1] in [B, C, H, W] layout."""
        imgs = self.images if idx is None else self.images[idx]
        return ((imgs.astype(np.float32) - 127.5) / 127.5).transpose(0, 3, 1, 2)


@dataclass(frozen=True)
class GlyphSpec:
    """Generator request. Classes with id >= ``source_classes`` are rendered in
    the shifted target style; pretraining draws from the source classes."""

    classes: int = 80
    per_class: int = 40
    size: int = 32
    source_classes: int = 40
    target_style: str = "invert+light"

    def __post_init__(self):
        if self.classes <= 0 or self.per_class <= 0:
            raise ValueError("classes and per_class must be positive")
        if self.classes > family_capacity():
            raise ValueError(f"{self.classes} classes exceed the generator's {family_capacity()} glyph families")
        if self.size < 16:
            raise ValueError("image size must be at least 16")


def _gauge(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Convex-ish gauge function whose level set 1 is the glyph boundary."""
    au, av = np.abs(u), np.abs(v)
    if shape == "circle":
        return np.hypot(u, v)
    if shape == "square":
        return np.maximum(au, av)
    if shape == "diamond":
        return au + av
    if shape == "triangle":
        return np.maximum(-2.0 * v, v + np.sqrt(3.0) * au)
    if shape == "hexagon":
        return np.maximum(au * 0.866 + av * 0.5, av)
    if shape == "plus":
        return np.minimum(np.maximum(au / 0.35, av), np.maximum(au, av / 0.35))
    if shape == "cross":
        r, s = (u + v) / np.sqrt(2.0), (u - v) / np.sqrt(2.0)
        return np.minimum(np.maximum(np.abs(r) / 0.35, np.abs(s)), np.maximum(np.abs(r), np.abs(s) / 0.35))
    if shape == "hellipse":
        return np.hypot(u, v / 0.5)
    if shape == "vellipse":
        return np.hypot(u / 0.5, v)
    if shape == "bars":
        top = np.maximum(au, np.abs(v + 0.55) / 0.3)
        bot = np.maximum(au, np.abs(v - 0.55) / 0.3)
        return np.minimum(top, bot)
    raise ValueError(shape)


def render_glyph(
    shape: str, pattern: str, scale: float, size: int, rng: np.random.Generator, style: str = ""
) -> np.ndarray:
    """One jittered, noisy rendering of a glyph family as float pixels in [0, 1].

    ``style`` holds '+'-joined domain modifiers: ``invert`` (dark ink on a
    light ground), ``light`` (low-frequency illumination ramp), ``grid``
    (fine checkerboard texture).
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cx = size / 2 + rng.uniform(-POSITION_JITTER, POSITION_JITTER)
    cy = size / 2 + rng.uniform(-POSITION_JITTER, POSITION_JITTER)
    radius = scale * rng.uniform(0.92, 1.08) * size / 32
    theta = rng.uniform(-ROTATION_JITTER, ROTATION_JITTER)
    dx, dy = xx - cx, yy - cy
    u = (np.cos(theta) * dx + np.sin(theta) * dy) / radius
    v = (-np.sin(theta) * dx + np.cos(theta) * dy) / radius
    n = _gauge(shape, u, v)
    width = rng.uniform(1.1, 1.8) / radius
    edge = np.clip(1.0 - np.abs(n - 1.0) / width, 0.0, 1.0)
    inside = np.clip((1.0 - n) / width + 0.5, 0.0, 1.0)
    if pattern == "outline":
        ink = edge
    elif pattern == "filled":
        ink = inside
    elif pattern == "striped":
        stripes = (np.sin(u * radius * 1.6 + rng.uniform(0, 2 * np.pi)) > 0).astype(np.float64)
        ink = np.maximum(edge, inside * stripes)
    elif pattern == "dashed":
        ang = np.arctan2(v, u)
        ink = edge * (np.sin(ang * 6 + rng.uniform(0, 2 * np.pi)) > -0.2)
    else:
        raise ValueError(pattern)
    level = rng.uniform(0.55, 1.0)
    background = rng.uniform(0.0, 0.2)
    img = background + (level - background) * ink
    if "invert" in style:
        img = 1.0 - img
    if "light" in style:
        phase = rng.uniform(0, 2 * np.pi)
        ang = rng.uniform(0, np.pi)
        ramp = np.cos(ang) * xx + np.sin(ang) * yy
        img = img * 0.7 + 0.3 * (0.5 + 0.5 * np.sin(2 * np.pi * ramp / size + phase))
    if "grid" in style:
        img = img + 0.15 * ((xx.astype(int) // 2 + yy.astype(int) // 2) % 2)
    img = img + rng.normal(0.0, PIXEL_NOISE, img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic_dataset(seed: int, spec: GlyphSpec | None = None) -> Dataset:
    """Deterministic glyph dataset: class c is one (shape, pattern, scale) family.

    Families are assigned to classes by a seeded permutation; records are
    stored class by class.
    """
    spec = spec or GlyphSpec()
    rng = Rng(seed, "glyphs")
    families = list(itertools.product(SHAPES, PATTERNS, SCALES))
    order = rng.permutation(len(families))[: spec.classes]
    images = np.empty((spec.classes * spec.per_class, spec.size, spec.size, 1), dtype=np.uint8)
    labels = np.repeat(np.arange(spec.classes, dtype=np.int64), spec.per_class)
    for c, fam in enumerate(order):
        shape, pattern, scale = families[fam]
        gen = rng.stream(f"class{c}").generator()
        style = spec.target_style if c >= spec.source_classes else ""
        for j in range(spec.per_class):
            img = render_glyph(shape, pattern, scale, spec.size, gen, style)
            images[c * spec.per_class + j, :, :, 0] = np.round(img * 255.0).astype(np.uint8)
    return Dataset(images, labels)


def cdsf_bytes(ds: Dataset) -> bytes:
    m, h, w, c = ds.images.shape
    parts = [_HEADER.pack(CDSF_MAGIC, CDSF_VERSION, m, h, w, c, 0)]
    cls = ds.labels.astype("<u4")
    pix = ds.images.reshape(m, h * w * c)
    for i in range(m):
        parts.append(cls[i].tobytes())
        parts.append(pix[i].tobytes())
    return b"".join(parts)


def parse_cdsf(buf: bytes) -> Dataset:
    if len(buf) < _HEADER.size:
        raise TruncatedError("truncated CDSF header")
    magic, version, count, h, w, c, _ = _HEADER.unpack_from(buf, 0)
    if magic != CDSF_MAGIC:
        raise BadMagicError(f"bad magic {magic!r} (expected {CDSF_MAGIC!r})")
    if version != CDSF_VERSION:
        raise VersionError(f"unsupported CDSF version {version}")
    rec = 4 + h * w * c
    expected = _HEADER.size + count * rec
    if len(buf) < expected:
        raise TruncatedError(f"CDSF file has {len(buf)} bytes, header promises {expected}")
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} trailing bytes after last CDSF record", kind="trailing")
    body = np.frombuffer(buf, dtype=np.uint8, offset=_HEADER.size).reshape(count, rec)
    labels = body[:, :4].copy().view("<u4").reshape(count).astype(np.int64)
    images = body[:, 4:].reshape(count, h, w, c).copy()
    return Dataset(images, labels)


def write_cdsf(path, ds: Dataset) -> bytes:
    data = cdsf_bytes(ds)
    Path(path).write_bytes(data)
    return data


def read_cdsf(path) -> Dataset:
    return parse_cdsf(Path(path).read_bytes())
