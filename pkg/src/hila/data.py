"""Synthetic segmentation data and image/label file I/O.

Images are binary PPM (P6, maxval 255); label maps are binary PGM (P5)
whose pixel values are class ids, with 255 reserved as the ignore id. A
dataset directory holds ``img_%05d.ppm`` / ``lab_%05d.pgm`` pairs plus a
``manifest.json`` recording the generator spec.

Generation is a pure function of (spec, n): geometry is rasterized with
integer arithmetic only and all randomness comes from the documented
generator in :mod:`hila.rng`, with sample ``i`` drawn from the derived
substream ``derive_seed(spec.seed, i)``.

The default corpus has a textured background plus three shape classes:
axis-aligned rectangles, circles, and thin 3px bars. The bars exist to
exercise boundary quality at the same scale as the 3px F-score threshold.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import rng as hrng
from .errors import ConfigError, DataError, ParseError
from .tensor import Tensor

BAR_WIDTH = 3

# Base colors, one per class id, pairwise distinct in at least one channel,
# so at zero noise the label boundary is exactly the color-change boundary.
# The background texture comes from the Gaussian noise itself.
_PALETTE = np.array(
    [
        [0.20, 0.25, 0.60],  # background
        [0.85, 0.20, 0.15],  # rectangles
        [0.15, 0.75, 0.20],  # circles
        [0.95, 0.85, 0.10],  # bars
        [0.60, 0.20, 0.70],
        [0.10, 0.70, 0.70],
        [0.80, 0.50, 0.10],
        [0.45, 0.45, 0.15],
    ]
)


@dataclass
class SegSample:
    image: Tensor  # (H, W, 3) in [0, 1]
    labels: np.ndarray  # (H, W) int32, values in [0, C) plus 255


@dataclass
class ShapesSpec:
    image_size: int = 64
    num_classes: int = 4
    shapes_min: int = 2
    shapes_max: int = 5
    size_min: int = 10
    size_max: int = 26
    noise_std: float = 0.04
    seed: int = 0

    def validate(self) -> None:
        if self.image_size % 32 != 0:
            raise ConfigError(f"image_size must be divisible by 32, got {self.image_size}")
        if not 2 <= self.num_classes <= len(_PALETTE):
            raise ConfigError(
                f"num_classes must be in [2, {len(_PALETTE)}], got {self.num_classes}"
            )
        if self.shapes_min < 1 or self.shapes_max < self.shapes_min:
            raise ConfigError("invalid shapes_per_image range")
        if self.size_min < 3 or self.size_max < self.size_min:
            raise ConfigError("invalid size range")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")


def _draw_shape(labels: np.ndarray, cls: int, kind: int, stream: hrng.Stream, size: int):
    """Rasterize one shape into the label map with integer geometry."""
    n = labels.shape[0]
    if kind == 0:  # rectangle
        h = stream.integers(size // 2, size + 1)
        w = stream.integers(size // 2, size + 1)
        top = stream.integers(0, n - h)
        left = stream.integers(0, n - w)
        labels[top : top + h, left : left + w] = cls
    elif kind == 1:  # circle
        r = max(size // 2, 3)
        cy = stream.integers(r, n - r)
        cx = stream.integers(r, n - r)
        yy, xx = np.ogrid[:n, :n]
        labels[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = cls
    else:  # thin bar
        length = stream.integers(size, min(2 * size, n - 1) + 1)
        if stream.integers(0, 2) == 0:
            top = stream.integers(0, n - BAR_WIDTH)
            left = stream.integers(0, n - length)
            labels[top : top + BAR_WIDTH, left : left + length] = cls
        else:
            top = stream.integers(0, n - length)
            left = stream.integers(0, n - BAR_WIDTH)
            labels[top : top + length, left : left + BAR_WIDTH] = cls


def generate_shapes(spec: ShapesSpec, n: int) -> list[SegSample]:
    """Deterministic corpus of shape scenes; later shapes occlude earlier ones."""
    spec.validate()
    if n < 1:
        raise ConfigError("need at least one sample")
    size = spec.image_size
    samples = []
    for i in range(n):
        stream = hrng.Stream(hrng.derive_seed(spec.seed, i))
        labels = np.zeros((size, size), dtype=np.int32)
        count = stream.integers(spec.shapes_min, spec.shapes_max + 1)
        for _ in range(count):
            cls = stream.integers(1, spec.num_classes)
            shape_size = stream.integers(spec.size_min, spec.size_max + 1)
            _draw_shape(labels, cls, (cls - 1) % 3, stream, shape_size)
        image = _PALETTE[labels].astype(np.float64)
        if spec.noise_std > 0:
            image += spec.noise_std * stream.normal((size, size, 3))
        image = np.clip(image, 0.0, 1.0).astype(np.float32)
        samples.append(SegSample(Tensor._wrap(image), labels))
    return samples


# --- PPM / PGM -------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _read_header(buf: bytes, magic: bytes, n_fields: int):
    if buf[:2] != magic:
        raise ParseError(f"expected {magic.decode()} magic", 0)
    pos = 2
    fields = []
    for _ in range(n_fields):
        m = _TOKEN.match(buf, pos)
        if not m:
            raise ParseError("truncated header", pos)
        token = m.group(1)
        if not token.isdigit():
            raise ParseError(f"non-numeric header field {token!r}", m.start(1))
        fields.append(int(token))
        pos = m.end(1)
    if pos >= len(buf) or buf[pos : pos + 1] not in (b" ", b"\t", b"\n", b"\r"):
        raise ParseError("missing whitespace after header", pos)
    return fields, pos + 1


def write_ppm(path, image) -> None:
    arr = image.array if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"PPM image must be (H,W,3), got {arr.shape}")
    quant = np.clip(np.floor(arr * 255.0 + 0.5), 0, 255).astype(np.uint8)
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(quant.tobytes())


def read_ppm(path) -> Tensor:
    with open(path, "rb") as fh:
        buf = fh.read()
    (w, h, maxval), pos = _read_header(buf, b"P6", 3)
    if maxval != 255:
        raise ParseError(f"unsupported maxval {maxval}", 2)
    need = w * h * 3
    if len(buf) - pos < need:
        raise ParseError(f"payload has {len(buf) - pos} bytes, need {need}", pos)
    arr = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return Tensor._wrap((arr.reshape(h, w, 3).astype(np.float32)) / 255.0)


def write_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise DataError(f"label map must be 2-d, got {labels.shape}")
    if labels.min() < 0 or labels.max() > 255:
        raise DataError(f"label ids must fit a byte, got max {labels.max()}")
    h, w = labels.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(labels.astype(np.uint8).tobytes())


def read_labels(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    (w, h, maxval), pos = _read_header(buf, b"P5", 3)
    if maxval != 255:
        raise ParseError(f"unsupported maxval {maxval}", 2)
    need = w * h
    if len(buf) - pos < need:
        raise ParseError(f"payload has {len(buf) - pos} bytes, need {need}", pos)
    arr = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return arr.reshape(h, w).astype(np.int32)


# --- dataset directories ----------------------------------------------------

FORMAT_VERSION = 1


def write_dataset(directory, spec: ShapesSpec, n: int) -> list[SegSample]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    samples = generate_shapes(spec, n)
    for i, s in enumerate(samples):
        write_ppm(directory / f"img_{i:05d}.ppm", s.image)
        write_labels(directory / f"lab_{i:05d}.pgm", s.labels)
    manifest = {"spec": asdict(spec), "n": n, "format_version": FORMAT_VERSION}
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    return samples


def read_dataset(directory) -> tuple[ShapesSpec, list[SegSample]]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"{directory} has no manifest.json")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported dataset format {manifest.get('format_version')}")
    spec = ShapesSpec(**manifest["spec"])
    samples = []
    for i in range(manifest["n"]):
        image = read_ppm(directory / f"img_{i:05d}.ppm")
        labels = read_labels(directory / f"lab_{i:05d}.pgm")
        samples.append(SegSample(image, labels))
    return spec, samples
