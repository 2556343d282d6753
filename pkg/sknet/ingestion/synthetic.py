"""
Scale-controlled synthetic images: one bright centred shape on a dark
canvas, class = shape kind, with the object scale recorded per image.

Stored as CIFAR-10 records (``data.bin``) plus a ``scales.csv`` sidecar
(index,scale) and the generating spec (``synthetic.json``).
"""
from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from sknet.config import SCALE_TABLE_FILE
from sknet.core.errors import DecodeError
from sknet.ingestion.cifar import ImageSet, LabeledImage, decode_records, encode_records

logger = logging.getLogger(__name__)

Shape = Literal["square", "disc", "bar", "cross"]

DATA_FILE = "data.bin"
SPEC_FILE = "synthetic.json"


class SyntheticScaleSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    canvas: int = 32
    shapes: tuple[Shape, ...] = ("square", "disc", "bar", "cross")
    scale_range: tuple[float, float] = (0.5, 1.0)
    base_extent: float = 0.75
    intensity: float = 1.0
    noise: float = 0.0
    jitter: int = 0
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "SyntheticScaleSpec":
        lo, hi = self.scale_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"scale range must satisfy 0 < lo <= hi <= 1, got {self.scale_range}")
        if not self.shapes or len(set(self.shapes)) != len(self.shapes):
            raise ValueError("shape vocabulary must be non-empty and distinct")
        if not 0.0 < self.base_extent <= 1.0:
            raise ValueError("base_extent is a fraction of the canvas in (0, 1]")
        if self.canvas < 4 or self.noise < 0 or self.jitter < 0 or not 0.0 < self.intensity <= 1.0:
            raise ValueError("canvas >= 4, noise >= 0, jitter >= 0 and intensity in (0, 1] required")
        return self

    @property
    def num_classes(self) -> int:
        return len(self.shapes)

    def extent(self, scale: float) -> int:
        """Object side in pixels at ``scale``."""
        return max(1, min(self.canvas, int(round(self.base_extent * self.canvas * scale))))


def render_shape(kind: Shape, extent: int, canvas: int, offset: tuple[int, int] = (0, 0)) -> np.ndarray:
    """Binary (canvas, canvas) mask of ``kind`` with bounding side ``extent``, centred plus ``offset``."""
    top = min(max((canvas - extent) // 2 + offset[0], 0), canvas - extent)
    left = min(max((canvas - extent) // 2 + offset[1], 0), canvas - extent)
    mask = np.zeros((canvas, canvas))
    box = np.zeros((extent, extent))
    thick = max(1, extent // 3)
    mid = (extent - thick) // 2
    if kind == "square":
        box[:] = 1.0
    elif kind == "disc":
        r = extent / 2.0
        yy, xx = np.mgrid[0:extent, 0:extent] + 0.5
        box[(yy - r) ** 2 + (xx - r) ** 2 <= r * r] = 1.0
    elif kind == "bar":
        box[mid : mid + thick, :] = 1.0
    elif kind == "cross":
        box[mid : mid + thick, :] = 1.0
        box[:, mid : mid + thick] = 1.0
    else:
        raise ValueError(f"unknown shape {kind!r}")
    mask[top : top + extent, left : left + extent] = box
    return mask


def gen_synthetic(spec: SyntheticScaleSpec, n: int) -> list[tuple[LabeledImage, float]]:
    """``n`` images with classes cycling through the vocabulary; scales drawn uniformly."""
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.scale_range
    samples = []
    for i in range(n):
        label = i % spec.num_classes
        scale = float(rng.uniform(lo, hi)) if hi > lo else lo
        offset = tuple(int(v) for v in rng.integers(-spec.jitter, spec.jitter + 1, size=2))
        mask = render_shape(spec.shapes[label], spec.extent(scale), spec.canvas, offset)
        pixels = np.repeat(mask[None] * spec.intensity, 3, axis=0)
        if spec.noise > 0:
            pixels = np.clip(pixels + rng.normal(0.0, spec.noise, pixels.shape), 0.0, 1.0)
        samples.append((LabeledImage(pixels, label), scale))
    return samples


def synthetic_set(spec: SyntheticScaleSpec, n: int) -> tuple[ImageSet, np.ndarray]:
    samples = gen_synthetic(spec, n)
    images = ImageSet.from_images([img for img, _ in samples], spec.num_classes)
    return images, np.array([s for _, s in samples])


def write_synthetic(
    samples: list[tuple[LabeledImage, float]], directory: str | Path, spec: SyntheticScaleSpec | None = None
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / DATA_FILE).write_bytes(encode_records([img for img, _ in samples], variant=10))
    with open(directory / SCALE_TABLE_FILE, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "scale"])
        for i, (_, scale) in enumerate(samples):
            writer.writerow([i, repr(scale)])
    if spec is not None:
        (directory / SPEC_FILE).write_text(spec.model_dump_json(indent=2))
    logger.info("wrote %d synthetic images to %s", len(samples), directory)
    return directory


def read_synthetic(directory: str | Path) -> tuple[ImageSet, np.ndarray]:
    """Images (pixels quantised to 1/255) and their scales, in index order."""
    directory = Path(directory)
    images = decode_records((directory / DATA_FILE).read_bytes(), variant=10)
    with open(directory / SCALE_TABLE_FILE, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if [int(r["index"]) for r in rows] != list(range(len(images))):
        raise DecodeError(f"{SCALE_TABLE_FILE} does not index the {len(images)} records in order")
    scales = np.array([float(r["scale"]) for r in rows])
    spec_path = directory / SPEC_FILE
    if spec_path.is_file():
        num_classes = SyntheticScaleSpec.model_validate_json(spec_path.read_text()).num_classes
    else:
        num_classes = max(img.label for img in images) + 1
    return ImageSet.from_images(images, num_classes), scales
