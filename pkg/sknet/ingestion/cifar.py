"""
CIFAR-10/100 in the binary layout the datasets are distributed in.

Each record is one label byte (CIFAR-10) or two (coarse, fine for
CIFAR-100) followed by 3072 channel-major pixel bytes (1024 R, 1024 G,
1024 B, rows of 32). There is no header; a file is a run of records.
"""
from __future__ import annotations

import io
import json
import logging
import tarfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Literal, Sequence

import httpx
import numpy as np

from sknet.config import CHANNEL_STATS_FILE, CIFAR_URLS, HTTP_TIMEOUT, USER_AGENT
from sknet.core.errors import DecodeError, ShapeError

logger = logging.getLogger(__name__)

SIDE = 32
PIXELS = 3 * SIDE * SIDE
NUM_CLASSES = {10: 10, 100: 100}
LABEL_BYTES = {10: 1, 100: 2}
PAD = 4
STD_FLOOR = 1e-12

# File names inside the extracted archives.
_LAYOUT = {
    10: ("cifar-10-batches-bin", [f"data_batch_{i}.bin" for i in range(1, 6)], ["test_batch.bin"]),
    100: ("cifar-100-binary", ["train.bin"], ["test.bin"]),
}


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # (3, H, W) float64 in [0, 1]
    label: int


@dataclass
class ImageSet:
    """Stacked pixels (n, 3, H, W) and integer labels (n,)."""

    pixels: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.pixels.ndim != 4 or self.pixels.shape[0] != self.labels.shape[0]:
            raise ShapeError(
                f"image set needs (n, c, h, w) pixels and n labels, got {self.pixels.shape} / {self.labels.shape}"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DecodeError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @classmethod
    def from_images(cls, images: Sequence[LabeledImage], num_classes: int) -> "ImageSet":
        if not images:
            raise ShapeError("cannot stack an empty image list")
        pixels = np.stack([img.pixels for img in images]).astype(np.float64)
        labels = np.array([img.label for img in images], dtype=np.int64)
        return cls(pixels, labels, num_classes)

    def to_images(self) -> list[LabeledImage]:
        return [LabeledImage(p.copy(), int(l)) for p, l in zip(self.pixels, self.labels)]

    def subset(self, indices) -> "ImageSet":
        indices = np.asarray(indices)
        return ImageSet(self.pixels[indices], self.labels[indices], self.num_classes)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Consecutive batches, shuffled when ``rng`` is given; the last may be short."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start : start + batch_size]
            yield self.pixels[idx], self.labels[idx]


# ---------------------------------------------------------------------------
# Record codec
# ---------------------------------------------------------------------------


def decode_records(payload: bytes, variant: Literal[10, 100] = 10, expected: int | None = None) -> list[LabeledImage]:
    if variant not in LABEL_BYTES:
        raise DecodeError(f"unknown CIFAR variant {variant}")
    width = LABEL_BYTES[variant] + PIXELS
    if len(payload) % width:
        raise DecodeError(
            f"truncated CIFAR-{variant} data: {len(payload)} bytes is not a multiple of the {width}-byte record"
        )
    count = len(payload) // width
    if expected is not None and count != expected:
        raise DecodeError(f"expected {expected} records, found {count}")
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(count, width)
    labels = raw[:, LABEL_BYTES[variant] - 1].astype(np.int64)
    bad = np.flatnonzero(labels >= NUM_CLASSES[variant])
    if bad.size:
        raise DecodeError(f"record {int(bad[0])} has label {int(labels[bad[0]])}, CIFAR-{variant} has {NUM_CLASSES[variant]} classes")
    pixels = raw[:, LABEL_BYTES[variant] :].reshape(count, 3, SIDE, SIDE) / 255.0
    return [LabeledImage(pixels[i], int(labels[i])) for i in range(count)]


def encode_records(images: Sequence[LabeledImage], variant: Literal[10, 100] = 10) -> bytes:
    """Inverse of decode_records. CIFAR-100 coarse labels are written as 0."""
    out = bytearray()
    for img in images:
        if img.pixels.shape != (3, SIDE, SIDE):
            raise ShapeError(f"CIFAR records hold 3x{SIDE}x{SIDE} images, got {img.pixels.shape}")
        if not 0 <= img.label < NUM_CLASSES[variant]:
            raise DecodeError(f"label {img.label} does not fit CIFAR-{variant}")
        if variant == 100:
            out.append(0)
        out.append(img.label)
        out += np.rint(np.clip(img.pixels, 0.0, 1.0) * 255.0).astype(np.uint8).tobytes()
    return bytes(out)


def _split_files(path: Path, variant: int, split: str) -> list[Path]:
    if path.is_file():
        return [path]
    folder, train, test = _LAYOUT[variant]
    root = path / folder if (path / folder).is_dir() else path
    names = train if split == "train" else test
    files = [root / name for name in names]
    missing = [str(f) for f in files if not f.is_file()]
    if missing:
        raise FileNotFoundError(f"CIFAR-{variant} {split} files missing: {', '.join(missing)}")
    return files


def load_cifar(path: str | Path, variant: Literal[10, 100] = 10, split: Literal["train", "test"] = "train") -> list[LabeledImage]:
    """Decode one record file, or every file of ``split`` under an extracted archive directory."""
    images: list[LabeledImage] = []
    for file in _split_files(Path(path), variant, split):
        images += decode_records(file.read_bytes(), variant)
    logger.info("loaded %d CIFAR-%d %s images from %s", len(images), variant, split, path)
    return images


def load_cifar_set(path: str | Path, variant: Literal[10, 100] = 10, split: str = "train") -> ImageSet:
    return ImageSet.from_images(load_cifar(path, variant, split), NUM_CLASSES[variant])


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def hflip(img: LabeledImage) -> LabeledImage:
    return LabeledImage(img.pixels[:, :, ::-1].copy(), img.label)


def _pad_crop_flip(pixels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    c, h, w = pixels.shape
    padded = np.pad(pixels, ((0, 0), (PAD, PAD), (PAD, PAD)))
    top, left = rng.integers(0, 2 * PAD + 1, size=2)
    out = padded[:, top : top + h, left : left + w]
    if rng.random() < 0.5:
        out = out[:, :, ::-1]
    return out.copy()


def augment(img: LabeledImage, mode: Literal["cifar_standard", "none"], rng: np.random.Generator) -> LabeledImage:
    """4-pixel zero pad, random crop back to size, random horizontal flip."""
    if mode == "none":
        return img
    if mode != "cifar_standard":
        raise ValueError(f"unknown augmentation mode {mode!r}")
    return LabeledImage(_pad_crop_flip(img.pixels, rng), img.label)


def augment_batch(pixels: np.ndarray, mode: str, rng: np.random.Generator) -> np.ndarray:
    if mode == "none":
        return pixels
    if mode != "cifar_standard":
        raise ValueError(f"unknown augmentation mode {mode!r}")
    return np.stack([_pad_crop_flip(p, rng) for p in pixels])


# ---------------------------------------------------------------------------
# Mean channel subtraction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ChannelNormalizer:
    """x -> (x - mean_c) / std_c per channel; std is all ones for plain mean subtraction."""

    mean: tuple[float, ...]
    std: tuple[float, ...]

    @classmethod
    def fit(cls, pixels: np.ndarray, scale: bool = True) -> "ChannelNormalizer":
        mean = pixels.mean(axis=(0, 2, 3))
        std = pixels.std(axis=(0, 2, 3)) if scale else np.ones_like(mean)
        std = np.where(std > STD_FLOOR, std, 1.0)
        return cls(tuple(float(v) for v in mean), tuple(float(v) for v in std))

    def _arrays(self, channels: int) -> tuple[np.ndarray, np.ndarray]:
        if channels != len(self.mean):
            raise ShapeError(f"normalizer has {len(self.mean)} channels, input has {channels}")
        return np.array(self.mean)[:, None, None], np.array(self.std)[:, None, None]

    def apply(self, pixels: np.ndarray) -> np.ndarray:
        mean, std = self._arrays(pixels.shape[-3])
        return (pixels - mean) / std

    def invert(self, pixels: np.ndarray) -> np.ndarray:
        mean, std = self._arrays(pixels.shape[-3])
        return pixels * std + mean

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({"mean": list(self.mean), "std": list(self.std)}, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "ChannelNormalizer":
        data = json.loads(Path(path).read_text())
        return cls(tuple(data["mean"]), tuple(data["std"]))

    @classmethod
    def cached(
        cls,
        directory: str | Path,
        pixels: np.ndarray | Callable[[], np.ndarray],
        channels: int | None = None,
    ) -> "ChannelNormalizer":
        """Load channel_stats.json from ``directory``, fitting and writing it on first use.

        ``pixels`` may be a zero-argument callable; it is only invoked when
        the statistics have to be (re)fitted.
        """
        if channels is None and not callable(pixels):
            channels = pixels.shape[1]
        path = Path(directory) / CHANNEL_STATS_FILE
        if path.is_file():
            stats = cls.load(path)
            if channels is None or len(stats.mean) == channels:
                return stats
            logger.warning("cached %s has %d channels, data has %d; refitting", path, len(stats.mean), channels)
        stats = cls.fit(pixels() if callable(pixels) else pixels)
        stats.save(path)
        logger.info("wrote channel statistics to %s", path)
        return stats


# ---------------------------------------------------------------------------
# Download
# ---------------------------------------------------------------------------


def _safe_members(archive: tarfile.TarFile) -> list[tarfile.TarInfo]:
    members = []
    for member in archive.getmembers():
        name = Path(member.name)
        if name.is_absolute() or ".." in name.parts or not (member.isfile() or member.isdir()):
            raise DecodeError(f"refusing to extract archive member {member.name!r}")
        members.append(member)
    return members


def download_cifar(
    variant: Literal[10, 100], dest: str | Path, transport: httpx.BaseTransport | None = None
) -> Path:
    """Fetch the official binary archive and extract it under ``dest``; returns the data folder."""
    url = CIFAR_URLS[variant]
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    logger.info("downloading %s", url)
    with httpx.Client(
        timeout=HTTP_TIMEOUT,
        headers={"User-Agent": USER_AGENT},
        follow_redirects=True,
        transport=transport,
    ) as client:
        resp = client.get(url)
        resp.raise_for_status()
        payload = resp.content
    try:
        with tarfile.open(fileobj=io.BytesIO(payload), mode="r:gz") as archive:
            archive.extractall(dest, members=_safe_members(archive))
    except tarfile.TarError as exc:
        raise DecodeError(f"{url} is not a valid gzip tar archive: {exc}") from exc
    folder = dest / _LAYOUT[variant][0]
    logger.info("extracted CIFAR-%d to %s", variant, folder)
    return folder
