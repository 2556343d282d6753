"""
Attention-versus-object-scale analysis.

Inputs are enlarged around their centre (central crop of side H/s, then
bilinear resize back to H), pushed through a network in inference mode,
and the per-unit, per-channel SK attention is recorded. The summary
statistic is the mean attention difference: mean over channels of the
large-kernel attention minus the small-kernel attention.
"""
from __future__ import annotations

import csv
import fnmatch
import io
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from sknet.config import ANALYSIS_WINDOW
from sknet.core.errors import SelectorError, ShapeError
from sknet.core.tensor import Tensor
from sknet.models.arch import Network
from sknet.models.sk_block import AttentionRecorder, PathSpec

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["unit", "scale", "path", "mean_attention", "mean_diff", "std", "n"]


# ---------------------------------------------------------------------------
# Scale transform
# ---------------------------------------------------------------------------


def _resample(size: int, s: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Source taps and weights for the centre (size/s) window stretched over ``size`` pixels."""
    window = size / s
    centres = (size - window) / 2.0 + (np.arange(size) + 0.5) * (window / size) - 0.5
    centres = np.clip(centres, 0.0, size - 1)
    lo = np.floor(centres).astype(np.int64)
    hi = np.minimum(lo + 1, size - 1)
    return lo, hi, centres - lo


def scale_transform(img, s: float):
    """Enlarge the central object by ``s`` (>= 1); same shape out, s == 1 returns an exact copy.

    Works on (..., H, W) arrays or Tensors.
    """
    if isinstance(img, Tensor):
        return Tensor(scale_transform(img.data, s))
    pixels = np.asarray(img, dtype=np.float64)
    if s < 1.0 or not math.isfinite(s):
        raise ValueError(f"scale factor must be a finite value >= 1, got {s}")
    if pixels.ndim < 2:
        raise ShapeError(f"scale_transform needs (..., H, W), got {pixels.shape}")
    h, w = pixels.shape[-2:]
    if s == 1.0:
        return pixels.copy()
    if h / s < 2.0 or w / s < 2.0:
        raise ShapeError(f"crop window {h / s:.2f}x{w / s:.2f} is smaller than 2x2")
    lo, hi, f = _resample(h, s)
    a, b = pixels[..., lo, :], pixels[..., hi, :]
    rows = a + f[:, None] * (b - a)
    lo, hi, f = _resample(w, s)
    a, b = rows[..., lo], rows[..., hi]
    return a + f * (b - a)


# ---------------------------------------------------------------------------
# Collection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AttentionRecord:
    unit: str
    sample: int
    scale: float
    attention: np.ndarray  # (M, C), columns sum to 1
    label: int | None = None


def _select_units(available: list[str], units: str | Sequence[str] | None) -> list[str]:
    if not available:
        raise SelectorError("network has no SK attention units")
    if units is None:
        return available
    patterns = [units] if isinstance(units, str) else list(units)
    chosen = [u for u in available if any(fnmatch.fnmatchcase(u, p) for p in patterns)]
    if not chosen:
        raise SelectorError(f"selector {patterns} matches none of {len(available)} attention units")
    return chosen


def collect(
    net: Network,
    images: np.ndarray,
    scales: Sequence[float],
    units: str | Sequence[str] | None = None,
    labels: Sequence[int] | None = None,
    batch_size: int = 16,
) -> list[AttentionRecord]:
    """One record per (image, scale, selected unit); ``units`` takes ids or glob patterns."""
    chosen = set(_select_units(net.unit_ids(attention_only=True), units))
    if labels is not None and len(labels) != len(images):
        raise ShapeError(f"{len(labels)} labels for {len(images)} images")
    records = []
    for s in scales:
        transformed = scale_transform(images, s)
        for start in range(0, len(transformed), batch_size):
            recorder = AttentionRecorder()
            net(Tensor(transformed[start : start + batch_size]), training=False, record=recorder)
            for unit, att in recorder.entries:
                if unit not in chosen:
                    continue
                for j, matrix in enumerate(att):
                    sample = start + j
                    label = None if labels is None else int(labels[sample])
                    records.append(AttentionRecord(unit, sample, float(s), matrix, label))
    logger.info("collected %d attention records over %d scales", len(records), len(scales))
    return records


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------


@dataclass
class AttentionSummary:
    unit: str
    scale: float
    path: int
    mean_attention: float
    mean_diff: float
    std: float
    n: int
    label: int | None = None
    windows: list[float] = field(default_factory=list)


def unit_sort_key(unit: str) -> tuple:
    """SK_10_2 after SK_9_3: numeric fields compare as numbers."""
    return tuple((0, int(p), "") if p.isdigit() else (1, 0, p) for p in unit.split("_"))


def path_roles(paths: Sequence[PathSpec]) -> tuple[int, int]:
    """(large, small) path indices by effective extent D*(k-1)+1."""
    extents = [p.extent for p in paths]
    return int(np.argmax(extents)), int(np.argmin(extents))


def summarize(
    records: Iterable[AttentionRecord],
    by_class: bool = False,
    large: int | None = None,
    small: int | None = None,
    window: int = ANALYSIS_WINDOW,
) -> list[AttentionSummary]:
    """Per (unit, scale[, class]) statistics, one summary per path.

    ``large``/``small`` default to the last and first path. ``std`` is the
    population standard deviation of the per-sample difference.
    """
    records = list(records)
    if not records:
        raise ValueError("summarize needs at least one record")
    num_paths = {r.attention.shape[0] for r in records}
    if len(num_paths) != 1:
        raise ShapeError(f"records mix path counts {sorted(num_paths)}")
    m = num_paths.pop()
    large = m - 1 if large is None else large
    small = 0 if small is None else small

    groups: dict[tuple, list[AttentionRecord]] = defaultdict(list)
    for r in records:
        if by_class and r.label is None:
            raise ValueError("by_class summaries need labelled records")
        groups[(r.unit, r.scale, r.label if by_class else None)].append(r)

    summaries = []
    for (unit, scale, label), members in groups.items():
        members.sort(key=lambda r: (r.sample, r.attention.tobytes()))
        stacked = np.stack([r.attention for r in members])  # (k, M, C)
        channel_means = stacked.mean(axis=2)
        diffs = channel_means[:, large] - channel_means[:, small]
        mean_diff, std = float(diffs.mean()), float(diffs.std())
        per_channel = stacked.mean(axis=0)
        for path in range(m):
            windows = [float(per_channel[path, c : c + window].mean()) for c in range(0, per_channel.shape[1], window)]
            summaries.append(
                AttentionSummary(
                    unit, scale, path, float(channel_means[:, path].mean()), mean_diff, std, len(members), label, windows
                )
            )
    summaries.sort(key=lambda s: (unit_sort_key(s.unit), s.scale, -1 if s.label is None else s.label, s.path))
    return summaries


def format_csv(summaries: Sequence[AttentionSummary], windows: bool = False) -> str:
    """Summaries sorted by unit, scale, (class,) path; floats at full precision.

    A ``label`` column is added when any summary is per class, and
    ``window_<i>`` columns when ``windows`` is set.
    """
    rows = sorted(summaries, key=lambda s: (unit_sort_key(s.unit), s.scale, -1 if s.label is None else s.label, s.path))
    header = list(CSV_COLUMNS)
    per_class = any(s.label is not None for s in rows)
    if per_class:
        header.append("label")
    width = max((len(s.windows) for s in rows), default=0) if windows else 0
    header += [f"window_{i}" for i in range(width)]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for s in rows:
        row = [s.unit, repr(s.scale), s.path, repr(s.mean_attention), repr(s.mean_diff), repr(s.std), s.n]
        if per_class:
            row.append("" if s.label is None else s.label)
        row += [repr(v) for v in s.windows[:width]] + [""] * (width - len(s.windows[:width]))
        writer.writerow(row)
    return buf.getvalue()


def emit_csv(summaries: Sequence[AttentionSummary], path: str | Path, windows: bool = False) -> Path:
    path = Path(path)
    path.write_text(format_csv(summaries, windows))
    logger.info("wrote %d summary rows to %s", len(summaries), path)
    return path


def read_csv(path: str | Path) -> list[dict]:
    """Parse an emitted CSV back into typed rows."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for key in ("scale", "mean_attention", "mean_diff", "std"):
            row[key] = float(row[key])
        row["path"], row["n"] = int(row["path"]), int(row["n"])
    return rows


def trend(summaries: Sequence[AttentionSummary], unit: str | None = None) -> list[tuple[float, float]]:
    """(scale, mean difference) for ``unit`` (default: the earliest unit), ascending scale."""
    if unit is None:
        unit = min((s.unit for s in summaries), key=unit_sort_key)
    points = {s.scale: s.mean_diff for s in summaries if s.unit == unit and s.label is None}
    return sorted(points.items())


def run_analysis(
    net: Network,
    images: np.ndarray,
    scales: Sequence[float],
    out: str | Path | None = None,
    units: str | Sequence[str] | None = None,
    labels: Sequence[int] | None = None,
    by_class: bool = False,
    windows: bool = False,
) -> list[AttentionSummary]:
    """scale_transform -> collect -> summarize -> emit_csv, logging the first unit's trend."""
    large = small = None
    if net.spec.sk is not None:
        large, small = path_roles(net.spec.sk.paths)
    records = collect(net, images, scales, units=units, labels=labels)
    summaries = summarize(records, large=large, small=small)
    if by_class:
        summaries += summarize(records, by_class=True, large=large, small=small)
    if out is not None:
        emit_csv(summaries, out, windows=windows)

    points = trend(summaries)
    if points:
        unit = min((s.unit for s in summaries), key=unit_sort_key)
        for scale, diff in points:
            logger.info("%s scale %.2f mean attention difference %+.6f", unit, scale, diff)
        change = points[-1][1] - points[0][1]
        direction = "increases" if change > 0 else "decreases" if change < 0 else "is flat"
        logger.info(
            "%s: difference %s with scale (%+.6f from %.2fx to %.2fx)",
            unit, direction, change, points[0][0], points[-1][0],
        )
    return summaries
