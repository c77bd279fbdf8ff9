"""Per-block frame selection and ramp-weighted assembly onto a global canvas.

The canvas keeps a weighted-value sum and a weight sum. Tiles are streamed
in one at a time, so memory is the two accumulators plus the tile in hand,
whatever the number of tiles.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .exceptions import ConfigurationError, PlacementError, UsageError

STATISTICS = ("mean", "luminance", "variance")
_LUMA = np.array([0.2126, 0.7152, 0.0722])


@dataclass
class TileBlock:
    t: int
    frames: list
    anchor: tuple[int, int]

    def __post_init__(self):
        if len(self.frames) == 0:
            raise UsageError(f"block {self.t} has no frames")
        shape = np.shape(self.frames[0])
        if any(np.shape(f) != shape for f in self.frames):
            raise UsageError(f"frames of block {self.t} differ in shape")


def frame_statistic(frame, kind: str = "mean") -> float:
    """Scalar summary of a frame used for median consensus.

    ``luminance`` weights three-channel frames with Rec. 709 coefficients and
    falls back to the plain mean otherwise.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.size == 0:
        raise UsageError("cannot take a statistic of an empty frame")
    if kind == "mean":
        return float(frame.mean())
    if kind == "luminance":
        if frame.ndim == 3 and frame.shape[2] == 3:
            return float((frame @ _LUMA).mean())
        return float(frame.mean())
    if kind == "variance":
        return float(frame.var())
    raise ConfigurationError(f"unknown frame statistic {kind!r}; choose from {STATISTICS}",
                             keys=("fusion.statistic",))


def median_consensus_index(stats: Sequence[float]) -> int:
    """Index of the value nearest the median; lowest index wins ties.

    An even count uses the mean of the two central values as the median.
    """
    stats = np.asarray(stats, dtype=np.float64)
    if stats.size == 0:
        raise UsageError("median consensus needs at least one value")
    ordered = np.sort(stats)
    n = ordered.size
    if n % 2:
        median = ordered[n // 2]
    else:
        median = (ordered[n // 2 - 1] + ordered[n // 2]) / 2.0
    return int(np.argmin(np.abs(stats - median)))


def median_consensus(block: TileBlock, kind: str = "mean"):
    """Return ``(index, frame)`` of the block's most typical frame."""
    stats = [frame_statistic(f, kind) for f in block.frames]
    idx = median_consensus_index(stats)
    return idx, block.frames[idx]


class Overlaps(NamedTuple):
    top: int = 0
    bottom: int = 0
    left: int = 0
    right: int = 0


def ramp_profile(length: int, start: int = 0, end: int = 0) -> np.ndarray:
    """1-D weights rising as ``k/(ov+1)`` over ``ov`` cells at each ramped end."""
    if start < 0 or end < 0:
        raise ConfigurationError("overlap widths must be non-negative", keys=("fusion.ramp",))
    if start >= length or end >= length:
        raise ConfigurationError(
            f"overlap ({start}, {end}) must be smaller than the tile extent {length}",
            keys=("fusion.ramp",))
    profile = np.ones(length)
    if start:
        profile[:start] = np.arange(1, start + 1) / (start + 1)
    if end:
        profile[length - end:] = np.minimum(profile[length - end:], np.arange(end, 0, -1) / (end + 1))
    return profile


@dataclass(frozen=True)
class RampMask:
    weights: np.ndarray
    overlaps: Overlaps


def build_ramp_mask(shape, overlaps=(0, 0, 0, 0)) -> RampMask:
    """Separable mask: product of a vertical and a horizontal ramp profile.

    ``overlaps`` is ``(top, bottom, left, right)``.
    """
    height, width = shape[:2]
    ov = Overlaps(*overlaps)
    weights = np.outer(ramp_profile(height, ov.top, ov.bottom), ramp_profile(width, ov.left, ov.right))
    return RampMask(weights, ov)


def edge_overlaps(anchors, footprint) -> list[Overlaps]:
    """Per-tile overlap width on each edge, from the footprints of intersecting neighbours.

    A neighbour intrudes on the left edge when it starts further left, ends
    inside this tile and shares some rows; likewise for the other edges.
    """
    fh, fw = footprint
    out = []
    for i, (h, w) in enumerate(anchors):
        top = bottom = left = right = 0
        for j, (oh, ow) in enumerate(anchors):
            if i == j:
                continue
            rows = min(h + fh, oh + fh) - max(h, oh)
            cols = min(w + fw, ow + fw) - max(w, ow)
            if rows <= 0 or cols <= 0:
                continue
            if ow < w:
                left = max(left, cols)
            elif ow > w:
                right = max(right, cols)
            if oh < h:
                top = max(top, rows)
            elif oh > h:
                bottom = max(bottom, rows)
        out.append(Overlaps(top, bottom, left, right))
    return out


class PanoramaCanvas:
    """Weighted-sum accumulators for the fused panorama.

    ``value`` holds the mask-weighted pixel sum (H x W x C) and ``weight``
    the mask sum (H x W).
    """

    def __init__(self, extent, channels: int = 3, dtype=np.float64):
        self.extent = (int(extent[0]), int(extent[1]))
        self.channels = channels
        self.value = np.zeros(self.extent + (channels,), dtype=dtype)
        self.weight = np.zeros(self.extent, dtype=dtype)

    def accumulate(self, tile, mask, anchor, block=None) -> "PanoramaCanvas":
        tile = np.asarray(tile)
        if tile.ndim == 2:
            tile = tile[:, :, None]
        weights = mask.weights if isinstance(mask, RampMask) else np.asarray(mask)
        th, tw = tile.shape[:2]
        if weights.shape != (th, tw):
            raise PlacementError(f"mask shape {weights.shape} does not match tile {(th, tw)}", block)
        if tile.shape[2] != self.channels:
            raise PlacementError(f"tile has {tile.shape[2]} channels, canvas has {self.channels}", block)
        h, w = anchor
        if h < 0 or w < 0 or h + th > self.extent[0] or w + tw > self.extent[1]:
            raise PlacementError(
                f"tile {th}x{tw} at {tuple(anchor)} exceeds canvas {self.extent[0]}x{self.extent[1]}", block)
        self.value[h:h + th, w:w + tw] += weights[:, :, None] * tile
        self.weight[h:h + th, w:w + tw] += weights
        return self

    def finalize(self):
        """Return ``(panorama, uncovered)``; uncovered cells are 0 in the panorama."""
        uncovered = self.weight <= 0
        pano = np.zeros_like(self.value)
        covered = ~uncovered
        pano[covered] = self.value[covered] / self.weight[covered][:, None]
        return pano, uncovered


def fuse_tiles(tiles, anchors, extent, overlaps=None, channels=None) -> tuple[np.ndarray, np.ndarray]:
    """Fuse an iterable of tiles at their anchors.

    ``overlaps`` defaults to the geometric overlaps implied by the anchors and
    the first tile's footprint. Accepts a generator, so tiles can be streamed.
    """
    anchors = [tuple(a) for a in anchors]
    canvas = None
    for t, (tile, anchor) in enumerate(zip(tiles, anchors), start=1):
        tile = np.asarray(tile)
        if canvas is None:
            canvas = PanoramaCanvas(extent, channels or (tile.shape[2] if tile.ndim == 3 else 1))
            if overlaps is None:
                overlaps = edge_overlaps(anchors, tile.shape[:2])
        canvas.accumulate(tile, build_ramp_mask(tile.shape[:2], overlaps[t - 1]), anchor, block=t)
    if canvas is None:
        canvas = PanoramaCanvas(extent, channels or 1)
    return canvas.finalize()


@dataclass(frozen=True)
class SeamStat:
    position: int
    max_diff: float
    mean_diff: float


@dataclass(frozen=True)
class SeamReport:
    axis: int
    seams: tuple[SeamStat, ...]
    interior_max: float
    interior_mean: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["kind", "axis", "position", "max_diff", "mean_diff"])
        for s in self.seams:
            writer.writerow(["seam", self.axis, s.position, repr(s.max_diff), repr(s.mean_diff)])
        writer.writerow(["interior", self.axis, "", repr(self.interior_max), repr(self.interior_mean)])
        return buf.getvalue()


def seam_energy(panorama, seams, axis: int = 1) -> SeamReport:
    """Absolute first differences across seams vs. across all other cell boundaries.

    A seam at position ``p`` is the boundary between index ``p-1`` and ``p``
    along ``axis`` (1 = columns, 0 = rows).
    """
    pano = np.asarray(panorama, dtype=np.float64)
    if pano.ndim == 2:
        pano = pano[:, :, None]
    diffs = np.abs(np.diff(pano, axis=axis))
    n = pano.shape[axis]
    stats = []
    is_seam = np.zeros(max(n - 1, 0), dtype=bool)
    for p in seams:
        if not 1 <= p <= n - 1:
            raise UsageError(f"seam position {p} outside 1..{n - 1}")
        d = np.take(diffs, p - 1, axis=axis)
        stats.append(SeamStat(int(p), float(d.max()), float(d.mean())))
        is_seam[p - 1] = True
    interior = np.compress(~is_seam, diffs, axis=axis)
    if interior.size:
        imax, imean = float(interior.max()), float(interior.mean())
    else:
        imax = imean = 0.0
    return SeamReport(axis, tuple(stats), imax, imean)
