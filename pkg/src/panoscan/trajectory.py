"""Scan-path planning over the global canvas.

All quantities are integers in latent-cell units. Block indices ``t`` are
1-based, matching the scan order ``t = 1..N``; everything else is 0-based.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .exceptions import ConfigurationError

LINEAR = "linear"
SNAKE = "snake"


class Direction(NamedTuple):
    """Axis-aligned unit step ``(dh, dw)``."""

    dh: int
    dw: int

    def validate(self) -> "Direction":
        if sorted((abs(self.dh), abs(self.dw))) != [0, 1]:
            raise ConfigurationError(
                f"direction must be an axis-aligned unit vector, got {tuple(self)}",
                keys=("scan.direction",),
            )
        return self


@dataclass(frozen=True)
class ScanConfig:
    """Geometry of one scan.

    ``window_height`` is the footprint extent across the scan axis; ``None``
    means a square window of side ``window_len``.
    """

    window_len: int
    spatial_stride: int
    step_stride: int
    n_steps: int
    p_init: tuple[int, int] = (0, 0)
    mode: str = LINEAR
    linear_direction: tuple[int, int] = (0, 1)
    snake_grid: tuple[int, int] | None = None
    window_height: int | None = None

    def __post_init__(self):
        for key in ("window_len", "spatial_stride", "step_stride", "n_steps"):
            value = getattr(self, key)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ConfigurationError(f"{key} must be a positive integer, got {value!r}",
                                         keys=(f"scan.{key}",))
        if self.window_height is not None and self.window_height <= 0:
            raise ConfigurationError("window_height must be positive", keys=("scan.window_height",))
        if self.spatial_stride > self.window_len:
            raise ConfigurationError(
                f"spatial stride {self.spatial_stride} exceeds window length {self.window_len}",
                keys=("scan.spatial_stride", "scan.window_len"),
            )
        if len(self.p_init) != 2 or min(self.p_init) < 0:
            raise ConfigurationError(f"p_init must be a non-negative pair, got {self.p_init}",
                                     keys=("scan.p_init",))
        if self.mode == LINEAR:
            Direction(*self.linear_direction).validate()
        elif self.mode == SNAKE:
            if self.snake_grid is None:
                raise ConfigurationError("snake mode requires snake_grid", keys=("scan.snake_grid",))
            rows, cols = self.snake_grid
            if rows <= 0 or cols <= 0 or rows * cols != self.n_steps:
                raise ConfigurationError(
                    f"snake grid {rows}x{cols} does not match n_steps={self.n_steps}",
                    keys=("scan.snake_grid", "scan.n_steps"),
                )
        else:
            raise ConfigurationError(f"unknown scan mode {self.mode!r}", keys=("scan.mode",))

    @property
    def footprint(self) -> tuple[int, int]:
        """Window extent ``(height, width)`` in cells."""
        height = self.window_len if self.window_height is None else self.window_height
        return height, self.window_len


@dataclass(frozen=True)
class Trajectory:
    anchors: tuple[tuple[int, int], ...]
    directions: tuple[Direction, ...]
    config: ScanConfig

    def __len__(self):
        return len(self.anchors)

    def anchor(self, t: int) -> tuple[int, int]:
        """Anchor of block ``t`` (1-based)."""
        if not 1 <= t <= len(self.anchors):
            raise IndexError(f"block index {t} outside 1..{len(self.anchors)}")
        return self.anchors[t - 1]

    def reach(self) -> tuple[int, int]:
        """Smallest canvas extent containing every window footprint."""
        if not self.anchors:
            return 0, 0
        fh, fw = self.config.footprint
        return (max(a[0] for a in self.anchors) + fh, max(a[1] for a in self.anchors) + fw)


@dataclass(frozen=True)
class WindowSpec:
    t: int
    interval_start: int
    interval_end: int
    anchor: tuple[int, int] | None = None


@dataclass(frozen=True)
class CoverageReport:
    """Per-cell window multiplicity over a canvas."""

    counts: np.ndarray
    min_multiplicity: int
    max_multiplicity: int

    @property
    def uncovered(self) -> np.ndarray:
        return self.counts == 0

    @property
    def n_uncovered(self) -> int:
        return int(self.uncovered.sum())

    @property
    def complete(self) -> bool:
        return self.n_uncovered == 0

    def summary(self) -> str:
        h, w = self.counts.shape
        return (f"canvas {h}x{w}: multiplicity min={self.min_multiplicity} "
                f"max={self.max_multiplicity}, uncovered cells={self.n_uncovered}")


@dataclass(frozen=True)
class TapPartition:
    """Contiguous grouping of windows into decode blocks.

    ``blocks`` holds 1-based window indices; ``anchor_ranges`` holds, per
    block, ``(h_min, w_min, h_max, w_max)`` over the anchors it contains.
    """

    blocks: tuple[tuple[int, ...], ...]
    primary_anchor_index: int
    anchor_ranges: tuple[tuple[int, int, int, int], ...] = field(default=())

    def block_of(self, t: int) -> int:
        """1-based decode block containing window ``t``."""
        for b, group in enumerate(self.blocks, start=1):
            if group[0] <= t <= group[-1]:
                return b
        raise IndexError(f"window {t} not in partition")


def _build(anchors, config):
    directions = []
    for prev, cur in zip(anchors, anchors[1:]):
        dh, dw = cur[0] - prev[0], cur[1] - prev[1]
        directions.append(Direction(dh // config.step_stride, dw // config.step_stride))
    return Trajectory(tuple(anchors), tuple(directions), config)


def plan_linear(config: ScanConfig) -> Trajectory:
    """Anchors ``O_t = (t-1)·δ·d + P_init`` for a constant direction ``d``."""
    if config.mode != LINEAR:
        raise ConfigurationError("plan_linear needs a linear-mode config", keys=("scan.mode",))
    d = Direction(*config.linear_direction).validate()
    h0, w0 = config.p_init
    step = config.step_stride
    anchors = []
    h, w = h0, w0
    for _ in range(config.n_steps):
        anchors.append((h, w))
        h += step * d.dh
        w += step * d.dw
    return _build(anchors, config)


def snake_cells(rows: int, cols: int) -> list[tuple[int, int]]:
    """Boustrophedon order over a ``rows x cols`` grid, starting top-left going right."""
    cells = []
    for r in range(rows):
        cs = range(cols) if r % 2 == 0 else range(cols - 1, -1, -1)
        cells.extend((r, c) for c in cs)
    return cells


def plan_snake(config: ScanConfig) -> Trajectory:
    if config.mode != SNAKE:
        raise ConfigurationError("plan_snake needs a snake-mode config", keys=("scan.mode",))
    rows, cols = config.snake_grid
    if rows * cols != config.n_steps:
        raise ConfigurationError(f"snake grid {rows}x{cols} does not match n_steps={config.n_steps}",
                                 keys=("scan.snake_grid", "scan.n_steps"))
    h0, w0 = config.p_init
    step = config.step_stride
    anchors = [(h0 + r * step, w0 + c * step) for r, c in snake_cells(rows, cols)]
    return _build(anchors, config)


def plan(config: ScanConfig) -> Trajectory:
    return plan_snake(config) if config.mode == SNAKE else plan_linear(config)


def window_interval(config: ScanConfig, t: int) -> WindowSpec:
    """Interval ``[φ_t, φ_t + l]`` with ``φ_t = (t-1)·Δ``."""
    if not 1 <= t <= config.n_steps:
        raise IndexError(f"block index {t} outside 1..{config.n_steps}")
    start = (t - 1) * config.spatial_stride
    return WindowSpec(t, start, start + config.window_len)


def coverage_report(trajectory: Trajectory, canvas_extent: tuple[int, int]) -> CoverageReport:
    """Count how many window footprints cover each canvas cell.

    Footprint parts falling outside the canvas are ignored here; placement
    checks belong to the fusion stage.
    """
    height, width = canvas_extent
    counts = np.zeros((height, width), dtype=np.int32)
    fh, fw = trajectory.config.footprint
    for h, w in trajectory.anchors:
        counts[max(h, 0):min(h + fh, height), max(w, 0):min(w + fw, width)] += 1
    if counts.size == 0:
        return CoverageReport(counts, 0, 0)
    return CoverageReport(counts, int(counts.min()), int(counts.max()))


def tap_partition(trajectory: Trajectory, block_size: int) -> TapPartition:
    """Group windows into ``ceil(N / block_size)`` contiguous decode blocks."""
    if block_size < 1:
        raise ConfigurationError(f"block_size must be >= 1, got {block_size}", keys=("tap.block_size",))
    n = len(trajectory)
    blocks = tuple(tuple(range(s + 1, min(s + block_size, n) + 1)) for s in range(0, n, block_size))
    ranges = []
    for group in blocks:
        hs = [trajectory.anchors[t - 1][0] for t in group]
        ws = [trajectory.anchors[t - 1][1] for t in group]
        ranges.append((min(hs), min(ws), max(hs), max(ws)))
    assert len(blocks) == math.ceil(n / block_size)
    return TapPartition(blocks, blocks[0][0] if blocks else 0, tuple(ranges))


def trajectory_to_text(trajectory: Trajectory) -> str:
    """One ``t h w`` line per anchor."""
    return "".join(f"{t} {h} {w}\n" for t, (h, w) in enumerate(trajectory.anchors, start=1))


def partition_to_text(partition: TapPartition) -> str:
    lines = []
    for b, group in enumerate(partition.blocks, start=1):
        lines.append(f"{b} " + " ".join(str(t) for t in group) + "\n")
    return "".join(lines)


def anchors_from_text(text: str) -> list[tuple[int, int]]:
    """Parse ``t h w`` lines back into anchors ordered by ``t``."""
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ConfigurationError(f"line {lineno}: expected 't h w', got {line!r}")
        t, h, w = (int(p) for p in parts)
        rows.append((t, h, w))
    rows.sort()
    if [r[0] for r in rows] != list(range(1, len(rows) + 1)):
        raise ConfigurationError("anchor file must list t = 1..N exactly once")
    return [(h, w) for _, h, w in rows]
