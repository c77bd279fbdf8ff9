"""End-to-end runs: plan -> generate -> enhance -> select -> fuse -> report."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import formats
from .config import AUTO, PipelineConfig, format_config
from .enhance import TileUpscaler, scaled_int, upscale_tiles
from .exceptions import CoverageError, FeatureIOError, InsufficientPatchesError, UsageError
from .fusion import (Overlaps, PanoramaCanvas, TileBlock, build_ramp_mask, edge_overlaps,
                     frame_statistic, median_consensus_index, seam_energy)
from .metrics import (ExternalFeatures, FallbackExtractor, MetricsReport, gsd, intra_style_loss,
                      partition_patches)
from .sources import FlowSource, ProceduralSource
from .trajectory import (TapPartition, Trajectory, anchors_from_text, coverage_report, partition_to_text,
                         plan, tap_partition, trajectory_to_text, window_interval)

log = logging.getLogger(__name__)


class TileMemoryTracker:
    """Counts bytes of tile data held by the pipeline and remembers the peak."""

    def __init__(self):
        self.current = 0
        self.peak = 0

    def allocate(self, arrays):
        self.current += sum(np.asarray(a).nbytes for a in arrays)
        self.peak = max(self.peak, self.current)

    def release(self, arrays):
        self.current -= sum(np.asarray(a).nbytes for a in arrays)


@dataclass
class ManifestEntry:
    t: int
    anchor: tuple
    window: tuple
    block: int
    primary: bool
    selected: int
    statistics: list

    def line(self) -> str:
        stats = ",".join(f"{s:.6f}" for s in self.statistics)
        return (f"tile t={self.t} anchor={self.anchor[0]},{self.anchor[1]} "
                f"window={self.window[0]},{self.window[1]} block={self.block} "
                f"primary={'yes' if self.primary else 'no'} mcs={self.selected} stats={stats}")


@dataclass
class GenerateResult:
    panorama: np.ndarray
    uncovered: np.ndarray
    trajectory: Trajectory
    partition: TapPartition
    manifest: list
    seams: list
    peak_tile_bytes: int
    files: dict = field(default_factory=dict)


def scaled_overlaps(config: PipelineConfig, trajectory: Trajectory) -> list[Overlaps]:
    """Per-tile ramp widths at output resolution."""
    scale = config.scale
    base = edge_overlaps(trajectory.anchors, trajectory.config.footprint)
    ramp = config["fusion.ramp"]
    out = []
    for ov in base:
        if ramp != AUTO:
            ov = Overlaps(*(ramp if o else 0 for o in ov))
        out.append(Overlaps(*(scaled_int(o, scale, "fusion.ramp") for o in ov)))
    return out


def seam_positions(anchors, footprint, extent):
    """Tile edges strictly inside the canvas, per axis."""
    rows, cols = set(), set()
    for h, w in anchors:
        for p in (h, h + footprint[0]):
            if 0 < p < extent[0]:
                rows.add(p)
        for p in (w, w + footprint[1]):
            if 0 < p < extent[1]:
                cols.add(p)
    return sorted(rows), sorted(cols)


def make_source(config: PipelineConfig):
    v = config.values
    base = config.base_extent
    if v["source.kind"] == "flow":
        return FlowSource(
            base, config.scan.footprint, config.rope, grid=v["flow.grid"], hidden_dim=v["flow.hidden_dim"],
            iterations=v["flow.iterations"], learning_rate=v["flow.learning_rate"],
            batch_size=v["flow.batch_size"], sample_steps=v["flow.sample_steps"],
            channels=v["source.channels"], frames=v["source.frames"], prompt=v["source.prompt"],
            seed=v["io.seed"])
    return ProceduralSource(base, v["source.pattern"], v["source.channels"], v["source.frames"],
                            v["source.jitter"], v["source.outlier_prob"], v["io.seed"])


def _check_coverage(config, trajectory):
    report = coverage_report(trajectory, config.base_extent)
    if not report.complete:
        raise CoverageError(f"trajectory leaves cells uncovered: {report.summary()}", report)
    return report


def run_generate(config: PipelineConfig, out_dir=None, source=None, enhancer=None,
                 tracker: TileMemoryTracker | None = None) -> GenerateResult:
    """Generate and fuse a panorama; write artefacts to ``out_dir`` when given.

    Tiles are produced one decode block at a time and dropped after fusion,
    so held tile memory is bounded by one block regardless of scan length.
    """
    v = config.values
    trajectory = plan(config.scan)
    _check_coverage(config, trajectory)
    partition = tap_partition(trajectory, v["tap.block_size"])
    enhancer = enhancer or TileUpscaler(v["enhancer.kind"], config.scale).fit()
    scale = config.scale
    overlaps = scaled_overlaps(config, trajectory)
    anchors = [(scaled_int(h, scale), scaled_int(w, scale)) for h, w in trajectory.anchors]
    footprint = trajectory.config.footprint
    out_footprint = (scaled_int(footprint[0], scale), scaled_int(footprint[1], scale))
    source = source or make_source(config)
    tracker = tracker or TileMemoryTracker()
    canvas = PanoramaCanvas(config.extent, v["source.channels"])

    tiles_dir = None
    if out_dir is not None and v["io.save_tiles"]:
        tiles_dir = Path(out_dir) / "tiles"
        tiles_dir.mkdir(parents=True, exist_ok=True)

    manifest = []
    for b, group in enumerate(partition.blocks, start=1):
        raw = {t: source.block(t, trajectory.anchor(t), footprint) for t in group}
        tracker.allocate([f for frames in raw.values() for f in frames])
        enhanced = {t: upscale_tiles(frames, enhancer) for t, frames in raw.items()}
        if enhancer.scale != 1:
            tracker.allocate([f for frames in enhanced.values() for f in frames])
        selected = {}
        for t in group:
            block = TileBlock(t, enhanced[t], anchors[t - 1])
            stats = [frame_statistic(f, v["fusion.statistic"]) for f in block.frames]
            idx = median_consensus_index(stats)
            tile = np.asarray(block.frames[idx], dtype=np.float32)
            if tile.ndim == 2:
                tile = tile[:, :, None]
            if tile.shape[:2] != out_footprint:
                raise UsageError(f"tile {t} has shape {tile.shape[:2]}, expected {out_footprint}")
            selected[t] = tile
            canvas.accumulate(tile, build_ramp_mask(out_footprint, overlaps[t - 1]), anchors[t - 1], block=t)
            win = window_interval(trajectory.config, t)
            window = (scaled_int(win.interval_start, scale), scaled_int(win.interval_end, scale))
            manifest.append(ManifestEntry(t, anchors[t - 1], window, b,
                                          t == partition.primary_anchor_index, idx, stats))
        if tiles_dir is not None:
            formats.write_tensors(tiles_dir / f"block_{b:04d}.sstf",
                                  {f"tile_{t:04d}": tile for t, tile in selected.items()})
        if enhancer.scale != 1:
            tracker.release([f for frames in enhanced.values() for f in frames])
        tracker.release([f for frames in raw.values() for f in frames])
        del raw, enhanced, selected

    pano, uncovered = canvas.finalize()
    pano = pano.astype(np.float32)
    rows, cols = seam_positions(anchors, out_footprint, config.extent)
    seams = [seam_energy(pano, cols, axis=1)]
    if rows:
        seams.append(seam_energy(pano, rows, axis=0))
    result = GenerateResult(pano, uncovered, trajectory, partition, manifest, seams, tracker.peak)
    if out_dir is not None:
        result.files = write_generate_outputs(config, result, Path(out_dir), source, anchors, tiles_dir)
    return result


def seams_csv(reports) -> str:
    text = ""
    for i, report in enumerate(reports):
        body = report.to_csv()
        text += body if i == 0 else body.split("\n", 1)[1]
    return text


def manifest_text(config, result, anchors) -> str:
    v = config.values
    lines = [
        "# scan manifest",
        f"created = {time.strftime('%Y-%m-%dT%H:%M:%S')}",
        f"seed = {v['io.seed']}",
        f"canvas = {config.extent[0]}x{config.extent[1]}",
        f"base_canvas = {config.base_extent[0]}x{config.base_extent[1]}",
        f"mode = {v['scan.mode']}",
        f"windows = {len(result.trajectory)}",
        f"blocks = {len(result.partition.blocks)}",
        f"primary_anchor = {result.partition.primary_anchor_index}",
        f"peak_tile_bytes = {result.peak_tile_bytes}",
    ]
    lines += [e.line() for e in result.manifest]
    return "\n".join(lines) + "\n"


def write_generate_outputs(config, result, out_dir: Path, source, anchors, tiles_dir) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {
        "panorama": out_dir / "panorama.sstf",
        "image": out_dir / ("panorama.ppm" if result.panorama.shape[2] == 3 else "panorama.pgm"),
        "uncovered": out_dir / "uncovered.pgm",
        "seams": out_dir / "seams.csv",
        "manifest": out_dir / "manifest.txt",
        "trajectory": out_dir / "trajectory.txt",
        "partition": out_dir / "partition.txt",
        "config": out_dir / "config.txt",
    }
    formats.write_tensors(files["panorama"], {"panorama": result.panorama,
                                              "uncovered": result.uncovered.astype(np.float32)})
    formats.export_image(result.panorama, files["image"])
    formats.export_image(result.uncovered.astype(np.float64), files["uncovered"])
    files["seams"].write_text(seams_csv(result.seams))
    files["manifest"].write_text(manifest_text(config, result, anchors))
    files["trajectory"].write_text(trajectory_to_text(result.trajectory))
    files["partition"].write_text(partition_to_text(result.partition))
    files["config"].write_text(format_config(config))
    if tiles_dir is not None:
        (tiles_dir / "anchors.txt").write_text("".join(f"{t} {h} {w}\n" for t, (h, w) in enumerate(anchors, 1)))
    if isinstance(source, FlowSource):
        files["loss_curve"] = out_dir / "loss_curve.csv"
        files["checkpoint"] = out_dir / "checkpoint.sstf"
        files["loss_curve"].write_text(
            "iter,loss\n" + "".join(f"{i},{float(loss)!r}\n" for i, loss in enumerate(source.loss_curve)))
        formats.write_tensors(files["checkpoint"], source.model.net_.params)
    return files


def run_fuse(config: PipelineConfig, tiles_dir, out_dir=None, tracker=None):
    """Fuse selected tiles previously written by ``generate`` (or any tool using the same layout).

    ``tiles_dir`` holds ``anchors.txt`` (``t h w`` at output resolution) and
    SSTF files whose arrays are named ``tile_{t:04d}``.
    """
    tiles_dir = Path(tiles_dir)
    anchor_file = tiles_dir / "anchors.txt"
    if not anchor_file.is_file():
        raise FileNotFoundError(f"missing {anchor_file}")
    anchors = anchors_from_text(anchor_file.read_text())
    files = sorted(tiles_dir.glob("*.sstf"))
    if not files:
        raise FileNotFoundError(f"no .sstf tile files in {tiles_dir}")
    tracker = tracker or TileMemoryTracker()
    canvas = None
    overlaps = None
    seen = set()
    ramp = config["fusion.ramp"]
    for path in files:
        tiles = formats.read_tensors(path)
        tracker.allocate(tiles.values())
        for name, tile in tiles.items():
            t = int(name.rsplit("_", 1)[1])
            if not 1 <= t <= len(anchors) or t in seen:
                raise UsageError(f"{path}: unexpected or duplicate tile {name}")
            seen.add(t)
            if tile.ndim == 2:
                tile = tile[:, :, None]
            if canvas is None:
                canvas = PanoramaCanvas(config.extent, tile.shape[2])
                overlaps = edge_overlaps(anchors, tile.shape[:2])
                if ramp != AUTO:
                    r = scaled_int(ramp, config.scale, "fusion.ramp")
                    overlaps = [Overlaps(*(r if o else 0 for o in ov)) for ov in overlaps]
            canvas.accumulate(tile, build_ramp_mask(tile.shape[:2], overlaps[t - 1]), anchors[t - 1], block=t)
        tracker.release(tiles.values())
    missing = set(range(1, len(anchors) + 1)) - seen
    if missing:
        raise UsageError(f"tiles missing for windows {sorted(missing)}")
    pano, uncovered = canvas.finalize()
    pano = pano.astype(np.float32)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        formats.write_tensors(out_dir / "panorama.sstf", {"panorama": pano,
                                                          "uncovered": uncovered.astype(np.float32)})
        formats.export_image(pano, out_dir / ("panorama.ppm" if pano.shape[2] == 3 else "panorama.pgm"))
        formats.export_image(uncovered.astype(np.float64), out_dir / "uncovered.pgm")
    return pano, uncovered


def load_panorama(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"panorama {path} not found")
    if path.suffix.lower() in (".ppm", ".pgm", ".pnm"):
        return formats.read_image(path)
    arrays = formats.read_tensors(path)
    if "panorama" not in arrays:
        raise UsageError(f"{path} has no array named 'panorama'")
    return arrays["panorama"]


def metrics_backend(config: PipelineConfig):
    v = config.values
    if v["metrics.extractor"] == "external":
        if not v["metrics.features_dir"]:
            raise FeatureIOError("external feature back-end selected but metrics.features_dir is empty")
        directory = Path(v["metrics.features_dir"])
        if not directory.is_dir():
            raise FeatureIOError(f"feature directory {directory} does not exist")
        return ExternalFeatures(directory)
    return FallbackExtractor(out_dim=v["metrics.out_dim"]).fit()


def compute_metrics(panorama, config: PipelineConfig, backend=None) -> MetricsReport:
    v = config.values
    grid = partition_patches(panorama)
    backend = backend or metrics_backend(config)
    try:
        style = intra_style_loss(grid, backend)
    except InsufficientPatchesError as exc:
        log.warning("Style-L not computed: %s", exc)
        style = None
    try:
        diversity = gsd(grid, backend, v["metrics.separation"])
    except InsufficientPatchesError as exc:
        log.warning("GSD not computed: %s", exc)
        diversity = None
    external = {}
    if v["metrics.external_scores"]:
        path = Path(v["metrics.external_scores"])
        if not path.is_file():
            raise FeatureIOError(f"external score file {path} not found")
        external = json.loads(path.read_text())
    return MetricsReport.from_results(len(grid), style, diversity, external)


def run_metrics(panorama_path, config: PipelineConfig, out_dir=None) -> MetricsReport:
    report = compute_metrics(load_panorama(panorama_path), config)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.csv").write_text(report.to_csv())
        (out_dir / "metrics.json").write_text(report.to_json())
    return report


def inspect_text(config: PipelineConfig) -> str:
    """Human-readable dump of anchors, windows, decode blocks and coverage."""
    trajectory = plan(config.scan)
    partition = tap_partition(trajectory, config["tap.block_size"])
    report = coverage_report(trajectory, config.base_extent)
    lines = ["# anchors (t h w)", trajectory_to_text(trajectory).rstrip("\n"), "# windows (t start end)"]
    for t in range(1, len(trajectory) + 1):
        win = window_interval(trajectory.config, t)
        lines.append(f"{t} {win.interval_start} {win.interval_end}")
    lines += ["# decode blocks (block windows...)", partition_to_text(partition).rstrip("\n"),
              f"# primary anchor: window {partition.primary_anchor_index}",
              f"# coverage: {report.summary()}"]
    return "\n".join(lines) + "\n"
