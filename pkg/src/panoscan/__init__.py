"""Scan-based generation toolkit for extreme-aspect-ratio panoramas.

Plans window trajectories over a wide canvas, encodes positions with a
globally anchored rotary embedding, samples tiles from a toy flow-matching
model (or a procedural source), fuses them with ramp masks and evaluates
patch-level style consistency and diversity.
"""
from .config import PipelineConfig, parse_config
from .enhance import TileUpscaler, bilinear_upscale, upscale_tiles
from .exceptions import (ConfigurationError, CoverageError, DivergenceError, FeatureIOError, FormatError,
                         PanoscanError, UsageError)
from .flow import FlowMatchingModel, VectorFieldNet, fm_loss, sample, train_step
from .formats import (export_image, read_feature_array, read_pairwise, read_tensors, write_feature_file,
                      write_pairwise, write_tensors)
from .fusion import (PanoramaCanvas, build_ramp_mask, fuse_tiles, median_consensus, median_consensus_index,
                     seam_energy)
from .metrics import FallbackExtractor, ExternalFeatures, gram_matrix, gsd, intra_style_loss, partition_patches
from .pipeline import run_fuse, run_generate, run_metrics
from .rope import RopeParams, attention_logits, global_coords, rotary_phases, scanpe_attention
from .trajectory import ScanConfig, coverage_report, plan, plan_linear, plan_snake, tap_partition, window_interval

__all__ = [
    "PipelineConfig", "parse_config", "TileUpscaler", "bilinear_upscale", "upscale_tiles",
    "ConfigurationError", "CoverageError", "DivergenceError", "FeatureIOError", "FormatError",
    "PanoscanError", "UsageError", "FlowMatchingModel", "VectorFieldNet", "fm_loss", "sample", "train_step",
    "export_image", "read_feature_array", "read_pairwise", "read_tensors", "write_feature_file",
    "write_pairwise", "write_tensors", "PanoramaCanvas", "build_ramp_mask", "fuse_tiles", "median_consensus",
    "median_consensus_index", "seam_energy", "FallbackExtractor", "ExternalFeatures", "gram_matrix", "gsd",
    "intra_style_loss", "partition_patches", "run_fuse", "run_generate", "run_metrics", "RopeParams",
    "attention_logits", "global_coords", "rotary_phases", "scanpe_attention", "ScanConfig",
    "coverage_report", "plan", "plan_linear", "plan_snake", "tap_partition", "window_interval",
]

__version__ = "0.1.0"
