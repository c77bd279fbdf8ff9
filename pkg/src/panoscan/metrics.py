"""Patch-based evaluation of wide panoramas.

The panorama is cut into square, non-overlapping patches along its long
axis (remainder cropped). Style uniformity compares Gram matrices of
neighbouring patches; structural diversity compares patches at least
``separation`` grid steps apart, through a perceptual distance (higher is
more diverse) and a semantic cosine similarity (lower is less repetitive).

Features come from a back-end: ``FallbackExtractor`` computes them from
pixels; ``ExternalFeatures`` reads precomputed files.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import FeatureIOError, FormatError, InsufficientPatchesError, UsageError
from .formats import read_feature_array, read_pairwise, write_feature_file, write_pairwise

REPORT_COLUMNS = ("FID", "CLIP", "KID", "Style-L", "GSD-perceptual", "GSD-semantic")
EXTRA_COLUMNS = ("patches", "style_pairs", "gsd_pairs", "separation")


@dataclass
class PatchGrid:
    patches: list
    coords: list
    side: int
    axis: int

    def __len__(self):
        return len(self.patches)

    def reassemble(self) -> np.ndarray:
        return np.concatenate(self.patches, axis=self.axis)


@dataclass
class FeatureMap:
    values: np.ndarray
    source: str = "fallback-extractor"

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature values must be finite")


@dataclass(frozen=True)
class StyleReport:
    loss: float
    pair_count: int


@dataclass(frozen=True)
class GsdReport:
    perceptual: float
    semantic: float
    pair_count: int
    separation: int


def partition_patches(panorama) -> PatchGrid:
    """Square patches of side ``min(H, W)`` along the long axis; the remainder is cropped."""
    pano = np.asarray(panorama)
    if pano.ndim < 2 or pano.shape[0] == 0 or pano.shape[1] == 0:
        raise UsageError(f"cannot partition an empty image of shape {pano.shape}")
    h, w = pano.shape[:2]
    side = min(h, w)
    axis = 1 if w >= h else 0
    n = (w if axis == 1 else h) // side
    patches, coords = [], []
    for i in range(n):
        if axis == 1:
            patches.append(pano[:, i * side:(i + 1) * side])
            coords.append((0, i))
        else:
            patches.append(pano[i * side:(i + 1) * side, :])
            coords.append((i, 0))
    return PatchGrid(patches, coords, side, axis)


def gram_matrix(features) -> np.ndarray:
    """``F F^T / (C H W)`` for a ``(C, H, W)`` feature map."""
    f = np.asarray(features.values if isinstance(features, FeatureMap) else features, dtype=np.float64)
    if f.ndim == 2:
        f = f[None]
    c = f.shape[0]
    flat = f.reshape(c, -1)
    return flat @ flat.T / flat.size


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between ``a`` and ``b``.

    Zero vectors have no direction: two equal vectors score 1.0, otherwise
    a zero vector scores 0.0.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 1.0 if np.array_equal(a, b) else 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _as_hwc(patch):
    p = np.asarray(patch, dtype=np.float64)
    if p.ndim == 2:
        p = p[:, :, None]
    return p


def area_pool(image, grid: int) -> np.ndarray:
    """Mean over a ``grid x grid`` partition of an ``(H, W, C)`` image -> ``(C, grid, grid)``."""
    img = _as_hwc(image)
    h, w = img.shape[:2]
    rows = (np.arange(grid) * h) // grid
    cols = (np.arange(grid) * w) // grid
    row_counts = np.maximum(np.diff(np.append(rows, h)), 1)
    col_counts = np.maximum(np.diff(np.append(cols, w)), 1)
    pooled = np.add.reduceat(np.add.reduceat(img, rows, axis=0), cols, axis=1)
    pooled /= row_counts[:, None, None] * col_counts[None, :, None]
    return pooled.transpose(2, 0, 1)


def _fold(vec, out_dim):
    if vec.size == out_dim:
        return vec
    if vec.size < out_dim:
        return np.concatenate([vec, np.zeros(out_dim - vec.size)])
    return np.array([chunk.mean() for chunk in np.array_split(vec, out_dim)])


def fallback_features(patch, out_dim: int = 64, stats_weight: float = 0.25) -> FeatureMap:
    """Deterministic pooled descriptor of a patch, zero-mean and unit-norm.

    The descriptor concatenates the patch's channel-centred layout pooled to
    a small grid with per-channel statistics (mean relative to the other
    channels, standard deviation). Every part is invariant to adding a
    constant to the whole patch.
    """
    if out_dim < 1:
        raise UsageError("out_dim must be >= 1")
    img = _as_hwc(patch)
    c = img.shape[2]
    grid = max(1, math.ceil(math.sqrt(out_dim / c)))
    chan_mean = img.mean(axis=(0, 1))
    layout = area_pool(img - chan_mean, grid).ravel()
    stats = np.concatenate([chan_mean - chan_mean.mean(), img.std(axis=(0, 1))])
    parts = []
    for part, weight in ((layout, 1.0), (stats, stats_weight)):
        norm = np.linalg.norm(part)
        parts.append(weight * part / norm if norm > 0 else part)
    vec = _fold(np.concatenate(parts), out_dim)
    vec = vec - vec.mean()
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec = vec / norm
    return FeatureMap(vec.astype(np.float32), "fallback-extractor")


def style_feature_map(patch, grid: int = 8) -> FeatureMap:
    """``(3C, grid, grid)`` map: pooled intensities and absolute horizontal/vertical gradients."""
    img = _as_hwc(patch)
    dx = np.abs(np.diff(img, axis=1, append=img[:, -1:]))
    dy = np.abs(np.diff(img, axis=0, append=img[-1:, :]))
    stacked = np.concatenate([img, dx, dy], axis=2)
    return FeatureMap(area_pool(stacked, grid).astype(np.float32), "fallback-extractor")


class FallbackExtractor(BaseEstimator, TransformerMixin):
    """Pixel-statistics feature back-end.

    As a transformer it maps a sequence of patches to an ``(n, out_dim)``
    array of semantic descriptors. Perceptual distance is the Euclidean
    distance between descriptors.
    """

    def __init__(self, out_dim=64, style_grid=8, stats_weight=0.25):
        self.out_dim = out_dim
        self.style_grid = style_grid
        self.stats_weight = stats_weight

    def fit(self, X=None, y=None):
        self.n_features_out_ = self.out_dim
        return self

    def transform(self, X):
        return np.stack([fallback_features(p, self.out_dim, self.stats_weight).values for p in X])

    def semantic_vectors(self, grid: PatchGrid) -> np.ndarray:
        return self.transform(grid.patches)

    def style_maps(self, grid: PatchGrid) -> list:
        return [style_feature_map(p, self.style_grid).values for p in grid.patches]

    def perceptual_distances(self, grid: PatchGrid, semantic=None) -> np.ndarray:
        vecs = self.semantic_vectors(grid) if semantic is None else semantic
        return euclidean_matrix(vecs)

    def export(self, grid: PatchGrid, directory, with_pairwise=False) -> None:
        """Write this back-end's features in the layout ``ExternalFeatures`` reads."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        semantic = self.semantic_vectors(grid)
        for i, (vec, smap) in enumerate(zip(semantic, self.style_maps(grid))):
            write_feature_file(directory / f"semantic_{i:04d}.ssft", vec)
            write_feature_file(directory / f"style_{i:04d}.ssft", smap)
        if with_pairwise:
            write_pairwise(directory / "perceptual.sspd", self.perceptual_distances(grid, semantic))


def euclidean_matrix(vectors) -> np.ndarray:
    v = np.asarray(vectors, dtype=np.float64)
    n = v.shape[0]
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = np.linalg.norm(v[i] - v[j])
    return out


class ExternalFeatures:
    """Back-end reading precomputed features from a directory.

    Expected files, ``i`` being the 0-based patch index::

        semantic_{i:04d}.ssft   pooled semantic vector (flat)
        style_{i:04d}.ssft      (C, H, W) feature map for the Gram matrix
        perceptual.sspd         optional pairwise perceptual distances

    Without ``perceptual.sspd`` the perceptual distance is the Euclidean
    distance between semantic vectors.
    """

    def __init__(self, directory):
        self.directory = Path(directory)

    def _load(self, name):
        path = self.directory / name
        if not path.is_file():
            raise FeatureIOError(f"missing feature file {path}")
        try:
            return read_feature_array(path)
        except FormatError:
            raise
        except OSError as exc:
            raise FeatureIOError(f"cannot read {path}: {exc}") from exc

    def semantic_vectors(self, grid: PatchGrid) -> np.ndarray:
        return np.stack([self._load(f"semantic_{i:04d}.ssft").ravel() for i in range(len(grid))])

    def style_maps(self, grid: PatchGrid) -> list:
        return [self._load(f"style_{i:04d}.ssft") for i in range(len(grid))]

    def perceptual_distances(self, grid: PatchGrid, semantic=None) -> np.ndarray:
        path = self.directory / "perceptual.sspd"
        if path.is_file():
            dist = read_pairwise(path)
            if dist.shape[0] != len(grid):
                raise FeatureIOError(f"{path} covers {dist.shape[0]} patches, panorama has {len(grid)}")
            return dist.astype(np.float64)
        return euclidean_matrix(self.semantic_vectors(grid) if semantic is None else semantic)


def load_feature_file(path) -> FeatureMap:
    return FeatureMap(read_feature_array(path), "external-file")


def intra_style_loss(grid: PatchGrid, extractor) -> StyleReport:
    """Mean squared Frobenius distance between Gram matrices of neighbouring patches."""
    if len(grid) < 2:
        raise InsufficientPatchesError(f"style loss needs >= 2 patches, got {len(grid)}")
    grams = [gram_matrix(m) for m in extractor.style_maps(grid)]
    losses = [float(np.sum((grams[i] - grams[i + 1]) ** 2)) for i in range(len(grams) - 1)]
    return StyleReport(float(np.mean(losses)), len(losses))


def distant_pairs(n: int, separation: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(n) for j in range(i + separation, n)]


def gsd(grid: PatchGrid, extractor, separation: int = 2) -> GsdReport:
    """Mean perceptual distance and mean semantic cosine over patches ``>= separation`` apart."""
    if separation < 2:
        raise UsageError(f"separation must be >= 2, got {separation}")
    pairs = distant_pairs(len(grid), separation)
    if not pairs:
        raise InsufficientPatchesError(
            f"no patch pairs at separation >= {separation} among {len(grid)} patches")
    semantic = extractor.semantic_vectors(grid)
    dist = extractor.perceptual_distances(grid, semantic)
    perceptual = float(np.mean([dist[i, j] for i, j in pairs]))
    cosine = float(np.mean([cosine_similarity(semantic[i], semantic[j]) for i, j in pairs]))
    return GsdReport(perceptual, cosine, len(pairs), separation)


@dataclass
class MetricsReport:
    """One row of a Table-1-style report; metrics not computed stay ``None``."""

    values: dict = field(default_factory=lambda: dict.fromkeys(REPORT_COLUMNS))
    extras: dict = field(default_factory=lambda: dict.fromkeys(EXTRA_COLUMNS))

    @classmethod
    def from_results(cls, n_patches, style=None, diversity=None, external=None):
        report = cls()
        report.extras["patches"] = n_patches
        if style is not None:
            report.values["Style-L"] = style.loss
            report.extras["style_pairs"] = style.pair_count
        if diversity is not None:
            report.values["GSD-perceptual"] = diversity.perceptual
            report.values["GSD-semantic"] = diversity.semantic
            report.extras["gsd_pairs"] = diversity.pair_count
            report.extras["separation"] = diversity.separation
        for key, value in (external or {}).items():
            if key not in REPORT_COLUMNS:
                raise UsageError(f"unknown metric column {key!r}")
            report.values[key] = None if value is None else float(value)
        return report

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS + EXTRA_COLUMNS)
        row = [self.values[k] for k in REPORT_COLUMNS] + [self.extras[k] for k in EXTRA_COLUMNS]
        writer.writerow(["" if v is None else repr(v) if isinstance(v, float) else v for v in row])
        return buf.getvalue()

    def to_json(self) -> str:
        payload = {k: self.values[k] for k in REPORT_COLUMNS}
        payload.update({k: self.extras[k] for k in EXTRA_COLUMNS})
        return json.dumps(payload, indent=2) + "\n"
