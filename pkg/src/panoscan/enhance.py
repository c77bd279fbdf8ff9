"""Tile enhancers: the resolution-raising stage between generation and fusion.

Only deterministic stand-ins live here: identity and bilinear upscaling.
Any object with ``scale`` and ``transform(tiles)`` can take their place.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import ConfigurationError, EnhancerError


def scaled_int(value, scale, key="enhancer.scale") -> int:
    """``value * scale`` as an exact integer, or a configuration error."""
    out = value * scale
    if abs(out - round(out)) > 1e-9:
        raise ConfigurationError(f"{value} x {scale} = {out} is not an integer", keys=(key,))
    return int(round(out))


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear interpolation weights on half-pixel centres, linear extrapolation at the borders."""
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.clip(np.floor(x).astype(int), 0, n_in - 2)
    frac = x - i0
    rows = np.arange(n_out)
    m[rows, i0] = 1.0 - frac
    m[rows, i0 + 1] = frac
    return m


def bilinear_upscale(tile, scale) -> np.ndarray:
    """Separable bilinear resize of an ``(H, W[, C])`` tile by ``scale``.

    Pixel ``j`` of the output samples input coordinate ``(j + 0.5)/scale - 0.5``,
    so tiles cut from one image and upscaled separately stay aligned. Linear
    content is reproduced exactly, border pixels included.
    """
    tile = np.asarray(tile, dtype=np.float64)
    h, w = tile.shape[:2]
    out_h, out_w = scaled_int(h, scale), scaled_int(w, scale)
    rows = _interp_matrix(h, out_h)
    cols = _interp_matrix(w, out_w)
    out = np.tensordot(rows, tile, axes=(1, 0))
    return np.moveaxis(np.tensordot(cols, out, axes=(1, 1)), 0, 1)


class TileUpscaler(BaseEstimator, TransformerMixin):
    """``kind`` is ``"identity"`` or ``"upscale"``; ``scale`` must be 1 for identity."""

    def __init__(self, kind="identity", scale=1):
        self.kind = kind
        self.scale = scale

    def fit(self, X=None, y=None):
        if self.kind not in ("identity", "upscale"):
            raise ConfigurationError(f"unknown enhancer {self.kind!r}", keys=("enhancer.kind",))
        if self.kind == "identity" and self.scale != 1:
            raise ConfigurationError("identity enhancer requires scale 1", keys=("enhancer.scale",))
        if not self.scale >= 1:
            raise ConfigurationError(f"enhancer scale must be >= 1, got {self.scale}",
                                     keys=("enhancer.scale",))
        return self

    def transform(self, X):
        self.fit()
        out = []
        for tile in X:
            tile = np.asarray(tile)
            res = tile if self.kind == "identity" else bilinear_upscale(tile, self.scale)
            expected = (scaled_int(tile.shape[0], self.scale), scaled_int(tile.shape[1], self.scale))
            if res.shape[:2] != expected:
                raise EnhancerError(f"enhancer produced {res.shape[:2]}, expected {expected}")
            out.append(res)
        return out


def upscale_tiles(tiles, enhancer) -> list:
    """Apply ``enhancer`` to every tile, checking the output size contract."""
    out = enhancer.transform(tiles)
    for tile, res in zip(tiles, out):
        expected = (scaled_int(np.shape(tile)[0], enhancer.scale), scaled_int(np.shape(tile)[1], enhancer.scale))
        if np.shape(res)[:2] != expected:
            raise EnhancerError(f"enhancer produced {np.shape(res)[:2]}, expected {expected}")
    return out
